use std::collections::BTreeMap;

use super::params::{ParamId, ParamRole, ParamStore};
use super::{col2im, gemm, im2col, Tensor, Window};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Parameter store under construction plus the fan-in of every weight/bias, which
/// the initializer needs.
#[derive(Debug, Default)]
pub struct Registry {
    pub store: ParamStore,
    pub fan_in: BTreeMap<ParamId, usize>,
}

impl Registry {
    fn weight(&mut self, name: String, shape: &[usize], fan_in: usize, role: ParamRole) -> ParamId {
        let id = self.store.register(name, shape, role);
        self.fan_in.insert(id, fan_in);
        id
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &mut Registry,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan = cin * k * k;
        let weight = reg.weight(format!("{name}.weight"), &[cout, cin, k, k], fan, ParamRole::Weight);
        let bias = bias.then(|| reg.weight(format!("{name}.bias"), &[cout], fan, ParamRole::Bias));
        Self {
            weight,
            bias,
            cin,
            cout,
            k,
            stride,
            pad,
        }
    }

    fn window(&self, h: usize, w: usize) -> Window {
        Window {
            channels: self.cin,
            img_h: h,
            img_w: w,
            col_h: (h + 2 * self.pad - self.k) / self.stride + 1,
            col_w: (w + 2 * self.pad - self.k) / self.stride + 1,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "conv input channels");
        let g = self.window(x.h, x.w);
        let p = g.col_h * g.col_w;
        let kk = self.cin * self.k * self.k;
        let w = store.value(self.weight);
        let mut out = Tensor::zeros(x.n, self.cout, g.col_h, g.col_w);
        let mut cols = vec![0.0f32; if self.is_pointwise() { 0 } else { kk * p }];
        for i in 0..x.n {
            let src: &[f32] = if self.is_pointwise() {
                x.sample(i)
            } else {
                im2col(x.sample(i), &g, &mut cols);
                &cols
            };
            let dst = out.sample_mut(i);
            gemm(self.cout, kk, p, w, kk, 1, src, p, 1, dst, 0.0);
            if let Some(b) = self.bias {
                for (co, &bv) in store.value(b).iter().enumerate() {
                    dst[co * p..(co + 1) * p].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients (when trainable) and returns the input
    /// gradient when `need_dx`.
    pub fn backward(&self, store: &mut ParamStore, x: &Tensor, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let g = self.window(x.h, x.w);
        let p = g.col_h * g.col_w;
        let kk = self.cin * self.k * self.k;
        let train_w = store.get(self.weight).trainable;
        let mut dx = need_dx.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
        let mut cols = vec![0.0f32; if self.is_pointwise() { 0 } else { kk * p }];
        let mut dcols = vec![0.0f32; kk * p];
        for i in 0..x.n {
            let dyi = dy.sample(i);
            if train_w {
                let src: &[f32] = if self.is_pointwise() {
                    x.sample(i)
                } else {
                    im2col(x.sample(i), &g, &mut cols);
                    &cols
                };
                // dW[cout, kk] += dy[cout, p] * cols[kk, p]^T
                let dw = &mut store.get_mut(self.weight).grad;
                gemm(self.cout, p, kk, dyi, p, 1, src, 1, p, dw, 1.0);
            }
            if let Some(b) = self.bias {
                let bp = store.get_mut(b);
                if bp.trainable {
                    for co in 0..self.cout {
                        bp.grad[co] += dyi[co * p..(co + 1) * p].iter().sum::<f32>();
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                // dcols[kk, p] = W[cout, kk]^T * dy[cout, p]
                let w = store.value(self.weight);
                if self.is_pointwise() {
                    gemm(kk, self.cout, p, w, 1, kk, dyi, p, 1, dx.sample_mut(i), 0.0);
                } else {
                    gemm(kk, self.cout, p, w, 1, kk, dyi, p, 1, &mut dcols, 0.0);
                    col2im(&dcols, &g, dx.sample_mut(i));
                }
            }
        }
        dx
    }
}

/// Transposed convolution, stored as `[cin, cout, k, k]`; the adjoint of a
/// convolution mapping the output grid back onto the input grid.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &mut Registry,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        bias: bool,
    ) -> Self {
        let fan = cout * k * k;
        let weight = reg.weight(format!("{name}.weight"), &[cin, cout, k, k], fan, ParamRole::Weight);
        let bias = bias.then(|| reg.weight(format!("{name}.bias"), &[cout], fan, ParamRole::Bias));
        Self {
            weight,
            bias,
            cin,
            cout,
            k,
            stride,
            pad,
            out_pad,
        }
    }

    pub fn out_size(&self, h: usize) -> usize {
        (h - 1) * self.stride + self.k + self.out_pad - 2 * self.pad
    }

    fn window(&self, h: usize, w: usize) -> Window {
        Window {
            channels: self.cout,
            img_h: self.out_size(h),
            img_w: self.out_size(w),
            col_h: h,
            col_w: w,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "transposed conv input channels");
        let g = self.window(x.h, x.w);
        let p = x.h * x.w;
        let kk = self.cout * self.k * self.k;
        let w = store.value(self.weight);
        let mut out = Tensor::zeros(x.n, self.cout, g.img_h, g.img_w);
        let mut cols = vec![0.0f32; kk * p];
        let op = g.img_h * g.img_w;
        for i in 0..x.n {
            // cols[kk, p] = W[cin, kk]^T * x[cin, p]
            gemm(kk, self.cin, p, w, 1, kk, x.sample(i), p, 1, &mut cols, 0.0);
            let dst = out.sample_mut(i);
            col2im(&cols, &g, dst);
            if let Some(b) = self.bias {
                for (co, &bv) in store.value(b).iter().enumerate() {
                    dst[co * op..(co + 1) * op].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        out
    }

    pub fn backward(&self, store: &mut ParamStore, x: &Tensor, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let g = self.window(x.h, x.w);
        let p = x.h * x.w;
        let kk = self.cout * self.k * self.k;
        let op = g.img_h * g.img_w;
        let train_w = store.get(self.weight).trainable;
        let mut dx = need_dx.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
        let mut dcols = vec![0.0f32; kk * p];
        for i in 0..x.n {
            let dyi = dy.sample(i);
            if let Some(b) = self.bias {
                let bp = store.get_mut(b);
                if bp.trainable {
                    for co in 0..self.cout {
                        bp.grad[co] += dyi[co * op..(co + 1) * op].iter().sum::<f32>();
                    }
                }
            }
            if !train_w && dx.is_none() {
                continue;
            }
            im2col(dyi, &g, &mut dcols);
            if train_w {
                // dW[cin, kk] += x[cin, p] * dcols[kk, p]^T
                let dw = &mut store.get_mut(self.weight).grad;
                gemm(self.cin, p, kk, x.sample(i), p, 1, &dcols, 1, p, dw, 1.0);
            }
            if let Some(dx) = dx.as_mut() {
                let w = store.value(self.weight);
                gemm(self.cin, kk, p, w, kk, 1, &dcols, p, 1, dx.sample_mut(i), 0.0);
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub c: usize,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    batch_stats: bool,
}

impl BatchNorm2d {
    pub fn new(reg: &mut Registry, name: &str, c: usize) -> Self {
        let s = &mut reg.store;
        Self {
            scale: s.register(format!("{name}.scale"), &[c], ParamRole::BnScale),
            shift: s.register(format!("{name}.shift"), &[c], ParamRole::BnShift),
            running_mean: s.register(format!("{name}.running_mean"), &[c], ParamRole::RunningMean),
            running_var: s.register(format!("{name}.running_var"), &[c], ParamRole::RunningVar),
            c,
        }
    }

    /// Inference behaviour: normalize with running statistics.
    pub fn forward_eval(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        self.forward_inner(store, x, None).0
    }

    /// Training forward. Frozen layers (scale not trainable) fall back to running
    /// statistics and leave them untouched.
    pub fn forward_train(&self, store: &mut ParamStore, x: &Tensor) -> (Tensor, BnCache) {
        if !store.get(self.scale).trainable {
            return self.forward_inner(store, x, None);
        }
        let plane = x.plane();
        let m = (x.n * plane) as f64;
        let mut mean = vec![0.0f32; self.c];
        let mut var = vec![0.0f32; self.c];
        for ch in 0..self.c {
            let mut s = 0.0f64;
            for i in 0..x.n {
                let off = i * x.sample_len() + ch * plane;
                s += x.data[off..off + plane].iter().map(|&v| v as f64).sum::<f64>();
            }
            let mu = s / m;
            let mut ss = 0.0f64;
            for i in 0..x.n {
                let off = i * x.sample_len() + ch * plane;
                ss += x.data[off..off + plane]
                    .iter()
                    .map(|&v| (v as f64 - mu).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = mu as f32;
            var[ch] = (ss / m) as f32;
        }
        {
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let rm = &mut store.get_mut(self.running_mean).value;
            for ch in 0..self.c {
                rm[ch] = (1.0 - BN_MOMENTUM) * rm[ch] + BN_MOMENTUM * mean[ch];
            }
            let rv = &mut store.get_mut(self.running_var).value;
            for ch in 0..self.c {
                rv[ch] = (1.0 - BN_MOMENTUM) * rv[ch] + BN_MOMENTUM * (var[ch] as f64 * unbias) as f32;
            }
        }
        self.forward_inner(store, x, Some((&mean, &var)))
    }

    fn forward_inner(&self, store: &ParamStore, x: &Tensor, stats: Option<(&[f32], &[f32])>) -> (Tensor, BnCache) {
        assert_eq!(x.c, self.c, "batch norm channels");
        let (mean, var) = match stats {
            Some((m, v)) => (m, v),
            None => (store.value(self.running_mean), store.value(self.running_var)),
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let scale = store.value(self.scale);
        let shift = store.value(self.shift);
        let plane = x.plane();
        let mut out = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut xhat = vec![0.0f32; x.data.len()];
        for i in 0..x.n {
            for ch in 0..self.c {
                let off = i * x.sample_len() + ch * plane;
                for j in off..off + plane {
                    let h = (x.data[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out.data[j] = scale[ch] * h + shift[ch];
                }
            }
        }
        (
            out,
            BnCache {
                xhat,
                inv_std,
                batch_stats: stats.is_some(),
            },
        )
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &BnCache, dy: &Tensor) -> Tensor {
        let plane = dy.plane();
        let m = (dy.n * plane) as f32;
        let mut sum_dy = vec![0.0f32; self.c];
        let mut sum_dy_xhat = vec![0.0f32; self.c];
        for i in 0..dy.n {
            for ch in 0..self.c {
                let off = i * dy.sample_len() + ch * plane;
                for j in off..off + plane {
                    sum_dy[ch] += dy.data[j];
                    sum_dy_xhat[ch] += dy.data[j] * cache.xhat[j];
                }
            }
        }
        if store.get(self.scale).trainable {
            let g = store.grad_mut(self.scale);
            for ch in 0..self.c {
                g[ch] += sum_dy_xhat[ch];
            }
        }
        if store.get(self.shift).trainable {
            let g = store.grad_mut(self.shift);
            for ch in 0..self.c {
                g[ch] += sum_dy[ch];
            }
        }
        let scale = store.value(self.scale);
        let mut dx = Tensor::zeros(dy.n, dy.c, dy.h, dy.w);
        for i in 0..dy.n {
            for ch in 0..self.c {
                let off = i * dy.sample_len() + ch * plane;
                let k = scale[ch] * cache.inv_std[ch];
                if cache.batch_stats {
                    let (a, b) = (sum_dy[ch] / m, sum_dy_xhat[ch] / m);
                    for j in off..off + plane {
                        dx.data[j] = k * (dy.data[j] - a - cache.xhat[j] * b);
                    }
                } else {
                    for j in off..off + plane {
                        dx.data[j] = k * dy.data[j];
                    }
                }
            }
        }
        dx
    }
}

fn relu_inplace(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    Tensor {
        data: y
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&y, &d)| if y > 0.0 { d } else { 0.0 })
            .collect(),
        ..*dy
    }
}

/// Activations a unit keeps for its backward pass.
#[derive(Debug, Clone)]
pub struct UnitCache {
    input: Tensor,
    bn: BnCache,
    output: Tensor,
}

impl UnitCache {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

/// 3x3 convolution (no bias) -> batch norm -> ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(reg: &mut Registry, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            conv: Conv2d::new(reg, &format!("{name}.conv"), cin, cout, 3, 1, 1, false),
            bn: BatchNorm2d::new(reg, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward_eval(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut y = self.bn.forward_eval(store, &self.conv.forward(store, x));
        relu_inplace(&mut y);
        y
    }

    pub fn forward_train(&self, store: &mut ParamStore, x: Tensor) -> UnitCache {
        let z = self.conv.forward(store, &x);
        let (mut y, bn) = self.bn.forward_train(store, &z);
        relu_inplace(&mut y);
        UnitCache {
            input: x,
            bn,
            output: y,
        }
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &UnitCache, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let dz = self.bn.backward(store, &cache.bn, &relu_backward(&cache.output, dy));
        self.conv.backward(store, &cache.input, &dz, need_dx)
    }
}

/// Transposed convolution (no bias) -> batch norm -> ReLU; doubles spatial size.
#[derive(Debug, Clone)]
pub struct UpConvBnRelu {
    pub up: ConvTranspose2d,
    pub bn: BatchNorm2d,
}

impl UpConvBnRelu {
    /// `kernel` 3 uses padding 1 and output padding 1; `kernel` 2 uses neither.
    pub fn new(reg: &mut Registry, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        let (pad, out_pad) = if kernel == 3 { (1, 1) } else { (0, 0) };
        Self {
            up: ConvTranspose2d::new(reg, &format!("{name}.tconv"), cin, cout, kernel, 2, pad, out_pad, false),
            bn: BatchNorm2d::new(reg, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward_eval(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut y = self.bn.forward_eval(store, &self.up.forward(store, x));
        relu_inplace(&mut y);
        y
    }

    pub fn forward_train(&self, store: &mut ParamStore, x: Tensor) -> UnitCache {
        let z = self.up.forward(store, &x);
        let (mut y, bn) = self.bn.forward_train(store, &z);
        relu_inplace(&mut y);
        UnitCache {
            input: x,
            bn,
            output: y,
        }
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &UnitCache, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let dz = self.bn.backward(store, &cache.bn, &relu_backward(&cache.output, dy));
        self.up.backward(store, &cache.input, &dz, need_dx)
    }
}

/// Two consecutive [`ConvBnRelu`] units.
#[derive(Debug, Clone)]
pub struct DoubleConv {
    pub first: ConvBnRelu,
    pub second: ConvBnRelu,
}

#[derive(Debug, Clone)]
pub struct DoubleCache {
    first: UnitCache,
    second: UnitCache,
}

impl DoubleCache {
    pub fn output(&self) -> &Tensor {
        self.second.output()
    }
}

impl DoubleConv {
    pub fn new(reg: &mut Registry, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            first: ConvBnRelu::new(reg, &format!("{name}.0"), cin, cout),
            second: ConvBnRelu::new(reg, &format!("{name}.1"), cout, cout),
        }
    }

    pub fn forward_eval(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        self.second.forward_eval(store, &self.first.forward_eval(store, x))
    }

    pub fn forward_train(&self, store: &mut ParamStore, x: Tensor) -> DoubleCache {
        let first = self.first.forward_train(store, x);
        let second = self.second.forward_train(store, first.output().clone());
        DoubleCache { first, second }
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &DoubleCache, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let d = self
            .second
            .backward(store, &cache.second, dy, true)
            .expect("inner gradient requested");
        self.first.backward(store, &cache.first, &d, need_dx)
    }
}
