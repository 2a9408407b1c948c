//! Small CPU convolutional-network engine: NCHW tensors, im2col convolutions
//! backed by `matrixmultiply`, batch normalization, and hand-written backward
//! passes. Everything runs single-threaded in a fixed order, so a forward/backward
//! pass is bit-reproducible.

pub mod adam;
pub mod layers;
pub mod params;

pub use adam::{Adam, AdamConfig};
pub use layers::{BatchNorm2d, Registry, Conv2d, ConvBnRelu, ConvTranspose2d, DoubleConv, UpConvBnRelu};
pub use params::{Param, ParamId, ParamRole, ParamStore};

use serde::{Deserialize, Serialize};

/// Dense `[n, c, h, w]` tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let s = self.sample_len();
        &self.data[i * s..(i + 1) * s]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let s = self.sample_len();
        &mut self.data[i * s..(i + 1) * s]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Concatenates along channels.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert!(a.n == b.n && a.h == b.h && a.w == b.w, "concat shape mismatch");
        let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
        for i in 0..a.n {
            let dst = out.sample_mut(i);
            let la = a.sample_len();
            dst[..la].copy_from_slice(a.sample(i));
            dst[la..].copy_from_slice(b.sample(i));
        }
        out
    }

    /// Inverse of [`Tensor::concat_channels`]: splits off the first `c_a` channels.
    pub fn split_channels(&self, c_a: usize) -> (Tensor, Tensor) {
        let mut a = Tensor::zeros(self.n, c_a, self.h, self.w);
        let mut b = Tensor::zeros(self.n, self.c - c_a, self.h, self.w);
        let la = a.sample_len();
        for i in 0..self.n {
            let src = self.sample(i);
            a.sample_mut(i).copy_from_slice(&src[..la]);
            b.sample_mut(i).copy_from_slice(&src[la..]);
        }
        (a, b)
    }
}

/// `C = A * B + beta * C` for row-major operands given as strided views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    c: &mut [f32],
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= (m - 1) * rsa + (k.max(1) - 1) * csa + 1 || k == 0);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strided views stay inside the slices (checked above for A; B and C
    // are sized by the callers from the same dimensions).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a sliding-window operator between an "image" grid and a "column" grid.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub channels: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub col_h: usize,
    pub col_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    #[inline]
    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    #[inline]
    fn cols(&self) -> usize {
        self.col_h * self.col_w
    }
}

/// Gathers image patches into a `[channels * k * k, col_h * col_w]` matrix.
pub(crate) fn im2col(img: &[f32], g: &Window, cols: &mut [f32]) {
    let p = g.cols();
    debug_assert_eq!(cols.len(), g.rows() * p);
    for c in 0..g.channels {
        let plane = &img[c * g.img_h * g.img_w..(c + 1) * g.img_h * g.img_w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.col_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oh * g.col_w..(oh + 1) * g.col_w];
                    if ih < 0 || ih >= g.img_h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.img_w..(ih as usize + 1) * g.img_w];
                    for (ow, o) in out_row.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *o = if iw < 0 || iw >= g.img_w as isize {
                            0.0
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto the image.
pub(crate) fn col2im(cols: &[f32], g: &Window, img: &mut [f32]) {
    let p = g.cols();
    debug_assert_eq!(cols.len(), g.rows() * p);
    for c in 0..g.channels {
        let plane = &mut img[c * g.img_h * g.img_w..(c + 1) * g.img_h * g.img_w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.col_h {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.img_h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.img_w..(ih as usize + 1) * g.img_w];
                    for ow in 0..g.col_w {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.img_w as isize {
                            dst[iw as usize] += src[oh * g.col_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 max pooling; returns the pooled tensor and the winning offset (0..4) per output.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<u8>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u8; out.data.len()];
    for nc in 0..x.n * x.c {
        let src = &x.data[nc * x.h * x.w..(nc + 1) * x.h * x.w];
        for r in 0..oh {
            for c in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut which = 0u8;
                for (k, (dr, dc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let v = src[(2 * r + dr) * x.w + 2 * c + dc];
                    if v > best {
                        best = v;
                        which = k as u8;
                    }
                }
                let o = nc * oh * ow + r * ow + c;
                out.data[o] = best;
                arg[o] = which;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(dy: &Tensor, arg: &[u8], h: usize, w: usize) -> Tensor {
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    let (oh, ow) = (dy.h, dy.w);
    for nc in 0..dy.n * dy.c {
        for r in 0..oh {
            for c in 0..ow {
                let o = nc * oh * ow + r * ow + c;
                let (dr, dc) = [(0, 0), (0, 1), (1, 0), (1, 1)][arg[o] as usize];
                dx.data[nc * h * w + (2 * r + dr) * w + 2 * c + dc] += dy.data[o];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = Window {
            channels: 2,
            img_h: 5,
            img_w: 6,
            col_h: 3,
            col_w: 3,
            k: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f32> = (0..60).map(|i| ((i * 37 % 11) as f32) - 5.0).collect();
        let y: Vec<f32> = (0..18 * 9).map(|i| ((i * 13 % 7) as f32) - 3.0).collect();
        let mut cols = vec![0.0; 18 * 9];
        im2col(&x, &g, &mut cols);
        let lhs: f32 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut img = vec![0.0; 60];
        col2im(&y, &g, &mut img);
        let rhs: f32 = img.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(1, 1, 2, 4, vec![1.0, 5.0, 0.0, 0.0, 2.0, 3.0, 0.0, 7.0]);
        let (y, arg) = maxpool2(&x);
        assert_eq!(y.data, vec![5.0, 7.0]);
        let dy = Tensor::from_vec(1, 1, 1, 2, vec![1.0, 2.0]);
        let dx = maxpool2_backward(&dy, &arg, 2, 4);
        assert_eq!(dx.data, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor::from_vec(2, 1, 1, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(2, 2, 1, 2, vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = Tensor::concat_channels(&a, &b);
        assert_eq!(c.data[..6], [1.0, 2.0, 5.0, 6.0, 7.0, 8.0]);
        let (a2, b2) = c.split_channels(1);
        assert_eq!((a2, b2), (a, b));
    }
}
