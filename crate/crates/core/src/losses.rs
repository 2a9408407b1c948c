//! Pretext and segmentation losses with analytic gradients, and the inpainting
//! hole mask.
//!
//! All losses take flat prediction/target slices of equal length plus an optional
//! element validity mask; invalid elements contribute to no sum and no count.
//! Values and gradients are computed in `f64`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::Tensor;
use crate::rng::stream_rng;
use crate::{Error, Result};

pub const BCE_EPS: f64 = 1e-7;
pub const W_REC: f64 = 0.99;
pub const MASK_SIZE: usize = 128;
pub const HOLE_SIZE: usize = 64;

/// Loss value and its gradient with respect to the predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossGrad {
    fn zeros(n: usize) -> Self {
        Self {
            value: 0.0,
            grad: vec![0.0; n],
        }
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &LossGrad, b: f64) -> LossGrad {
        LossGrad {
            value: a * self.value + b * other.value,
            grad: self.grad.iter().zip(&other.grad).map(|(x, y)| a * x + b * y).collect(),
        }
    }
}

fn check_len(a: usize, b: usize, valid: Option<&[bool]>) -> Result<()> {
    if a != b {
        return Err(Error::shape(a, b));
    }
    if let Some(v) = valid {
        if v.len() != a {
            return Err(Error::shape(a, v.len()));
        }
    }
    Ok(())
}

#[inline]
fn is_valid(valid: Option<&[bool]>, i: usize) -> bool {
    valid.is_none_or(|v| v[i])
}

/// Mean absolute error plus root-mean-square error between `x` and its
/// reconstruction `fx`.
pub fn identity_loss(x: &[f64], fx: &[f64], valid: Option<&[bool]>) -> Result<LossGrad> {
    check_len(x.len(), fx.len(), valid)?;
    let n = (0..x.len()).filter(|&i| is_valid(valid, i)).count();
    let mut out = LossGrad::zeros(x.len());
    if n == 0 {
        return Ok(out);
    }
    let nf = n as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for i in (0..x.len()).filter(|&i| is_valid(valid, i)) {
        let e = fx[i] - x[i];
        abs += e.abs();
        sq += e * e;
    }
    let rmse = (sq / nf).sqrt();
    out.value = abs / nf + rmse;
    for i in (0..x.len()).filter(|&i| is_valid(valid, i)) {
        let e = fx[i] - x[i];
        let g1 = if e > 0.0 {
            1.0
        } else if e < 0.0 {
            -1.0
        } else {
            0.0
        } / nf;
        let g2 = if rmse > 0.0 { e / (nf * rmse) } else { 0.0 };
        out.grad[i] = g1 + g2;
    }
    Ok(out)
}

/// Square hole of zeros inside a square patch of ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub size: usize,
    pub hole: usize,
    pub row: usize,
    pub col: usize,
}

impl MaskSpec {
    pub fn new(size: usize, hole: usize, row: usize, col: usize) -> Result<Self> {
        if hole == 0 || hole >= size || row + hole > size || col + hole > size {
            return Err(Error::Validation(format!(
                "hole {hole} at ({row}, {col}) does not fit strictly inside {size}x{size}"
            )));
        }
        Ok(Self { size, hole, row, col })
    }

    /// Hole offset drawn uniformly over all placements fully inside the patch.
    pub fn sample(size: usize, hole: usize, rng: &mut impl Rng) -> Result<Self> {
        if hole == 0 || hole >= size {
            return Err(Error::Validation(format!("hole {hole} must be in 1..{size}")));
        }
        let row = rng.random_range(0..=size - hole);
        let col = rng.random_range(0..=size - hole);
        Self::new(size, hole, row, col)
    }

    #[inline]
    pub fn in_hole(&self, r: usize, c: usize) -> bool {
        (self.row..self.row + self.hole).contains(&r) && (self.col..self.col + self.hole).contains(&c)
    }

    /// Row-major mask values: 0 inside the hole, 1 elsewhere.
    pub fn values(&self) -> Vec<f64> {
        let mut v = vec![1.0; self.size * self.size];
        for r in self.row..self.row + self.hole {
            v[r * self.size + self.col..r * self.size + self.col + self.hole].fill(0.0);
        }
        v
    }

    pub fn hole_fraction(&self) -> f64 {
        (self.hole * self.hole) as f64 / (self.size * self.size) as f64
    }
}

/// 128x128 mask with a 64x64 hole, placement drawn from `seed`.
pub fn sample_mask(seed: u64) -> MaskSpec {
    MaskSpec::sample(MASK_SIZE, HOLE_SIZE, &mut stream_rng(seed, 7)).expect("default mask geometry is valid")
}

/// Element-wise product of every channel of every sample with the mask.
pub fn apply_mask(x: &Tensor, m: &MaskSpec) -> Result<Tensor> {
    if x.h != m.size || x.w != m.size {
        return Err(Error::shape(format!("{0}x{0}", m.size), format!("{}x{}", x.h, x.w)));
    }
    let mut out = x.clone();
    let plane = x.plane();
    for nc in 0..x.n * x.c {
        let p = &mut out.data[nc * plane..(nc + 1) * plane];
        for r in m.row..m.row + m.hole {
            p[r * m.size + m.col..r * m.size + m.col + m.hole].fill(0.0);
        }
    }
    Ok(out)
}

/// Reconstruction (inside the hole) and context (outside) terms of the inpainting
/// loss. `mask` holds 1 outside and 0 inside the hole, per element.
pub fn inpainting_terms(x: &[f64], fx: &[f64], mask: &[f64], valid: Option<&[bool]>) -> Result<(LossGrad, LossGrad)> {
    check_len(x.len(), fx.len(), valid)?;
    if mask.len() != x.len() {
        return Err(Error::shape(x.len(), mask.len()));
    }
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::Validation("inpainting mask must be binary".into()));
    }
    let (mut n_hole, mut n_ctx) = (0.0, 0.0);
    for i in (0..x.len()).filter(|&i| is_valid(valid, i)) {
        n_hole += 1.0 - mask[i];
        n_ctx += mask[i];
    }
    if n_hole == 0.0 || n_ctx == 0.0 {
        return Err(Error::DegenerateMask(format!(
            "{n_hole} hole and {n_ctx} context elements; both must be nonzero"
        )));
    }
    let mut rec = LossGrad::zeros(x.len());
    let mut con = LossGrad::zeros(x.len());
    for i in (0..x.len()).filter(|&i| is_valid(valid, i)) {
        let e = fx[i] - x[i];
        if mask[i] == 0.0 {
            rec.value += e * e / n_hole;
            rec.grad[i] = 2.0 * e / n_hole;
        } else {
            con.value += e * e / n_ctx;
            con.grad[i] = 2.0 * e / n_ctx;
        }
    }
    Ok((rec, con))
}

/// `w_rec * L_rec + (1 - w_rec) * L_con`.
pub fn inpainting_loss(x: &[f64], fx: &[f64], mask: &[f64], w_rec: f64, valid: Option<&[bool]>) -> Result<LossGrad> {
    if !(0.0..=1.0).contains(&w_rec) {
        return Err(Error::Validation(format!("w_rec {w_rec} outside [0, 1]")));
    }
    let (rec, con) = inpainting_terms(x, fx, mask, valid)?;
    Ok(rec.combine(w_rec, &con, 1.0 - w_rec))
}

/// Mean binary cross-entropy with predictions clamped to `[eps, 1 - eps]`.
pub fn bce_loss(y: &[f64], p: &[f64], valid: Option<&[bool]>) -> Result<LossGrad> {
    check_len(y.len(), p.len(), valid)?;
    let n = (0..y.len()).filter(|&i| is_valid(valid, i)).count();
    let mut out = LossGrad::zeros(y.len());
    if n == 0 {
        return Ok(out);
    }
    let nf = n as f64;
    for i in (0..y.len()).filter(|&i| is_valid(valid, i)) {
        let q = p[i].clamp(BCE_EPS, 1.0 - BCE_EPS);
        out.value -= (y[i] * q.ln() + (1.0 - y[i]) * (1.0 - q).ln()) / nf;
        out.grad[i] = (-y[i] / q + (1.0 - y[i]) / (1.0 - q)) / nf;
    }
    Ok(out)
}

/// `1 - (2 sum(y p) + 1) / (sum(y) + sum(p) + 1)` over all valid elements.
pub fn dice_loss(y: &[f64], p: &[f64], valid: Option<&[bool]>) -> Result<LossGrad> {
    check_len(y.len(), p.len(), valid)?;
    let (mut syp, mut sy, mut sp) = (0.0, 0.0, 0.0);
    for i in (0..y.len()).filter(|&i| is_valid(valid, i)) {
        syp += y[i] * p[i];
        sy += y[i];
        sp += p[i];
    }
    let num = 2.0 * syp + 1.0;
    let den = sy + sp + 1.0;
    let mut out = LossGrad::zeros(y.len());
    out.value = 1.0 - num / den;
    for i in (0..y.len()).filter(|&i| is_valid(valid, i)) {
        out.grad[i] = (num - 2.0 * y[i] * den) / (den * den);
    }
    Ok(out)
}

/// Binary cross-entropy plus dice.
pub fn downstream_loss(y: &[f64], p: &[f64], valid: Option<&[bool]>) -> Result<LossGrad> {
    Ok(bce_loss(y, p, valid)?.combine(1.0, &dice_loss(y, p, valid)?, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn identity_examples() {
        let x = vec![0.3, -0.2, 0.9, 0.0];
        assert_eq!(identity_loss(&x, &x, None).unwrap().value, 0.0);
        let zeros = vec![0.0; 16];
        let half = vec![0.5; 16];
        assert!(close(identity_loss(&zeros, &half, None).unwrap().value, 1.0, 1e-12));
    }

    #[test]
    fn identity_is_homogeneous() {
        let x = [0.1, 0.4, -0.3, 0.8];
        let fx = [0.0, 0.5, -0.1, 0.2];
        let base = identity_loss(&x, &fx, None).unwrap().value;
        let scaled: Vec<f64> = x.iter().zip(&fx).map(|(a, b)| a + 3.0 * (b - a)).collect();
        assert!(close(identity_loss(&x, &scaled, None).unwrap().value, 3.0 * base, 1e-12));
    }

    #[test]
    fn invalid_elements_are_ignored() {
        let x = [0.0, 0.0, 0.0];
        let fx = [0.5, 0.5, 100.0];
        let valid = [true, true, false];
        let l = identity_loss(&x, &fx, Some(&valid)).unwrap();
        assert!(close(l.value, 1.0, 1e-12));
        assert_eq!(l.grad[2], 0.0);
        assert_eq!(bce_loss(&[1.0, 0.0], &[0.5, 0.0], Some(&[true, false])).unwrap().value, LN2);
    }

    #[test]
    fn mask_geometry() {
        for seed in 0..50 {
            let m = sample_mask(seed);
            let v = m.values();
            let hole = v.iter().filter(|&&x| x == 0.0).count();
            assert_eq!(hole as f64 / v.len() as f64, 0.25);
            assert!(m.row + 64 <= 128 && m.col + 64 <= 128);
        }
        let m = MaskSpec::new(128, 64, 0, 0).unwrap();
        let x = Tensor::from_vec(1, 2, 128, 128, vec![1.0; 2 * 128 * 128]);
        let xm = apply_mask(&x, &m).unwrap();
        for c in 0..2 {
            for r in 0..128 {
                for col in 0..128 {
                    let v = xm.data[(c * 128 + r) * 128 + col];
                    assert_eq!(v, if r < 64 && col < 64 { 0.0 } else { 1.0 });
                }
            }
        }
        let ones = MaskSpec { hole: 0, ..m };
        assert_eq!(apply_mask(&x, &ones).unwrap(), x);
    }

    #[test]
    fn mask_placements_cover_the_patch() {
        let mut rng = stream_rng(1, 1);
        let (mut min_r, mut max_r) = (usize::MAX, 0);
        for _ in 0..2000 {
            let m = MaskSpec::sample(128, 64, &mut rng).unwrap();
            min_r = min_r.min(m.row);
            max_r = max_r.max(m.row);
        }
        assert_eq!((min_r, max_r), (0, 64));
    }

    #[test]
    fn inpainting_examples() {
        let m = MaskSpec::new(8, 4, 2, 3).unwrap();
        let mask: Vec<f64> = m.values().iter().flat_map(|&v| [v, v]).collect();
        let x = vec![0.2; mask.len()];
        assert_eq!(inpainting_loss(&x, &x, &mask, W_REC, None).unwrap().value, 0.0);
        let fx: Vec<f64> = mask.iter().map(|&mv| if mv == 0.0 { 1.2 } else { 0.2 }).collect();
        assert!(close(inpainting_loss(&x, &fx, &mask, W_REC, None).unwrap().value, 0.99, 1e-12));
    }

    #[test]
    fn degenerate_masks_are_rejected() {
        let x = vec![0.0; 4];
        for mask in [vec![1.0; 4], vec![0.0; 4]] {
            assert!(matches!(
                inpainting_loss(&x, &x, &mask, W_REC, None),
                Err(Error::DegenerateMask(_))
            ));
        }
    }

    #[test]
    fn inpainting_terms_have_disjoint_support() {
        let m = MaskSpec::new(8, 4, 1, 1).unwrap();
        let mask = m.values();
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let fx: Vec<f64> = (0..64).map(|i| (i as f64 * 0.11).cos()).collect();
        let (rec, con) = inpainting_terms(&x, &fx, &mask, None).unwrap();
        for i in 0..64 {
            if mask[i] == 1.0 {
                assert_eq!(rec.grad[i], 0.0);
            } else {
                assert_eq!(con.grad[i], 0.0);
            }
        }
        let mut inside = fx.clone();
        let mut outside = fx.clone();
        for i in 0..64 {
            if mask[i] == 0.0 {
                inside[i] += 0.5;
            } else {
                outside[i] -= 0.5;
            }
        }
        let (rec_in, con_in) = inpainting_terms(&x, &inside, &mask, None).unwrap();
        assert_eq!(con_in.value, con.value);
        assert_ne!(rec_in.value, rec.value);
        let (rec_out, con_out) = inpainting_terms(&x, &outside, &mask, None).unwrap();
        assert_eq!(rec_out.value, rec.value);
        assert_ne!(con_out.value, con.value);
    }

    #[test]
    fn bce_examples() {
        assert!(bce_loss(&[1.0], &[1.0], None).unwrap().value < 2.0 * BCE_EPS);
        assert!(close(bce_loss(&[1.0], &[0.5], None).unwrap().value, LN2, 1e-12));
        assert!(close(bce_loss(&[0.0], &[0.5], None).unwrap().value, LN2, 1e-12));
        assert!(bce_loss(&[0.0], &[1.0], None).unwrap().value.is_finite());
    }

    #[test]
    fn dice_examples() {
        assert_eq!(dice_loss(&[0.0; 100], &[0.0; 100], None).unwrap().value, 0.0);
        assert_eq!(dice_loss(&[1.0; 100], &[1.0; 100], None).unwrap().value, 0.0);
        let y: Vec<f64> = (0..100).map(|i| (i % 2) as f64).collect();
        let p: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
        assert!(close(dice_loss(&y, &p, None).unwrap().value, 1.0 - 1.0 / 101.0, 1e-12));
        assert!(close(1.0 - 1.0 / 101.0, 0.9901, 5e-5));
    }

    #[test]
    fn downstream_example() {
        let l = downstream_loss(&[1.0; 100], &[0.5; 100], None).unwrap().value;
        assert!(close(l, LN2 + 1.0 - 101.0 / 151.0, 1e-12));
        // the printed 1.0242 sums the two rounded terms
        assert!(close(l, 1.0242, 1e-4));
        let y: Vec<f64> = (0..50).map(|i| (i % 3 == 0) as u8 as f64).collect();
        assert!(downstream_loss(&y, &y, None).unwrap().value < 2e-6);
    }

    type LossFn = fn(&[f64], &[f64], Option<&[bool]>) -> Result<LossGrad>;

    fn fd_check(f: impl Fn(&[f64]) -> LossGrad, p: &[f64]) {
        let g = f(p).grad;
        let h = 1e-4;
        for i in 0..p.len() {
            let mut a = p.to_vec();
            a[i] += h;
            let mut b = p.to_vec();
            b[i] -= h;
            let num = (f(&a).value - f(&b).value) / (2.0 * h);
            let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-8);
            assert!(rel < 1e-4 || (num - g[i]).abs() < 1e-10, "elem {i}: {num} vs {}", g[i]);
        }
    }

    fn draw(seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = stream_rng(seed, 3);
        let y: Vec<f64> = (0..64).map(|_| Rng::random_range(&mut rng, 0..2) as f64).collect();
        let p: Vec<f64> = (0..64).map(|_| Rng::random_range(&mut rng, 0.05..0.95)).collect();
        let x: Vec<f64> = (0..64).map(|_| Rng::random_range(&mut rng, -1.0..1.0)).collect();
        (y, p, x)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mask = MaskSpec::new(8, 4, 2, 2).unwrap().values();
        for seed in 0..20 {
            let (y, p, x) = draw(seed);
            for f in [bce_loss as LossFn, dice_loss, downstream_loss] {
                fd_check(|q| f(&y, q, None).unwrap(), &p);
            }
            // identity at points away from zero error
            fd_check(|q| identity_loss(&x, q, None).unwrap(), &p);
            fd_check(|q| inpainting_loss(&x, q, &mask, W_REC, None).unwrap(), &p);
        }
    }

    proptest! {
        #[test]
        fn dice_is_symmetric_and_bounded(v in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..64)) {
            let (a, b): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let d = dice_loss(&a, &b, None).unwrap().value;
            prop_assert!((d - dice_loss(&b, &a, None).unwrap().value).abs() < 1e-12);
            prop_assert!((0.0..1.0).contains(&d) || d.abs() < 1e-12);
        }

        #[test]
        fn losses_are_nonnegative(v in proptest::collection::vec((0u8..2, 0.0f64..=1.0), 1..64)) {
            let y: Vec<f64> = v.iter().map(|t| t.0 as f64).collect();
            let p: Vec<f64> = v.iter().map(|t| t.1).collect();
            prop_assert!(bce_loss(&y, &p, None).unwrap().value >= 0.0);
            prop_assert!(downstream_loss(&y, &p, None).unwrap().value >= 0.0);
        }
    }
}
