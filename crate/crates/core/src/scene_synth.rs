//! Synthetic bistatic InSAR scenes with known forest/non-forest truth.
//!
//! The forward model multiplies independent coherence factors, uses a sinc-shaped
//! volume decorrelation for forest canopies, and draws gamma-distributed speckle on
//! the backscatter channel only. Coherence channels are noise free. Shadow pixels
//! are placed on forest edges facing away from the sensor.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng::{shuffle, stream_rng};

const MAX_THRESHOLD_ITERS: usize = 100;
const FRACTION_TOLERANCE: f64 = 0.05;
const TERRAIN_AMPLITUDE_DEG: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrbitDir {
    Ascending,
    Descending,
}

impl OrbitDir {
    /// Column direction the sensor looks toward (+1 east, -1 west).
    pub fn look_step(self) -> isize {
        match self {
            OrbitDir::Ascending => 1,
            OrbitDir::Descending => -1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OrbitDir::Ascending => "ascending",
            OrbitDir::Descending => "descending",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneGeometry {
    pub lambda_m: f64,
    pub slant_range_m: f64,
    pub eta_deg: f64,
    pub b_perp_m: f64,
    pub orbit_dir: OrbitDir,
    pub year: i32,
}

impl SceneGeometry {
    /// X-band bistatic geometry with the given perpendicular baseline.
    pub fn x_band(b_perp_m: f64, orbit_dir: OrbitDir, year: i32) -> Self {
        Self {
            lambda_m: 0.0311,
            slant_range_m: 614_000.0,
            eta_deg: 40.0,
            b_perp_m,
            orbit_dir,
            year,
        }
    }

    /// Geometry whose height of ambiguity equals `h_amb_m`.
    pub fn with_hamb(h_amb_m: f64, eta_deg: f64, orbit_dir: OrbitDir, year: i32) -> Self {
        let lambda_m = 0.0311;
        let slant_range_m = 614_000.0;
        let b_perp_m = lambda_m * slant_range_m * eta_deg.to_radians().sin() / h_amb_m;
        Self {
            lambda_m,
            slant_range_m,
            eta_deg,
            b_perp_m,
            orbit_dir,
            year,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_m > 0.0) {
            return Err(Error::Domain(format!("wavelength must be > 0, got {}", self.lambda_m)));
        }
        if !(self.slant_range_m > 0.0) {
            return Err(Error::Domain(format!(
                "slant range must be > 0, got {}",
                self.slant_range_m
            )));
        }
        if !(self.eta_deg > 0.0 && self.eta_deg <= 90.0) {
            return Err(Error::Domain(format!(
                "incidence angle must lie in (0, 90], got {}",
                self.eta_deg
            )));
        }
        if !(self.b_perp_m > 0.0) {
            return Err(Error::Domain(format!(
                "perpendicular baseline must be > 0, got {}",
                self.b_perp_m
            )));
        }
        Ok(())
    }
}

/// Height of ambiguity of a bistatic acquisition: `lambda * r * sin(eta) / B_perp`.
pub fn compute_hamb(geom: &SceneGeometry) -> Result<f64> {
    geom.validate()?;
    let h = geom.lambda_m * geom.slant_range_m * geom.eta_deg.to_radians().sin() / geom.b_perp_m;
    if !h.is_finite() || h <= 0.0 {
        return Err(Error::Domain(format!("height of ambiguity not finite and positive: {h}")));
    }
    Ok(h)
}

/// Elementwise product of independent decorrelation factors.
///
/// Temporal decorrelation is not a factor here: single-pass acquisitions have
/// `gamma_temp = 1`.
pub fn compose_coherence(factors: &[&Raster<f32>]) -> Result<Raster<f32>> {
    let first = factors
        .first()
        .ok_or_else(|| Error::Validation("at least one coherence factor required".into()))?;
    let mut out = Raster::filled(first.rows(), first.cols(), 1.0f32);
    for (k, f) in factors.iter().enumerate() {
        out.check_same_shape(f)?;
        if let Some(bad) = f.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!(
                "coherence factor {k} has value {bad} outside [0, 1]"
            )));
        }
        for (o, &v) in out.data_mut().iter_mut().zip(f.data()) {
            *o *= v;
        }
    }
    Ok(out)
}

/// `|sinc(h_v / h_amb)|`, with `sinc(x) = sin(pi x) / (pi x)`.
pub fn volume_decorrelation(canopy_height_m: &Raster<f32>, h_amb: &Raster<f32>) -> Result<Raster<f32>> {
    canopy_height_m.check_same_shape(h_amb)?;
    if let Some(bad) = h_amb.data().iter().find(|&&h| !(h > 0.0)) {
        return Err(Error::Domain(format!("height of ambiguity must be > 0, got {bad}")));
    }
    if let Some(bad) = canopy_height_m.data().iter().find(|&&h| !(h >= 0.0)) {
        return Err(Error::Domain(format!("canopy height must be >= 0, got {bad}")));
    }
    canopy_height_m.zip_map(h_amb, |hv, ha| volume_decorrelation_scalar(hv as f64, ha as f64) as f32)
}

pub fn volume_decorrelation_scalar(h_v: f64, h_amb: f64) -> f64 {
    let x = h_v / h_amb;
    if x == 0.0 {
        return 1.0;
    }
    let px = std::f64::consts::PI * x;
    (px.sin() / px).abs().clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub size_px: usize,
    pub forest_fraction_target: f64,
    pub smoothing_scale_px: f64,
    pub n_roads: usize,
    pub road_width_px: usize,
    pub n_clearcuts: usize,
    pub clearcut_diameter_px: usize,
    pub speckle_looks: f64,
    pub beta0_forest_mean: f64,
    pub beta0_ground_mean: f64,
    pub canopy_height_m: f64,
    pub snr_coh: f64,
    pub quant_coh: f64,
    pub amb_coh: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            size_px: 128,
            forest_fraction_target: 0.5,
            smoothing_scale_px: 6.0,
            n_roads: 1,
            road_width_px: 2,
            n_clearcuts: 3,
            // 30 m at 6 m pixel spacing
            clearcut_diameter_px: 5,
            speckle_looks: 4.0,
            beta0_forest_mean: 0.20,
            beta0_ground_mean: 0.08,
            canopy_height_m: 25.0,
            snr_coh: 0.95,
            quant_coh: 0.98,
            amb_coh: 0.99,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.size_px == 0 {
            return Err(Error::Config("size_px must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.forest_fraction_target) {
            return Err(Error::Config(format!(
                "forest_fraction_target must lie in [0, 1], got {}",
                self.forest_fraction_target
            )));
        }
        if self.clearcut_diameter_px < 3 {
            return Err(Error::Config(format!(
                "clearcut_diameter_px must be >= 3, got {}",
                self.clearcut_diameter_px
            )));
        }
        if !(self.speckle_looks >= 1.0) {
            return Err(Error::Config(format!(
                "speckle_looks must be >= 1, got {}",
                self.speckle_looks
            )));
        }
        if !(self.smoothing_scale_px > 0.0) {
            return Err(Error::Config("smoothing_scale_px must be > 0".into()));
        }
        if !(self.beta0_forest_mean >= 0.0 && self.beta0_ground_mean >= 0.0) {
            return Err(Error::Config("backscatter means must be >= 0".into()));
        }
        if !(self.canopy_height_m > 0.0) {
            return Err(Error::Config("canopy_height_m must be > 0".into()));
        }
        for (name, v) in [
            ("snr_coh", self.snr_coh),
            ("quant_coh", self.quant_coh),
            ("amb_coh", self.amb_coh),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InSARScene {
    pub beta0: Raster<f32>,
    pub gamma_tot: Raster<f32>,
    pub gamma_vol: Raster<f32>,
    pub theta_i: Raster<f32>,
    pub h_amb: Raster<f32>,
    pub valid: Raster<u8>,
    pub label: Raster<u8>,
    pub geometry: SceneGeometry,
    pub scene_id: String,
    pub seed: u64,
}

impl InSARScene {
    pub fn shape(&self) -> (usize, usize) {
        self.label.shape()
    }

    /// Feature bands in model input order.
    pub fn feature_bands(&self) -> [&Raster<f32>; 5] {
        [&self.beta0, &self.gamma_tot, &self.gamma_vol, &self.theta_i, &self.h_amb]
    }

    pub fn forest_fraction(&self) -> f64 {
        self.label.fraction_ones()
    }

    /// Scene-level height of ambiguity (constant raster).
    pub fn h_amb_m(&self) -> f64 {
        self.h_amb.data().first().copied().unwrap_or(f32::NAN) as f64
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_smooth(field: &Raster<f64>, sigma: f64) -> Raster<f64> {
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let (rows, cols) = field.shape();
    let horiz = Raster::from_fn(rows, cols, |r, c| {
        k.iter()
            .enumerate()
            .map(|(j, w)| w * field.get(r, reflect(c as isize + j as isize - radius, cols)))
            .sum::<f64>()
    });
    Raster::from_fn(rows, cols, |r, c| {
        k.iter()
            .enumerate()
            .map(|(j, w)| w * horiz.get(reflect(r as isize + j as isize - radius, rows), c))
            .sum()
    })
}

fn smooth_field(size: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Raster<f64> {
    let noise = Raster::from_fn(size, size, |_, _| rng.sample::<f64, _>(StandardNormal));
    gaussian_smooth(&noise, sigma)
}

fn rescale_unit(field: &Raster<f64>) -> Raster<f64> {
    let (lo, hi) = field
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    field.map(|v| (v - lo) / span)
}

fn point_segment_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    (p.0 - qx).powi(2) + (p.1 - qy).powi(2)
}

fn edge_point(size: f64, side: u32, t: f64) -> (f64, f64) {
    match side {
        0 => (0.0, t * size),
        1 => (size - 1.0, t * size),
        2 => (t * size, 0.0),
        _ => (t * size, size - 1.0),
    }
}

/// Pixels removed from the forest class by roads and clearcuts.
fn carve_mask(params: &SynthParams) -> Raster<bool> {
    let n = params.size_px;
    let size = n as f64;
    let mut carved = Raster::filled(n, n, false);

    let mut road_rng = stream_rng(params.seed, 1);
    let half_width = params.road_width_px as f64 / 2.0;
    for _ in 0..params.n_roads {
        let s0 = road_rng.random_range(0..4u32);
        let s1 = (s0 + road_rng.random_range(1..4u32)) % 4;
        let a = edge_point(size, s0, road_rng.random::<f64>());
        let b = edge_point(size, s1, road_rng.random::<f64>());
        let mid = (
            (a.0 + b.0) / 2.0 + (road_rng.random::<f64>() - 0.5) * size * 0.3,
            (a.1 + b.1) / 2.0 + (road_rng.random::<f64>() - 0.5) * size * 0.3,
        );
        for r in 0..n {
            for c in 0..n {
                let p = (r as f64, c as f64);
                let d2 = point_segment_dist2(p, a, mid).min(point_segment_dist2(p, mid, b));
                if d2 <= half_width * half_width {
                    carved.set(r, c, true);
                }
            }
        }
    }

    let mut cut_rng = stream_rng(params.seed, 2);
    let radius = params.clearcut_diameter_px as f64 / 2.0;
    for _ in 0..params.n_clearcuts {
        let cr = cut_rng.random::<f64>() * (size - 1.0);
        let cc = cut_rng.random::<f64>() * (size - 1.0);
        let r0 = (cr - radius).floor().max(0.0) as usize;
        let r1 = ((cr + radius).ceil() as usize).min(n - 1);
        let c0 = (cc - radius).floor().max(0.0) as usize;
        let c1 = ((cc + radius).ceil() as usize).min(n - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                if (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2) <= radius * radius {
                    carved.set(r, c, true);
                }
            }
        }
    }
    carved
}

/// Binary forest truth: thresholded smooth random field with roads and clearcuts
/// carved out. The threshold is searched so the final forest fraction hits the
/// target within 0.05.
///
/// Each generator stage draws from its own RNG stream, so adding roads does not
/// reshuffle the base field.
pub fn generate_truth(params: &SynthParams) -> Result<Raster<u8>> {
    params.validate()?;
    let n = params.size_px;
    let mut field_rng = stream_rng(params.seed, 0);
    let field = smooth_field(n, params.smoothing_scale_px, &mut field_rng);
    let carved = carve_mask(params);

    let fraction_at = |t: f64| -> f64 {
        let count = field
            .data()
            .iter()
            .zip(carved.data())
            .filter(|(&v, &cut)| v > t && !cut)
            .count();
        count as f64 / (n * n) as f64
    };

    let (mut lo, mut hi) = field
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    lo -= 1.0;
    let target = params.forest_fraction_target;
    let mut threshold = hi;
    let mut best = fraction_at(hi);
    for _ in 0..MAX_THRESHOLD_ITERS {
        let mid = 0.5 * (lo + hi);
        let frac = fraction_at(mid);
        if (frac - target).abs() < (best - target).abs() {
            best = frac;
            threshold = mid;
        }
        if frac > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if (best - target).abs() > FRACTION_TOLERANCE {
        return Err(Error::Config(format!(
            "forest fraction {target} unattainable: best {best:.4} after {MAX_THRESHOLD_ITERS} iterations"
        )));
    }

    let mut data = Vec::with_capacity(n * n);
    for (&v, &cut) in field.data().iter().zip(carved.data()) {
        data.push(u8::from(v > threshold && !cut));
    }
    Raster::from_vec(n, n, data)
}

/// Invalid (shadow) band behind forest edges, on the side facing away from the sensor.
fn shadow_mask(label: &Raster<u8>, orbit: OrbitDir, rng: &mut ChaCha8Rng) -> Raster<u8> {
    let (rows, cols) = label.shape();
    let step = orbit.look_step();
    let mut valid = Raster::filled(rows, cols, 1u8);
    for r in 0..rows {
        for c in 0..cols {
            if label.get(r, c) != 1 {
                continue;
            }
            let next = c as isize + step;
            if next < 0 || next >= cols as isize || label.get(r, next as usize) != 0 {
                continue;
            }
            let width = rng.random_range(1..=2i64) as isize;
            for k in 1..=width {
                let cc = c as isize + k * step;
                if cc < 0 || cc >= cols as isize || label.get(r, cc as usize) != 0 {
                    break;
                }
                valid.set(r, cc as usize, 0);
            }
        }
    }
    valid
}

pub fn scene_id_for(seed: u64) -> String {
    format!("scene_{seed:06}")
}

pub fn simulate_scene(params: &SynthParams, geom: &SceneGeometry) -> Result<InSARScene> {
    params.validate()?;
    let h_amb_m = compute_hamb(geom)?;
    let n = params.size_px;
    let label = generate_truth(params)?;

    let mut canopy_rng = stream_rng(params.seed, 3);
    let canopy_var = rescale_unit(&smooth_field(n, params.smoothing_scale_px, &mut canopy_rng));
    let canopy = Raster::from_fn(n, n, |r, c| {
        if label.get(r, c) == 1 {
            (params.canopy_height_m * (0.7 + 0.6 * canopy_var.get(r, c))) as f32
        } else {
            0.0
        }
    });

    let h_amb = Raster::filled(n, n, h_amb_m as f32);
    let gamma_vol = volume_decorrelation(&canopy, &h_amb)?;
    let snr = Raster::filled(n, n, params.snr_coh as f32);
    let quant = Raster::filled(n, n, params.quant_coh as f32);
    let amb = Raster::filled(n, n, params.amb_coh as f32);
    let gamma_tot = compose_coherence(&[&snr, &quant, &amb, &gamma_vol])?;

    let mut speckle_rng = stream_rng(params.seed, 4);
    let speckle = Gamma::new(params.speckle_looks, 1.0 / params.speckle_looks)
        .map_err(|e| Error::Config(format!("speckle distribution: {e}")))?;
    let beta0 = Raster::from_fn(n, n, |r, c| {
        let mean = if label.get(r, c) == 1 {
            params.beta0_forest_mean
        } else {
            params.beta0_ground_mean
        };
        (mean * speckle.sample(&mut speckle_rng)) as f32
    });

    let mut terrain_rng = stream_rng(params.seed, 5);
    let terrain = rescale_unit(&smooth_field(n, params.smoothing_scale_px * 3.0, &mut terrain_rng));
    let theta_i = terrain.map(|t| (geom.eta_deg + TERRAIN_AMPLITUDE_DEG * (2.0 * t - 1.0)) as f32);

    let mut shadow_rng = stream_rng(params.seed, 6);
    let valid = shadow_mask(&label, geom.orbit_dir, &mut shadow_rng);

    Ok(InSARScene {
        beta0,
        gamma_tot,
        gamma_vol,
        theta_i,
        h_amb,
        valid,
        label,
        geometry: *geom,
        scene_id: scene_id_for(params.seed),
        seed: params.seed,
    })
}

/// Geometry sampling for a batch of scenes: stratified over `[hamb_min, hamb_max]`
/// so the whole range is covered, with the orbit direction alternating.
pub fn sample_geometries(n: usize, hamb_min: f64, hamb_max: f64, seed: u64) -> Vec<SceneGeometry> {
    let mut rng = stream_rng(seed, 7);
    let mut h: Vec<f64> = (0..n)
        .map(|i| hamb_min + (hamb_max - hamb_min) * (i as f64 + rng.random::<f64>()) / n as f64)
        .collect();
    // orbit direction must not correlate with h_amb
    shuffle(&mut h, &mut rng);
    h.into_iter()
        .enumerate()
        .map(|(i, hamb)| {
            let (orbit, year) = if i % 4 == 3 {
                (OrbitDir::Descending, 2013)
            } else {
                (OrbitDir::Ascending, 2011 + (i % 2) as i32)
            };
            let eta = 30.0 + 15.0 * rng.random::<f64>();
            SceneGeometry::with_hamb(hamb, eta, orbit, year)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count_components(label: &Raster<u8>, class: u8) -> usize {
        let (rows, cols) = label.shape();
        let mut seen = vec![false; rows * cols];
        let mut count = 0;
        for start in 0..rows * cols {
            if seen[start] || label.data()[start] != class {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (r, c) = (i / cols, i % cols);
                let mut push = |rr: usize, cc: usize| {
                    let j = rr * cols + cc;
                    if !seen[j] && label.data()[j] == class {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if r > 0 {
                    push(r - 1, c);
                }
                if r + 1 < rows {
                    push(r + 1, c);
                }
                if c > 0 {
                    push(r, c - 1);
                }
                if c + 1 < cols {
                    push(r, c + 1);
                }
            }
        }
        count
    }

    #[test]
    fn hamb_reference_value() {
        let g = SceneGeometry::x_band(250.0, OrbitDir::Ascending, 2011);
        let h = compute_hamb(&g).unwrap();
        // 0.0311 * 614000 * sin(40 deg) / 250
        assert!((h - 49.097146).abs() < 1e-5, "{h}");
        assert!((h - 49.10).abs() < 0.01);
    }

    #[test]
    fn hamb_halves_when_baseline_doubles() {
        let g = SceneGeometry::x_band(150.0, OrbitDir::Ascending, 2011);
        let g2 = SceneGeometry { b_perp_m: 300.0, ..g };
        let (a, b) = (compute_hamb(&g).unwrap(), compute_hamb(&g2).unwrap());
        assert!((a / 2.0 - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn hamb_engineered_unit() {
        let g = SceneGeometry {
            lambda_m: 0.0311,
            slant_range_m: 600_000.0,
            eta_deg: 90.0,
            b_perp_m: 0.0311 * 600_000.0,
            orbit_dir: OrbitDir::Descending,
            year: 2012,
        };
        assert!((compute_hamb(&g).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hamb_rejects_bad_baseline() {
        let g = SceneGeometry::x_band(0.0, OrbitDir::Ascending, 2011);
        assert!(matches!(compute_hamb(&g), Err(Error::Domain(_))));
        let g = SceneGeometry::x_band(-5.0, OrbitDir::Ascending, 2011);
        assert!(matches!(compute_hamb(&g), Err(Error::Domain(_))));
    }

    #[test]
    fn coherence_products() {
        let ones = Raster::filled(2, 2, 1.0f32);
        let snr = Raster::filled(2, 2, 0.9f32);
        let vol = Raster::filled(2, 2, 0.8f32);
        let zero = Raster::filled(2, 2, 0.0f32);
        assert!(compose_coherence(&[&ones, &ones]).unwrap().data().iter().all(|&v| v == 1.0));
        let p = compose_coherence(&[&snr, &vol, &ones]).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.72).abs() < 1e-6));
        assert!(compose_coherence(&[&snr, &zero]).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coherence_rejects_out_of_range() {
        let bad = Raster::filled(1, 1, 1.2f32);
        assert!(matches!(compose_coherence(&[&bad]), Err(Error::Validation(_))));
        let neg = Raster::filled(1, 1, -0.1f32);
        assert!(compose_coherence(&[&neg]).is_err());
    }

    #[test]
    fn volume_decorrelation_values() {
        assert_eq!(volume_decorrelation_scalar(0.0, 40.0), 1.0);
        assert!(volume_decorrelation_scalar(35.0, 35.0) < 1e-12);
        let v = volume_decorrelation_scalar(30.0, 60.0);
        assert!((v - 2.0 / std::f64::consts::PI).abs() < 1e-12);
        assert!((v - 0.6366).abs() < 1e-4);
        let bad = Raster::filled(1, 1, 0.0f32);
        let h = Raster::filled(1, 1, 10.0f32);
        assert!(matches!(volume_decorrelation(&h, &bad), Err(Error::Domain(_))));
    }

    #[test]
    fn volume_decorrelation_monotone_on_unit_interval() {
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let v = volume_decorrelation_scalar(i as f64 / 1000.0 * 50.0, 50.0);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn truth_hits_target_fraction() {
        for seed in 0..5 {
            let p = SynthParams {
                forest_fraction_target: 0.6,
                seed,
                ..Default::default()
            };
            let f = generate_truth(&p).unwrap().fraction_ones();
            assert!((0.55..=0.65).contains(&f), "seed {seed}: {f}");
        }
    }

    #[test]
    fn truth_is_deterministic() {
        let p = SynthParams {
            seed: 42,
            ..Default::default()
        };
        assert_eq!(generate_truth(&p).unwrap(), generate_truth(&p).unwrap());
    }

    #[test]
    fn roads_do_not_merge_forest_components() {
        for seed in [3u64, 11, 29] {
            let base = SynthParams {
                n_roads: 0,
                n_clearcuts: 0,
                seed,
                ..Default::default()
            };
            let roads = SynthParams { n_roads: 3, ..base.clone() };
            let a = count_components(&generate_truth(&base).unwrap(), 1);
            let b = count_components(&generate_truth(&roads).unwrap(), 1);
            assert!(a <= b, "seed {seed}: {a} > {b}");
        }
    }

    #[test]
    fn unattainable_fraction_is_config_error() {
        // Roads covering the whole raster leave no room for forest.
        let p = SynthParams {
            size_px: 32,
            n_roads: 4,
            road_width_px: 64,
            forest_fraction_target: 0.7,
            ..Default::default()
        };
        assert!(matches!(generate_truth(&p), Err(Error::Config(_))));
    }

    #[test]
    fn clearcut_diameter_must_be_at_least_three() {
        let p = SynthParams {
            clearcut_diameter_px: 2,
            ..Default::default()
        };
        assert!(matches!(p.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn scene_coherence_factorization_is_exact() {
        let p = SynthParams {
            seed: 7,
            ..Default::default()
        };
        let g = SceneGeometry::with_hamb(60.0, 38.0, OrbitDir::Ascending, 2012);
        let s = simulate_scene(&p, &g).unwrap();
        let system = ((1.0f32 * p.snr_coh as f32) * p.quant_coh as f32) * p.amb_coh as f32;
        for i in 0..s.label.len() {
            let vol = s.gamma_vol.data()[i];
            assert_eq!(s.gamma_tot.data()[i], system * vol);
            assert!(s.gamma_tot.data()[i] <= vol);
            if s.label.data()[i] == 0 {
                assert_eq!(vol, 1.0);
            } else {
                assert!(vol < 1.0);
            }
        }
    }

    #[test]
    fn scene_pixel_examples() {
        let system: f64 = 0.95 * 0.98 * 0.99;
        assert!((system - 0.9216).abs() < 1e-4);
        let forest = system * volume_decorrelation_scalar(30.0, 60.0);
        assert!((forest - 0.5867).abs() < 1e-4);
    }

    #[test]
    fn scene_hamb_constant_and_theta_bounded() {
        let p = SynthParams {
            seed: 9,
            ..Default::default()
        };
        let g = SceneGeometry::with_hamb(45.0, 35.0, OrbitDir::Descending, 2013);
        let s = simulate_scene(&p, &g).unwrap();
        assert!(s.h_amb.data().iter().all(|&h| (h - 45.0).abs() < 1e-3));
        assert!(s.theta_i.data().iter().all(|&t| (32.0..=38.0).contains(&t)));
        assert!(s.beta0.data().iter().all(|&b| b >= 0.0));
    }

    #[test]
    fn zero_forest_scene_fully_valid() {
        let p = SynthParams {
            forest_fraction_target: 0.0,
            n_roads: 0,
            n_clearcuts: 0,
            seed: 1,
            ..Default::default()
        };
        let g = SceneGeometry::with_hamb(30.0, 40.0, OrbitDir::Ascending, 2011);
        let s = simulate_scene(&p, &g).unwrap();
        assert_eq!(s.forest_fraction(), 0.0);
        assert!(s.valid.data().iter().all(|&v| v == 1));
    }

    #[test]
    fn shadow_falls_behind_forest_edges() {
        let p = SynthParams {
            seed: 5,
            ..Default::default()
        };
        for orbit in [OrbitDir::Ascending, OrbitDir::Descending] {
            let g = SceneGeometry::with_hamb(50.0, 40.0, orbit, 2012);
            let s = simulate_scene(&p, &g).unwrap();
            let step = orbit.look_step();
            let (rows, cols) = s.shape();
            let mut n_invalid = 0;
            for r in 0..rows {
                for c in 0..cols {
                    if s.valid.get(r, c) == 1 {
                        continue;
                    }
                    n_invalid += 1;
                    assert_eq!(s.label.get(r, c), 0);
                    // forest within two pixels toward the sensor
                    let hit = (1..=2).any(|k| {
                        let cc = c as isize - k * step;
                        cc >= 0 && (cc as usize) < cols && s.label.get(r, cc as usize) == 1
                    });
                    assert!(hit, "shadow pixel ({r},{c}) without forest upslope");
                }
            }
            assert!(n_invalid > 0);
        }
    }

    #[test]
    fn scene_determinism() {
        let p = SynthParams {
            seed: 77,
            ..Default::default()
        };
        let g = SceneGeometry::with_hamb(80.0, 42.0, OrbitDir::Ascending, 2011);
        assert_eq!(simulate_scene(&p, &g).unwrap(), simulate_scene(&p, &g).unwrap());
    }

    #[test]
    fn geometry_sampler_covers_range() {
        let g = sample_geometries(6, 20.0, 120.0, 3);
        let h: Vec<f64> = g.iter().map(|g| compute_hamb(g).unwrap()).collect();
        let min = h.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(min < 40.0 && max > 60.0);
        assert!(g.iter().any(|g| g.orbit_dir == OrbitDir::Descending));
        assert!(g.iter().any(|g| g.orbit_dir == OrbitDir::Ascending));
    }
}
