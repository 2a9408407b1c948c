//! Scene manifests, stratified selection, patch extraction and normalization,
//! and reference-map preparation.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng::{shuffle, stream_rng};
use crate::scene_io;
use crate::scene_synth::{InSARScene, OrbitDir};

pub const N_FEATURES: usize = 5;
pub const PATCH_SIZE: usize = 128;
pub const MAX_INVALID_FRACTION: f64 = 0.10;
pub const LABEL_NODATA: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scene_id: String,
    pub path: PathBuf,
    pub h_amb_m: f64,
    pub orbit_dir: OrbitDir,
    pub year: i32,
    pub forest_fraction: f64,
    pub n_pixels: usize,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub channel_stats: Option<ChannelStats>,
}

/// Fractions of scenes assigned to each split; assignment is a seeded shuffle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitPolicy {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub unlabeled: f64,
    pub seed: u64,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        Self {
            train: 0.5,
            val: 0.15,
            test: 0.25,
            unlabeled: 0.10,
            seed: 0,
        }
    }
}

impl SplitPolicy {
    /// Scene counts per split via largest remainder, so they always sum to `n`.
    pub fn counts(&self, n: usize) -> Result<[usize; 4]> {
        let fr = [self.train, self.val, self.test, self.unlabeled];
        if fr.iter().any(|f| !(*f >= 0.0)) {
            return Err(Error::Config(format!("split fractions must be >= 0: {fr:?}")));
        }
        let total: f64 = fr.iter().sum();
        if total <= 0.0 {
            return Err(Error::Config("split fractions sum to zero".into()));
        }
        let exact: Vec<f64> = fr.iter().map(|f| f / total * n as f64).collect();
        let mut counts = [0usize; 4];
        for (c, e) in counts.iter_mut().zip(&exact) {
            *c = e.floor() as usize;
        }
        let mut rest = n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| {
            let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        for &k in order.iter().cycle() {
            if rest == 0 {
                break;
            }
            counts[k] += 1;
            rest -= 1;
        }
        Ok(counts)
    }
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn with_entries(&self, entries: Vec<ManifestEntry>) -> Manifest {
        Manifest {
            entries,
            channel_stats: self.channel_stats,
        }
    }

    /// Unique ids, and no test scene in any other role.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.scene_id.as_str()) {
                return Err(Error::DuplicateScene(e.scene_id.clone()));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }
}

pub fn build_manifest(scene_paths: &[PathBuf], policy: &SplitPolicy) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(scene_paths.len());
    let mut seen = HashSet::new();
    for path in scene_paths {
        let sc = scene_io::read_sidecar(path)?;
        if !seen.insert(sc.scene_id.clone()) {
            return Err(Error::DuplicateScene(sc.scene_id));
        }
        entries.push(ManifestEntry {
            scene_id: sc.scene_id,
            path: path.clone(),
            h_amb_m: sc.h_amb_m,
            orbit_dir: sc.orbit_dir,
            year: sc.year,
            forest_fraction: sc.forest_fraction,
            n_pixels: sc.rows * sc.cols,
            split: Split::Train,
        });
    }
    let counts = policy.counts(entries.len())?;
    let mut order: Vec<usize> = (0..entries.len()).collect();
    shuffle(&mut order, &mut stream_rng(policy.seed, 11));
    let splits = [Split::Train, Split::Val, Split::Test, Split::Unlabeled];
    let mut cursor = 0;
    for (split, count) in splits.iter().zip(counts) {
        for &i in &order[cursor..cursor + count] {
            entries[i].split = *split;
        }
        cursor += count;
    }
    Ok(Manifest {
        entries,
        channel_stats: None,
    })
}

/// Both classes cover at least `min_frac` of the scene (inclusive).
pub fn balance_filter(entry: &ManifestEntry, min_frac: f64) -> bool {
    entry.forest_fraction >= min_frac && entry.forest_fraction <= 1.0 - min_frac
}

/// Half-open height-of-ambiguity bin index: `[k * width, (k + 1) * width)`.
pub fn hamb_bin(h_amb_m: f64, bin_width_m: f64) -> i64 {
    (h_amb_m / bin_width_m).floor() as i64
}

/// Caps the training pool (train and unlabeled scenes) and the validation split per
/// h_amb bin. Test scenes pass through. Retained entries keep manifest order.
pub fn stratified_select(
    manifest: &Manifest,
    bin_width_m: f64,
    train_cap: usize,
    val_cap: usize,
    seed: u64,
) -> Manifest {
    let mut groups: BTreeMap<(bool, i64), Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        let is_val = match e.split {
            Split::Train | Split::Unlabeled => false,
            Split::Val => true,
            Split::Test => continue,
        };
        groups
            .entry((is_val, hamb_bin(e.h_amb_m, bin_width_m)))
            .or_default()
            .push(i);
    }
    let mut keep = vec![false; manifest.len()];
    for (i, e) in manifest.entries.iter().enumerate() {
        keep[i] = e.split == Split::Test;
    }
    let mut rng = stream_rng(seed, 12);
    for ((is_val, _), mut idx) in groups {
        let cap = if is_val { val_cap } else { train_cap };
        if idx.len() > cap {
            shuffle(&mut idx, &mut rng);
            idx.truncate(cap);
        }
        for i in idx {
            keep[i] = true;
        }
    }
    manifest.with_entries(
        manifest
            .entries
            .iter()
            .zip(keep)
            .filter(|(_, k)| *k)
            .map(|(e, _)| e.clone())
            .collect(),
    )
}

/// Greedy farthest-point order on h_amb: extremes first, then the scene farthest
/// from everything chosen so far. Ties go to the lower index.
fn farthest_point_order(h: &[f64]) -> Vec<usize> {
    let n = h.len();
    if n == 0 {
        return Vec::new();
    }
    let argmin = (0..n).min_by(|&a, &b| h[a].partial_cmp(&h[b]).unwrap().then(a.cmp(&b))).unwrap();
    let argmax = (0..n)
        .max_by(|&a, &b| h[a].partial_cmp(&h[b]).unwrap().then(b.cmp(&a)))
        .unwrap();
    let mut order = vec![argmin];
    if argmax != argmin {
        order.push(argmax);
    }
    let mut chosen = vec![false; n];
    for &i in &order {
        chosen[i] = true;
    }
    let mut dist: Vec<f64> = (0..n)
        .map(|i| order.iter().map(|&j| (h[i] - h[j]).abs()).fold(f64::INFINITY, f64::min))
        .collect();
    while order.len() < n {
        let mut best = None;
        for i in 0..n {
            if chosen[i] {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) if dist[i] > dist[b] => best = Some(i),
                _ => {}
            }
        }
        let b = best.unwrap();
        chosen[b] = true;
        order.push(b);
        for i in 0..n {
            dist[i] = dist[i].min((h[i] - h[b]).abs());
        }
    }
    order
}

/// Subsets the train split to roughly `fraction` of its labeled area by whole
/// scenes, spreading the chosen scenes over the h_amb range. Other splits are kept.
pub fn label_fraction_subset(manifest: &Manifest, fraction: f64) -> Result<Manifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction must lie in (0, 1], got {fraction}")));
    }
    let train: Vec<usize> = manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    if train.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }
    if fraction == 1.0 {
        return Ok(manifest.clone());
    }
    let h: Vec<f64> = train.iter().map(|&i| manifest.entries[i].h_amb_m).collect();
    let total: f64 = train.iter().map(|&i| manifest.entries[i].n_pixels as f64).sum();
    let target = fraction * total;
    let mut selected = vec![false; manifest.len()];
    let mut area = 0.0;
    for (rank, k) in farthest_point_order(&h).into_iter().enumerate() {
        let a = manifest.entries[train[k]].n_pixels as f64;
        if rank > 0 && (area + a - target).abs() >= (area - target).abs() {
            break;
        }
        area += a;
        selected[train[k]] = true;
    }
    Ok(manifest.with_entries(
        manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(i, e)| e.split != Split::Train || selected[*i])
            .map(|(_, e)| e.clone())
            .collect(),
    ))
}

/// `size x size` block with five feature channels (channel-major), aligned
/// validity and optional label.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub features: Vec<f32>,
    pub label: Option<Vec<u8>>,
    pub valid: Vec<u8>,
    pub scene_id: String,
    pub offset: (usize, usize),
    pub h_amb_m: f64,
}

impl Patch {
    pub fn invalid_fraction(&self) -> f64 {
        self.valid.iter().filter(|&&v| v == 0).count() as f64 / self.valid.len() as f64
    }

    pub fn channel(&self, band: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.features[band * n..(band + 1) * n]
    }
}

/// Tiles a scene; patches with more than 10 % invalid pixels are dropped.
pub fn extract_patches(scene: &InSARScene, size: usize, stride: usize) -> Result<Vec<Patch>> {
    let (rows, cols) = scene.shape();
    if rows < size || cols < size {
        return Err(Error::Data(format!(
            "scene {} is {rows}x{cols}, smaller than patch size {size}",
            scene.scene_id
        )));
    }
    if stride == 0 {
        return Err(Error::Config("patch stride must be > 0".into()));
    }
    let bands = scene.feature_bands();
    let h_amb_m = scene.h_amb_m();
    let mut out = Vec::new();
    for r0 in (0..=rows - size).step_by(stride) {
        for c0 in (0..=cols - size).step_by(stride) {
            let valid = scene.valid.window(r0, c0, size, size).into_vec();
            let invalid = valid.iter().filter(|&&v| v == 0).count();
            if invalid as f64 > MAX_INVALID_FRACTION * (size * size) as f64 {
                continue;
            }
            let mut features = Vec::with_capacity(N_FEATURES * size * size);
            for band in bands {
                features.extend_from_slice(band.window(r0, c0, size, size).data());
            }
            out.push(Patch {
                size,
                features,
                label: Some(scene.label.window(r0, c0, size, size).into_vec()),
                valid,
                scene_id: scene.scene_id.clone(),
                offset: (r0, c0),
                h_amb_m,
            });
        }
    }
    Ok(out)
}

/// Per-band mean and population standard deviation over valid pixels.
pub fn compute_stats(patches: &[Patch]) -> Result<ChannelStats> {
    let mut mean = [0.0f64; N_FEATURES];
    let mut std = [0.0f64; N_FEATURES];
    for band in 0..N_FEATURES {
        let mut n = 0usize;
        let mut sum = 0.0;
        for p in patches {
            for (&x, &v) in p.channel(band).iter().zip(&p.valid) {
                if v == 1 {
                    sum += x as f64;
                    n += 1;
                }
            }
        }
        if n == 0 {
            return Err(Error::Data("no valid pixels for channel statistics".into()));
        }
        let m = sum / n as f64;
        let mut ss = 0.0;
        for p in patches {
            for (&x, &v) in p.channel(band).iter().zip(&p.valid) {
                if v == 1 {
                    ss += (x as f64 - m).powi(2);
                }
            }
        }
        let s = (ss / n as f64).sqrt();
        if !(s > 1e-12 * m.abs().max(1.0)) {
            return Err(Error::ZeroStd(band));
        }
        mean[band] = m;
        std[band] = s;
    }
    Ok(ChannelStats { mean, std })
}

/// Standardizes each band; invalid pixels become exactly 0.
pub fn normalize(patch: &Patch, stats: &ChannelStats) -> Result<Patch> {
    if let Some(band) = stats.std.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::ZeroStd(band));
    }
    let n = patch.size * patch.size;
    let mut out = patch.clone();
    for band in 0..N_FEATURES {
        let (m, s) = (stats.mean[band], stats.std[band]);
        for i in 0..n {
            let x = &mut out.features[band * n + i];
            *x = if patch.valid[i] == 1 {
                ((*x as f64 - m) / s) as f32
            } else {
                0.0
            };
        }
    }
    Ok(out)
}

/// Reads every scene of the given splits and extracts normalized patches.
pub fn load_patches(
    manifest: &Manifest,
    splits: &[Split],
    size: usize,
    stride: usize,
    stats: &ChannelStats,
) -> Result<Vec<Patch>> {
    let mut out = Vec::new();
    for e in manifest.entries.iter().filter(|e| splits.contains(&e.split)) {
        let scene = scene_io::read_scene(&e.path)?;
        for p in extract_patches(&scene, size, stride)? {
            let mut p = normalize(&p, stats)?;
            if e.split == Split::Unlabeled {
                p.label = None;
            }
            out.push(p);
        }
    }
    Ok(out)
}

/// Channel statistics over the training pool (train and unlabeled scenes).
pub fn manifest_stats(manifest: &Manifest, size: usize, stride: usize) -> Result<ChannelStats> {
    let mut patches = Vec::new();
    for e in manifest
        .entries
        .iter()
        .filter(|e| matches!(e.split, Split::Train | Split::Unlabeled))
    {
        let scene = scene_io::read_scene(&e.path)?;
        patches.extend(extract_patches(&scene, size, stride)?);
    }
    compute_stats(&patches)
}

/// Area-weighted majority resampling of a binary map between pixel spacings.
/// `LABEL_NODATA` cells carry no weight; an output cell with no data stays nodata.
/// Ties resolve to forest.
pub fn resample_majority(label: &Raster<u8>, src_res: f64, dst_res: f64) -> Result<Raster<u8>> {
    if !(src_res > 0.0 && dst_res > 0.0) {
        return Err(Error::Config("resolutions must be > 0".into()));
    }
    let (rows, cols) = label.shape();
    let out_rows = ((rows as f64 * src_res) / dst_res - 1e-9).ceil().max(0.0) as usize;
    let out_cols = ((cols as f64 * src_res) / dst_res - 1e-9).ceil().max(0.0) as usize;
    let span = |j: usize, n_src: usize| -> Vec<(usize, f64)> {
        let (a, b) = (j as f64 * dst_res, (j + 1) as f64 * dst_res);
        let first = (a / src_res).floor() as usize;
        let last = ((b / src_res).ceil() as usize).min(n_src);
        (first..last)
            .filter_map(|i| {
                let (s0, s1) = (i as f64 * src_res, (i + 1) as f64 * src_res);
                let w = s1.min(b) - s0.max(a);
                (w > 1e-12).then_some((i, w))
            })
            .collect()
    };
    let row_spans: Vec<_> = (0..out_rows).map(|j| span(j, rows)).collect();
    let col_spans: Vec<_> = (0..out_cols).map(|j| span(j, cols)).collect();
    Ok(Raster::from_fn(out_rows, out_cols, |r, c| {
        let (mut forest, mut other) = (0.0, 0.0);
        for &(sr, wr) in &row_spans[r] {
            for &(sc, wc) in &col_spans[c] {
                match label.get(sr, sc) {
                    1 => forest += wr * wc,
                    0 => other += wr * wc,
                    _ => {}
                }
            }
        }
        if forest + other <= 0.0 {
            LABEL_NODATA
        } else {
            u8::from(forest >= other)
        }
    }))
}

/// Block majority; a trailing partial block is decided by the pixels it contains.
pub fn downsample_majority(label: &Raster<u8>, factor: usize) -> Result<Raster<u8>> {
    if factor == 0 {
        return Err(Error::Config("downsampling factor must be > 0".into()));
    }
    let (rows, cols) = label.shape();
    let (out_rows, out_cols) = (rows.div_ceil(factor), cols.div_ceil(factor));
    Ok(Raster::from_fn(out_rows, out_cols, |r, c| {
        let (mut forest, mut other) = (0usize, 0usize);
        for sr in r * factor..((r + 1) * factor).min(rows) {
            for sc in c * factor..((c + 1) * factor).min(cols) {
                match label.get(sr, sc) {
                    1 => forest += 1,
                    0 => other += 1,
                    _ => {}
                }
            }
        }
        if forest + other == 0 {
            LABEL_NODATA
        } else {
            u8::from(forest >= other)
        }
    }))
}

/// Forest where canopy height strictly exceeds `threshold_m`.
pub fn chm_to_fnf(chm: &Raster<f32>, threshold_m: f64) -> Result<Raster<u8>> {
    if let Some(bad) = chm.data().iter().find(|&&h| !(h >= 0.0)) {
        return Err(Error::Validation(format!("canopy height must be >= 0, got {bad}")));
    }
    Ok(chm.map(|h| u8::from(h as f64 > threshold_m)))
}
