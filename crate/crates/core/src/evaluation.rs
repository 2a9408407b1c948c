//! Confusion accounting, forest/non-forest metrics, test buckets by height of
//! ambiguity, confusion-map rendering, mosaicking and map intercomparison.

use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::iter::Sum;
use std::ops::{Add, AddAssign};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{normalize, resample_majority, ChannelStats, Manifest, Patch, Split, LABEL_NODATA, N_FEATURES};
use crate::models::Model;
use crate::nn::Tensor;
use crate::scene_io;
use crate::scene_synth::{InSARScene, OrbitDir};
use crate::{Error, Raster, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts with the roles of forest and non-forest exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }

    pub fn add_pixel(&mut self, pred_forest: bool, ref_forest: bool) {
        match (pred_forest, ref_forest) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

fn is_label(v: u8) -> bool {
    v == 0 || v == 1
}

/// Tallies a binary prediction against the reference over valid pixels. Reference
/// or prediction values other than 0/1 count as nodata.
pub fn confusion_binary(pred: &Raster<u8>, label: &Raster<u8>, valid: &Raster<u8>) -> Result<ConfusionCounts> {
    pred.check_same_shape(label)?;
    pred.check_same_shape(valid)?;
    let mut c = ConfusionCounts::default();
    for ((&p, &l), &v) in pred.data().iter().zip(label.data()).zip(valid.data()) {
        if v == 1 && is_label(l) && is_label(p) {
            c.add_pixel(p == 1, l == 1);
        }
    }
    Ok(c)
}

pub fn binarize(prob: &Raster<f32>, threshold: f64) -> Raster<u8> {
    prob.map(|p| if p.is_nan() { LABEL_NODATA } else { (p as f64 >= threshold) as u8 })
}

/// Confusion counts of a probability map thresholded with `>=` (forest).
pub fn confusion(pred: &Raster<f32>, label: &Raster<u8>, valid: &Raster<u8>, threshold: f64) -> Result<ConfusionCounts> {
    if let Some(p) = pred.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Validation(format!("prediction {p} outside [0, 1]")));
    }
    confusion_binary(&binarize(pred, threshold), label, valid)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when some ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_metrics(c: &ConfusionCounts) -> ClassMetrics {
    let mut degenerate = false;
    let precision = ratio(c.tp, c.tp + c.fp, &mut degenerate);
    let recall = ratio(c.tp, c.tp + c.fn_, &mut degenerate);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    ClassMetrics {
        precision,
        recall,
        f1,
        degenerate,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scope: String,
    pub oa: f64,
    pub forest: ClassMetrics,
    pub nonforest: ClassMetrics,
    pub f1w: f64,
    /// Reference pixel shares of (forest, non-forest).
    pub weights: [f64; 2],
    pub n_pixels: u64,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    pub fn degenerate(&self) -> bool {
        self.n_pixels == 0 || self.forest.degenerate || self.nonforest.degenerate
    }
}

/// Share-weighted sum of the per-class F1 scores.
pub fn weighted_f1(weights: [f64; 2], f1: [f64; 2]) -> f64 {
    weights[0] * f1[0] + weights[1] * f1[1]
}

/// Overall accuracy and per-class precision/recall/F1 (non-forest from the swapped
/// confusion), weighted by the reference class shares.
pub fn metrics(counts: &ConfusionCounts, scope: &str) -> MetricsReport {
    let n = counts.total();
    let mut degenerate = false;
    let oa = ratio(counts.tp + counts.tn, n, &mut degenerate);
    let forest = class_metrics(counts);
    let nonforest = class_metrics(&counts.swapped());
    let weights = if n == 0 {
        [0.0, 0.0]
    } else {
        [
            (counts.tp + counts.fn_) as f64 / n as f64,
            (counts.tn + counts.fp) as f64 / n as f64,
        ]
    };
    MetricsReport {
        scope: scope.to_string(),
        oa,
        forest,
        nonforest,
        f1w: weighted_f1(weights, [forest.f1, nonforest.f1]),
        weights,
        n_pixels: n,
        counts: *counts,
    }
}

/// The eight reported numbers of one table row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub oa: f64,
    pub f1w: f64,
    pub forest_precision: f64,
    pub forest_recall: f64,
    pub forest_f1: f64,
    pub nonforest_precision: f64,
    pub nonforest_recall: f64,
    pub nonforest_f1: f64,
}

impl MetricRow {
    pub const HEADER: &'static str =
        "oa,f1w,forest_precision,forest_recall,forest_f1,nonforest_precision,nonforest_recall,nonforest_f1";

    pub fn values(&self) -> [f64; 8] {
        [
            self.oa,
            self.f1w,
            self.forest_precision,
            self.forest_recall,
            self.forest_f1,
            self.nonforest_precision,
            self.nonforest_recall,
            self.nonforest_f1,
        ]
    }

    pub fn from_values(v: [f64; 8]) -> Self {
        Self {
            oa: v[0],
            f1w: v[1],
            forest_precision: v[2],
            forest_recall: v[3],
            forest_f1: v[4],
            nonforest_precision: v[5],
            nonforest_recall: v[6],
            nonforest_f1: v[7],
        }
    }

    /// Element-wise arithmetic mean; `None` for an empty slice.
    pub fn mean(rows: &[MetricRow]) -> Option<MetricRow> {
        if rows.is_empty() {
            return None;
        }
        let mut acc = [0.0; 8];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Some(Self::from_values(acc.map(|a| a / rows.len() as f64)))
    }

    pub fn to_csv(&self) -> String {
        self.values().map(|v| format!("{v:.4}")).join(",")
    }
}

impl From<&MetricsReport> for MetricRow {
    fn from(r: &MetricsReport) -> Self {
        Self {
            oa: r.oa,
            f1w: r.f1w,
            forest_precision: r.forest.precision,
            forest_recall: r.forest.recall,
            forest_f1: r.forest.f1,
            nonforest_precision: r.nonforest.precision,
            nonforest_recall: r.nonforest.recall,
            nonforest_f1: r.nonforest.f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TestBucket {
    #[serde(rename = "short")]
    Short,
    #[serde(rename = "mid")]
    Mid,
    #[serde(rename = "large")]
    Large,
    #[serde(rename = "desc-2013-analog")]
    Desc2013,
}

impl TestBucket {
    pub const ALL: [TestBucket; 4] = [TestBucket::Short, TestBucket::Mid, TestBucket::Large, TestBucket::Desc2013];
    pub const HAMB: [TestBucket; 3] = [TestBucket::Short, TestBucket::Mid, TestBucket::Large];

    pub fn id(self) -> &'static str {
        match self {
            TestBucket::Short => "short",
            TestBucket::Mid => "mid",
            TestBucket::Large => "large",
            TestBucket::Desc2013 => "desc-2013-analog",
        }
    }

    /// Ascending scenes split at 40 m and 60 m (both ends of the middle range
    /// inclusive); every descending scene belongs to the descending bucket.
    pub fn of(h_amb_m: f64, orbit: OrbitDir) -> TestBucket {
        match orbit {
            OrbitDir::Descending => TestBucket::Desc2013,
            OrbitDir::Ascending if h_amb_m < 40.0 => TestBucket::Short,
            OrbitDir::Ascending if h_amb_m <= 60.0 => TestBucket::Mid,
            OrbitDir::Ascending => TestBucket::Large,
        }
    }
}

impl fmt::Display for TestBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl std::str::FromStr for TestBucket {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TestBucket::ALL
            .into_iter()
            .find(|b| b.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown test bucket `{s}`")))
    }
}

/// Normalized `[1, 5, size, size]` input for a window of a scene.
fn window_input(scene: &InSARScene, r0: usize, c0: usize, size: usize, stats: &ChannelStats) -> Result<Tensor> {
    let mut features = Vec::with_capacity(N_FEATURES * size * size);
    for band in scene.feature_bands() {
        features.extend_from_slice(band.window(r0, c0, size, size).data());
    }
    let patch = Patch {
        size,
        features,
        label: None,
        valid: scene.valid.window(r0, c0, size, size).into_vec(),
        scene_id: scene.scene_id.clone(),
        offset: (r0, c0),
        h_amb_m: scene.h_amb_m(),
    };
    let p = normalize(&patch, stats)?;
    Ok(Tensor::from_vec(1, N_FEATURES, size, size, p.features))
}

fn tile_starts(len: usize, tile: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..=len - tile).step_by(tile).collect();
    if *v.last().expect("len >= tile") + tile < len {
        v.push(len - tile);
    }
    v
}

/// Forest probability for every pixel of a scene. The scene is covered by `tile`
/// windows (the last row/column of windows is shifted flush with the edge);
/// overlapping predictions are averaged.
pub fn predict_scene(model: &Model, scene: &InSARScene, stats: &ChannelStats, tile: usize) -> Result<Raster<f32>> {
    let (rows, cols) = scene.shape();
    if rows < tile || cols < tile {
        return Err(Error::Data(format!("scene {} smaller than tile {tile}", scene.scene_id)));
    }
    let mut sum = Raster::filled(rows, cols, 0.0f32);
    let mut count = Raster::filled(rows, cols, 0u16);
    for &r0 in &tile_starts(rows, tile) {
        for &c0 in &tile_starts(cols, tile) {
            let y = model.forward(&window_input(scene, r0, c0, tile, stats)?)?;
            for r in 0..tile {
                for c in 0..tile {
                    let (rr, cc) = (r0 + r, c0 + c);
                    sum.set(rr, cc, sum.get(rr, cc) + y.data[r * tile + c]);
                    count.set(rr, cc, count.get(rr, cc) + 1);
                }
            }
        }
    }
    sum.zip_map(&count, |s, n| s / n as f32)
}

/// Per-scene counts alongside the prediction they came from.
#[derive(Debug, Clone)]
pub struct SceneEvaluation {
    pub scene_id: String,
    pub bucket: TestBucket,
    pub counts: ConfusionCounts,
    pub prob: Raster<f32>,
}

pub fn evaluate_scene(
    model: &Model,
    scene: &InSARScene,
    stats: &ChannelStats,
    tile: usize,
    threshold: f64,
) -> Result<SceneEvaluation> {
    let prob = predict_scene(model, scene, stats, tile)?;
    let counts = confusion(&prob, &scene.label, &scene.valid, threshold)?;
    Ok(SceneEvaluation {
        scene_id: scene.scene_id.clone(),
        bucket: TestBucket::of(scene.h_amb_m(), scene.geometry.orbit_dir),
        counts,
        prob,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub bucket: TestBucket,
    pub scenes: Vec<String>,
    pub scene_counts: Vec<ConfusionCounts>,
    /// `None` when no test scene fell into the bucket.
    pub report: Option<MetricsReport>,
}

/// Micro-aggregation: sums scene counts per bucket and computes metrics once.
pub fn aggregate_buckets(scenes: &[(String, TestBucket, ConfusionCounts)], buckets: &[TestBucket]) -> Vec<BucketReport> {
    buckets
        .iter()
        .map(|&b| {
            let members: Vec<_> = scenes.iter().filter(|s| s.1 == b).collect();
            let total: ConfusionCounts = members.iter().map(|s| s.2).sum();
            BucketReport {
                bucket: b,
                scenes: members.iter().map(|s| s.0.clone()).collect(),
                scene_counts: members.iter().map(|s| s.2).collect(),
                report: (!members.is_empty()).then(|| metrics(&total, b.id())),
            }
        })
        .collect()
}

/// Evaluates every test scene of `manifest` and aggregates per bucket.
pub fn bucket_evaluate(
    model: &Model,
    manifest: &Manifest,
    stats: &ChannelStats,
    buckets: &[TestBucket],
    tile: usize,
    threshold: f64,
) -> Result<Vec<BucketReport>> {
    let mut scenes = Vec::new();
    for e in manifest.split(Split::Test) {
        let b = TestBucket::of(e.h_amb_m, e.orbit_dir);
        if !buckets.contains(&b) {
            continue;
        }
        let scene = scene_io::read_scene(&e.path)?;
        let ev = evaluate_scene(model, &scene, stats, tile, threshold)?;
        scenes.push((ev.scene_id, b, ev.counts));
    }
    Ok(aggregate_buckets(&scenes, buckets))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConfusionClass {
    Tp,
    Fp,
    Fn,
    Tn,
    Invalid,
}

impl ConfusionClass {
    pub const ALL: [ConfusionClass; 5] = [
        ConfusionClass::Tp,
        ConfusionClass::Fp,
        ConfusionClass::Fn,
        ConfusionClass::Tn,
        ConfusionClass::Invalid,
    ];

    pub fn color(self) -> [u8; 3] {
        match self {
            ConfusionClass::Tp => [0, 120, 0],
            ConfusionClass::Fp => [230, 120, 0],
            ConfusionClass::Fn => [40, 90, 220],
            ConfusionClass::Tn => [215, 215, 190],
            ConfusionClass::Invalid => [0, 0, 0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ConfusionClass::Tp => "TP",
            ConfusionClass::Fp => "FP",
            ConfusionClass::Fn => "FN",
            ConfusionClass::Tn => "TN",
            ConfusionClass::Invalid => "invalid",
        }
    }

    pub fn from_color(rgb: [u8; 3]) -> Option<ConfusionClass> {
        Self::ALL.into_iter().find(|c| c.color() == rgb)
    }
}

/// Colour-coded confusion map: one fixed colour per outcome.
pub fn render_confusion_map(pred: &Raster<f32>, label: &Raster<u8>, valid: &Raster<u8>, threshold: f64) -> Result<Raster<[u8; 3]>> {
    pred.check_same_shape(label)?;
    pred.check_same_shape(valid)?;
    let bin = binarize(pred, threshold);
    let mut out = Raster::filled(pred.rows(), pred.cols(), ConfusionClass::Invalid.color());
    for i in 0..pred.len() {
        let (p, l, v) = (bin.data()[i], label.data()[i], valid.data()[i]);
        if v != 1 || !is_label(l) || !is_label(p) {
            continue;
        }
        let class = match (p == 1, l == 1) {
            (true, true) => ConfusionClass::Tp,
            (true, false) => ConfusionClass::Fp,
            (false, true) => ConfusionClass::Fn,
            (false, false) => ConfusionClass::Tn,
        };
        out.data_mut()[i] = class.color();
    }
    Ok(out)
}

/// Counts recovered from a rendered map's colours.
pub fn counts_from_map(map: &Raster<[u8; 3]>) -> Result<ConfusionCounts> {
    let mut c = ConfusionCounts::default();
    for &rgb in map.data() {
        match ConfusionClass::from_color(rgb) {
            Some(ConfusionClass::Tp) => c.tp += 1,
            Some(ConfusionClass::Fp) => c.fp += 1,
            Some(ConfusionClass::Fn) => c.fn_ += 1,
            Some(ConfusionClass::Tn) => c.tn += 1,
            Some(ConfusionClass::Invalid) => {}
            None => return Err(Error::Data(format!("unexpected colour {rgb:?}"))),
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapLegend {
    pub classes: Vec<(String, [u8; 3])>,
    pub counts: ConfusionCounts,
    pub threshold: f64,
    pub scene_id: String,
}

/// Writes an RGB PNG and a `<name>.legend.json` sidecar next to it.
pub fn write_rgb_png(path: &Path, map: &Raster<[u8; 3]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), map.cols() as u32, map.rows() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = map.data().iter().flatten().copied().collect();
    enc.write_header()
        .and_then(|mut w| w.write_image_data(&bytes))
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn read_rgb_png(path: &Path) -> Result<Raster<[u8; 3]>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(std::io::BufReader::new(f))
        .read_info()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Data(format!("{} is not 8-bit RGB", path.display())));
    }
    let px: Vec<[u8; 3]> = buf[..info.buffer_size()].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Raster::from_vec(info.height as usize, info.width as usize, px)
}

pub fn legend_path(png_path: &Path) -> std::path::PathBuf {
    png_path.with_extension("legend.json")
}

pub fn write_confusion_map(path: &Path, map: &Raster<[u8; 3]>, scene_id: &str, threshold: f64) -> Result<MapLegend> {
    write_rgb_png(path, map)?;
    let legend = MapLegend {
        classes: ConfusionClass::ALL.iter().map(|c| (c.name().to_string(), c.color())).collect(),
        counts: counts_from_map(map)?,
        threshold,
        scene_id: scene_id.to_string(),
    };
    let lp = legend_path(path);
    let text = serde_json::to_string_pretty(&legend).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&lp, text).map_err(|e| Error::io(&lp, e))?;
    Ok(legend)
}

/// A scene probability map placed in a shared grid.
#[derive(Debug, Clone)]
pub struct MosaicTile {
    pub prob: Raster<f32>,
    pub valid: Raster<u8>,
    pub offset: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mosaic {
    /// Mean probability; NaN where no valid scene pixel contributes.
    pub prob: Raster<f32>,
    pub count: Raster<u32>,
}

impl Mosaic {
    /// Forest (1) / non-forest (0) map with nodata where nothing was observed.
    pub fn classify(&self, threshold: f64) -> Raster<u8> {
        binarize(&self.prob, threshold)
    }
}

/// Places scenes in a `rows` x `cols` grid; overlaps take the mean probability.
pub fn mosaic(tiles: &[MosaicTile], rows: usize, cols: usize) -> Result<Mosaic> {
    let mut sum = Raster::filled(rows, cols, 0.0f64);
    let mut count = Raster::filled(rows, cols, 0u32);
    for t in tiles {
        t.prob.check_same_shape(&t.valid)?;
        let (r0, c0) = t.offset;
        if r0 + t.prob.rows() > rows || c0 + t.prob.cols() > cols {
            return Err(Error::Validation(format!(
                "tile at {:?} of size {:?} exceeds the {rows}x{cols} grid",
                t.offset,
                t.prob.shape()
            )));
        }
        for r in 0..t.prob.rows() {
            for c in 0..t.prob.cols() {
                if t.valid.get(r, c) == 1 {
                    sum.set(r0 + r, c0 + c, sum.get(r0 + r, c0 + c) + t.prob.get(r, c) as f64);
                    count.set(r0 + r, c0 + c, count.get(r0 + r, c0 + c) + 1);
                }
            }
        }
    }
    let prob = sum.zip_map(&count, |s, n| if n == 0 { f32::NAN } else { (s / n as f64) as f32 })?;
    Ok(Mosaic { prob, count })
}

/// One scene of a map intercomparison: our map at its own resolution against a
/// reference map on a coarser grid sharing the same origin.
#[derive(Debug, Clone)]
pub struct MapPair {
    pub scene_id: String,
    pub ours: Raster<u8>,
    pub ours_res_m: f64,
    pub reference: Raster<u8>,
    pub reference_res_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intercomparison {
    pub overall: MetricsReport,
    pub per_scene: Vec<(String, ConfusionCounts, f64)>,
    /// Non-forest F1 over scenes with reference non-forest share above 5 % / 10 %.
    pub nonforest_f1_above_5: Option<f64>,
    pub nonforest_f1_above_10: Option<f64>,
    pub scenes_above_5: Vec<String>,
    pub scenes_above_10: Vec<String>,
}

/// Resamples our map onto the reference grid (majority, ties to forest) and scores
/// it against the reference over the overlapping extent.
pub fn intercompare(pairs: &[MapPair]) -> Result<Intercomparison> {
    let mut per_scene = Vec::with_capacity(pairs.len());
    for p in pairs {
        let ours = if p.ours_res_m == p.reference_res_m {
            p.ours.clone()
        } else {
            resample_majority(&p.ours, p.ours_res_m, p.reference_res_m)?
        };
        let rows = ours.rows().min(p.reference.rows());
        let cols = ours.cols().min(p.reference.cols());
        if rows == 0 || cols == 0 {
            return Err(Error::Validation(format!("scene {} has no overlap with the reference", p.scene_id)));
        }
        let a = ours.window(0, 0, rows, cols);
        let b = p.reference.window(0, 0, rows, cols);
        let valid = Raster::filled(rows, cols, 1u8);
        let counts = confusion_binary(&a, &b, &valid)?;
        if counts.total() == 0 {
            return Err(Error::Validation(format!("scene {} has no valid overlap", p.scene_id)));
        }
        let nf_share = (counts.tn + counts.fp) as f64 / counts.total() as f64;
        per_scene.push((p.scene_id.clone(), counts, nf_share));
    }
    if per_scene.is_empty() {
        return Err(Error::Validation("nothing to intercompare".into()));
    }
    let overall = metrics(&per_scene.iter().map(|s| s.1).sum(), "intercomparison");
    let filtered = |min: f64| -> (Option<f64>, Vec<String>) {
        let sel: Vec<_> = per_scene.iter().filter(|s| s.2 > min).collect();
        if sel.is_empty() {
            return (None, Vec::new());
        }
        let c: ConfusionCounts = sel.iter().map(|s| s.1).sum();
        (Some(metrics(&c, "").nonforest.f1), sel.iter().map(|s| s.0.clone()).collect())
    };
    let (f5, s5) = filtered(0.05);
    let (f10, s10) = filtered(0.10);
    Ok(Intercomparison {
        overall,
        per_scene,
        nonforest_f1_above_5: f5,
        nonforest_f1_above_10: f10,
        scenes_above_5: s5,
        scenes_above_10: s10,
    })
}

/// One line of an appendix-style results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub subset: String,
    pub approach: String,
    pub run: String,
    pub metrics: MetricRow,
}

pub fn table_csv(rows: &[TableRow]) -> String {
    let mut s = format!("subset,approach,run,{}\n", MetricRow::HEADER);
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.subset, r.approach, r.run, r.metrics.to_csv()));
    }
    s
}

/// Fixed-width text rendering of [`table_csv`] rows.
pub fn table_text(rows: &[TableRow]) -> String {
    let mut s = format!(
        "{:<18} {:<12} {:<5} {:>7} {:>7} | {:>7} {:>7} {:>7} | {:>7} {:>7} {:>7}\n",
        "subset", "approach", "run", "OA", "F1w", "F-P", "F-R", "F-F1", "NF-P", "NF-R", "NF-F1"
    );
    for r in rows {
        let v = r.metrics.values();
        s.push_str(&format!(
            "{:<18} {:<12} {:<5} {:>7.4} {:>7.4} | {:>7.4} {:>7.4} {:>7.4} | {:>7.4} {:>7.4} {:>7.4}\n",
            r.subset, r.approach, r.run, v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn r8(rows: usize, cols: usize, v: Vec<u8>) -> Raster<u8> {
        Raster::from_vec(rows, cols, v).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let label = r8(10, 10, (0..100).map(|i| (i < 60) as u8).collect());
        let valid = Raster::filled(10, 10, 1u8);
        let pred = label.map(|v| v as f32);
        let c = confusion(&pred, &label, &valid, 0.5).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (60, 40, 0, 0));
        let inv = label.map(|v| 1.0 - v as f32);
        let c = confusion(&inv, &label, &valid, 0.5).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (0, 0, 40, 60));
    }

    #[test]
    fn threshold_is_inclusive_and_invalid_skipped() {
        let pred = Raster::from_vec(1, 3, vec![0.5f32, 0.49, 0.9]).unwrap();
        let label = r8(1, 3, vec![1, 0, 0]);
        let valid = r8(1, 3, vec![1, 1, 0]);
        let c = confusion(&pred, &label, &valid, 0.5).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 0, fn_: 0, tn: 1 });
        assert!(confusion(&pred, &r8(1, 2, vec![0, 0]), &valid, 0.5).is_err());
        let bad = Raster::from_vec(1, 3, vec![1.5f32, 0.0, 0.0]).unwrap();
        assert!(confusion(&bad, &label, &valid, 0.5).is_err());
    }

    #[test]
    fn confusion_matches_pixel_loop() {
        let mut rng = stream_rng(3, 0);
        for _ in 0..20 {
            let pred = Raster::from_fn(16, 16, |_, _| rng.random::<f32>());
            let label = Raster::from_fn(16, 16, |_, _| rng.random_range(0..2u8));
            let valid = Raster::from_fn(16, 16, |_, _| (rng.random::<f64>() > 0.1) as u8);
            let mut oracle = [0u64; 4];
            for i in 0..256 {
                if valid.data()[i] == 0 {
                    continue;
                }
                let p = pred.data()[i] >= 0.5;
                let l = label.data()[i] == 1;
                oracle[match (p, l) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, true) => 2,
                    (false, false) => 3,
                }] += 1;
            }
            let c = confusion(&pred, &label, &valid, 0.5).unwrap();
            assert_eq!([c.tp, c.fp, c.fn_, c.tn], oracle);
        }
    }

    #[test]
    fn metric_examples() {
        let c = ConfusionCounts { tp: 50, fp: 10, fn_: 20, tn: 20 };
        let m = metrics(&c, "x");
        assert!((m.forest.precision - 5.0 / 6.0).abs() < 1e-12);
        assert!((m.forest.recall - 5.0 / 7.0).abs() < 1e-12);
        assert!((m.forest.f1 - 0.7692).abs() < 5e-5);
        assert!((m.oa - 0.7).abs() < 1e-12);
        let perfect = metrics(&ConfusionCounts { tp: 30, fp: 0, fn_: 0, tn: 70 }, "p");
        for v in [perfect.oa, perfect.f1w, perfect.forest.f1, perfect.nonforest.f1, perfect.nonforest.recall] {
            assert_eq!(v, 1.0);
        }
        assert!((weighted_f1([0.62, 0.38], [0.9364, 0.8943]) - 0.9204).abs() < 5e-5);
    }

    #[test]
    fn degenerate_class_is_flagged() {
        let m = metrics(&ConfusionCounts { tp: 10, fp: 0, fn_: 0, tn: 0 }, "all forest");
        assert!(m.nonforest.degenerate && m.degenerate());
        assert_eq!(m.nonforest.f1, 0.0);
        assert_eq!(m.weights, [1.0, 0.0]);
        assert_eq!(m.f1w, 1.0);
        let empty = metrics(&ConfusionCounts::default(), "empty");
        assert_eq!(empty.oa, 0.0);
        assert!(empty.degenerate());
    }

    #[test]
    fn f1_lies_between_precision_and_recall() {
        let mut rng = stream_rng(4, 0);
        for _ in 0..500 {
            let c = ConfusionCounts {
                tp: rng.random_range(0..50),
                fp: rng.random_range(0..50),
                fn_: rng.random_range(0..50),
                tn: rng.random_range(0..50),
            };
            let m = metrics(&c, "");
            for k in [m.forest, m.nonforest] {
                if !k.degenerate {
                    assert!(k.f1 >= k.precision.min(k.recall) - 1e-12 && k.f1 <= k.precision.max(k.recall) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn bucket_rules() {
        assert_eq!(TestBucket::of(39.99, OrbitDir::Ascending), TestBucket::Short);
        assert_eq!(TestBucket::of(40.0, OrbitDir::Ascending), TestBucket::Mid);
        assert_eq!(TestBucket::of(60.0, OrbitDir::Ascending), TestBucket::Mid);
        assert_eq!(TestBucket::of(60.01, OrbitDir::Ascending), TestBucket::Large);
        assert_eq!(TestBucket::of(30.0, OrbitDir::Descending), TestBucket::Desc2013);
        assert_eq!("desc-2013-analog".parse::<TestBucket>().unwrap(), TestBucket::Desc2013);
    }

    #[test]
    fn micro_aggregation() {
        let a = ConfusionCounts { tp: 5, fp: 1, fn_: 2, tn: 9 };
        let b = ConfusionCounts { tp: 1, fp: 4, fn_: 0, tn: 3 };
        let scenes = vec![
            ("a".to_string(), TestBucket::Short, a),
            ("b".to_string(), TestBucket::Short, b),
            ("c".to_string(), TestBucket::Mid, a),
            ("d".to_string(), TestBucket::Mid, a),
        ];
        let r = aggregate_buckets(&scenes, &TestBucket::ALL);
        assert_eq!(r[0].report.as_ref().unwrap().counts, a + b);
        let mid = r[1].report.as_ref().unwrap();
        let single = metrics(&a, "mid");
        assert_eq!((mid.oa, mid.f1w, mid.forest), (single.oa, single.f1w, single.forest));
        assert!(r[2].report.is_none() && r[3].report.is_none());
    }

    #[test]
    fn confusion_map_colours_match_counts() {
        let mut rng = stream_rng(5, 0);
        let pred = Raster::from_fn(12, 9, |_, _| rng.random::<f32>());
        let label = Raster::from_fn(12, 9, |_, _| rng.random_range(0..2u8));
        let valid = Raster::from_fn(12, 9, |_, _| (rng.random::<f64>() > 0.2) as u8);
        let map = render_confusion_map(&pred, &label, &valid, 0.5).unwrap();
        assert_eq!(counts_from_map(&map).unwrap(), confusion(&pred, &label, &valid, 0.5).unwrap());

        let perfect = render_confusion_map(&label.map(|v| v as f32), &label, &valid, 0.5).unwrap();
        let colours: std::collections::BTreeSet<_> = perfect.data().iter().copied().collect();
        assert!(colours.is_subset(&[ConfusionClass::Tp, ConfusionClass::Tn, ConfusionClass::Invalid].map(|c| c.color()).into()));

        let none = render_confusion_map(&pred, &label, &Raster::filled(12, 9, 0u8), 0.5).unwrap();
        assert!(none.data().iter().all(|&c| c == ConfusionClass::Invalid.color()));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let legend = write_confusion_map(&path, &map, "s", 0.5).unwrap();
        assert_eq!(read_rgb_png(&path).unwrap(), map);
        assert_eq!(legend.counts, counts_from_map(&map).unwrap());
        assert!(legend_path(&path).exists());
    }

    #[test]
    fn mosaic_examples() {
        let one = |p: f32, off| MosaicTile {
            prob: Raster::filled(2, 2, p),
            valid: Raster::filled(2, 2, 1),
            offset: off,
        };
        let m = mosaic(&[one(0.3, (0, 0))], 2, 2).unwrap();
        assert_eq!(m.prob, Raster::filled(2, 2, 0.3));
        let m = mosaic(&[one(0.4, (0, 0)), one(0.8, (0, 1))], 2, 3).unwrap();
        assert!((m.prob.get(0, 1) - 0.6).abs() < 1e-6);
        assert_eq!(m.classify(0.5).get(0, 1), 1);
        assert_eq!(m.classify(0.5).get(0, 0), 0);
        let m = mosaic(&[one(0.9, (0, 0)), one(0.1, (2, 2))], 4, 4).unwrap();
        let cls = m.classify(0.5);
        assert_eq!((cls.get(0, 0), cls.get(3, 3), cls.get(0, 3)), (1, 0, LABEL_NODATA));
        assert!(mosaic(&[one(0.5, (3, 3))], 4, 4).is_err());
    }

    #[test]
    fn intercompare_examples() {
        let mut rng = stream_rng(6, 0);
        let reference = Raster::from_fn(60, 60, |r, c| ((r / 7 + c / 5) % 2) as u8);
        let same = intercompare(&[MapPair {
            scene_id: "a".into(),
            ours: reference.clone(),
            ours_res_m: 10.0,
            reference: reference.clone(),
            reference_res_m: 10.0,
        }])
        .unwrap();
        assert_eq!((same.overall.oa, same.overall.f1w), (1.0, 1.0));

        let flipped = Raster::from_fn(60, 60, |r, c| {
            let v = reference.get(r, c);
            if rng.random::<f64>() < 0.1 { 1 - v } else { v }
        });
        let noisy = intercompare(&[MapPair {
            scene_id: "b".into(),
            ours: flipped,
            ours_res_m: 10.0,
            reference: reference.clone(),
            reference_res_m: 10.0,
        }])
        .unwrap();
        assert!((noisy.overall.oa - 0.9).abs() < 0.01);

        // a 6 m map of uniform 3x3 blocks resamples exactly onto 10 m
        let fine = Raster::from_fn(30, 30, |r, c| ((r / 5 + c / 5) % 2) as u8);
        let coarse = Raster::from_fn(18, 18, |r, c| ((r / 3 + c / 3) % 2) as u8);
        let res = intercompare(&[MapPair {
            scene_id: "c".into(),
            ours: fine,
            ours_res_m: 6.0,
            reference: coarse,
            reference_res_m: 10.0,
        }])
        .unwrap();
        assert!(res.overall.oa > 0.8);

        let mostly_forest = Raster::from_fn(10, 10, |r, c| (r * 10 + c >= 4) as u8);
        let r = intercompare(&[MapPair {
            scene_id: "four-percent".into(),
            ours: mostly_forest.clone(),
            ours_res_m: 10.0,
            reference: mostly_forest,
            reference_res_m: 10.0,
        }])
        .unwrap();
        assert!(r.scenes_above_5.is_empty() && r.nonforest_f1_above_5.is_none());
    }

    #[test]
    fn replicate_row_mean() {
        let rows = [0.9194, 0.9208, 0.9205].map(|f| MetricRow { f1w: f, ..Default::default() });
        let m = MetricRow::mean(&rows).unwrap();
        assert!((m.f1w - 0.9202).abs() < 5e-5);
        assert_eq!(MetricRow::mean(&rows[..1]).unwrap(), rows[0]);
    }
}
