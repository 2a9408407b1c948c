//! Pretext (identity, inpainting) and segmentation (from scratch, or after encoder
//! transfer) training runs, plus the replicate protocol.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    balance_filter, label_fraction_subset, load_patches, manifest_stats, stratified_select, ChannelStats, Manifest,
    Patch, Split, N_FEATURES,
};
use crate::evaluation::{aggregate_buckets, bucket_evaluate, metrics, BucketReport, ConfusionCounts, MetricRow, MetricsReport, TestBucket};
use crate::losses::{downstream_loss, identity_loss, inpainting_loss, LossGrad, MaskSpec, W_REC};
use crate::models::{
    load_checkpoint, save_checkpoint, transfer_encoder, Arch, EncoderSchema, Model, Task, Trainability,
};
use crate::nn::{Adam, AdamConfig, ParamStore, Tensor};
use crate::rng::{shuffle, stream_rng};
use crate::{Error, Result};

pub const LABEL_FRACTIONS: [f64; 4] = [0.015, 0.08, 0.22, 1.0];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    #[default]
    Random,
    FromCheckpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub balance_min_fraction: f64,
    pub hamb_bin_width_m: f64,
    pub train_cap: usize,
    pub val_cap: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            patch_size: 128,
            stride: 128,
            balance_min_fraction: 0.25,
            hamb_bin_width_m: 2.0,
            train_cap: 20,
            val_cap: 10,
        }
    }
}

fn default_trainability() -> Trainability {
    Trainability::EncoderDecoder
}
fn default_label_fraction() -> f64 {
    1.0
}
fn default_epochs() -> usize {
    50
}
fn default_batch_size() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-4
}
fn default_patience() -> usize {
    10
}
fn default_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    #[serde(default)]
    pub init: Init,
    #[serde(default = "default_trainability")]
    pub trainability: Trainability,
    #[serde(default = "default_label_fraction")]
    pub label_fraction: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: EncoderSchema,
    #[serde(default)]
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn new(task: Task, manifest: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            task,
            init: Init::Random,
            trainability: default_trainability(),
            label_fraction: default_label_fraction(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_lr(),
            seed: 0,
            patience: default_patience(),
            threshold: default_threshold(),
            manifest: manifest.into(),
            output_dir: output_dir.into(),
            model: EncoderSchema::default(),
            data: DataConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `key=value` with a dotted key naming an existing field. The value is
    /// read as a TOML value, falling back to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        *self = apply_overrides(&*self, &[assignment])?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn is_pretext(&self) -> bool {
        matches!(self.task, Task::SslIdentity | Task::SslInpainting)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let cfg = |m: String| Err(Error::Config(m));
        match (self.task, &self.init) {
            (Task::Dst, Init::Random) => return cfg("task dst needs init = { from-checkpoint = ... }".into()),
            (Task::Fsl, Init::FromCheckpoint(_)) => return cfg("task fsl trains from random init".into()),
            (Task::SslIdentity | Task::SslInpainting, Init::FromCheckpoint(_)) => {
                return cfg("pretext tasks train from random init".into())
            }
            _ => {}
        }
        if !self.is_pretext() && !LABEL_FRACTIONS.iter().any(|f| (f - self.label_fraction).abs() < 1e-12) {
            return cfg(format!("label_fraction {} not one of {LABEL_FRACTIONS:?}", self.label_fraction));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return cfg("epochs and batch_size must be > 0".into());
        }
        if !(self.learning_rate > 0.0) {
            return cfg("learning_rate must be > 0".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return cfg("threshold must lie in (0, 1)".into());
        }
        let d = &self.data;
        if d.patch_size == 0 || d.patch_size % (1 << self.model.n_levels) != 0 {
            return cfg(format!(
                "patch_size {} not divisible by 2^{}",
                d.patch_size, self.model.n_levels
            ));
        }
        if d.stride == 0 || !(d.hamb_bin_width_m > 0.0) || !(0.0..=0.5).contains(&d.balance_min_fraction) {
            return cfg("data.stride, data.hamb_bin_width_m or data.balance_min_fraction out of range".into());
        }
        Ok(())
    }
}

/// Applies `key=value` assignments (dotted keys naming existing fields) to any
/// TOML-serializable configuration.
pub fn apply_overrides<T, S>(cfg: &T, assignments: &[S]) -> Result<T>
where
    T: Serialize + serde::de::DeserializeOwned,
    S: AsRef<str>,
{
    let mut root = toml::Value::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?;
    for a in assignments {
        set_dotted(&mut root, a.as_ref())?;
    }
    root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

fn set_dotted(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a table", parts[..i].join("."))))?;
        // unset optional fields are absent; unknown leaf keys fail on deserialization
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    unreachable!("split yields at least one part")
}

/// Loss curves, selection provenance and (for segmentation) test metrics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub task: Task,
    pub seed: u64,
    pub config_digest: String,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Validation loss of the initialized model, before any step.
    pub initial_val_loss: f64,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub checkpoint: PathBuf,
    pub run_dir: PathBuf,
    /// Scenes that contributed a patch to at least one optimizer step.
    pub train_scenes: Vec<String>,
    pub val_scenes: Vec<String>,
    pub val_report: Option<MetricsReport>,
    pub buckets: Vec<BucketReport>,
}

impl RunResult {
    pub fn bucket_f1w(&self, b: TestBucket) -> Option<f64> {
        self.buckets
            .iter()
            .find(|r| r.bucket == b)
            .and_then(|r| r.report.as_ref())
            .map(|m| m.f1w)
    }
}

/// A finished run with its best-validation model.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub result: RunResult,
    pub model: Model,
}

struct Prepared {
    manifest: Manifest,
    stats: ChannelStats,
    train: Vec<Patch>,
    val: Vec<Patch>,
}

fn channel_stats(manifest: &Manifest, data: &DataConfig) -> Result<ChannelStats> {
    match manifest.channel_stats {
        Some(s) => Ok(s),
        None => manifest_stats(manifest, data.patch_size, data.stride),
    }
}

fn prepare(cfg: &ExperimentConfig, manifest: Manifest) -> Result<Prepared> {
    let stats = channel_stats(&manifest, &cfg.data)?;
    let d = &cfg.data;
    let (train, val) = if cfg.is_pretext() {
        let balanced = manifest.with_entries(
            manifest
                .entries
                .iter()
                .filter(|e| e.split == Split::Test || balance_filter(e, d.balance_min_fraction))
                .cloned()
                .collect(),
        );
        let sel = stratified_select(&balanced, d.hamb_bin_width_m, d.train_cap, d.val_cap, cfg.seed);
        (
            load_patches(&sel, &[Split::Train, Split::Unlabeled], d.patch_size, d.stride, &stats)?,
            load_patches(&sel, &[Split::Val], d.patch_size, d.stride, &stats)?,
        )
    } else {
        let labeled = label_fraction_subset(&manifest, cfg.label_fraction)?;
        (
            load_patches(&labeled, &[Split::Train], d.patch_size, d.stride, &stats)?,
            load_patches(&manifest, &[Split::Val], d.patch_size, d.stride, &stats)?,
        )
    };
    if train.is_empty() {
        return Err(Error::Config("training selection is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Config("validation selection is empty".into()));
    }
    Ok(Prepared {
        manifest,
        stats,
        train,
        val,
    })
}

fn stack_features(patches: &[&Patch]) -> Tensor {
    let s = patches[0].size;
    let mut data = Vec::with_capacity(patches.len() * N_FEATURES * s * s);
    for p in patches {
        data.extend_from_slice(&p.features);
    }
    Tensor::from_vec(patches.len(), N_FEATURES, s, s, data)
}

/// Per-element validity with the pixel mask broadcast over `channels`.
fn element_valid(patches: &[&Patch], channels: usize) -> Vec<bool> {
    let mut v = Vec::new();
    for p in patches {
        for _ in 0..channels {
            v.extend(p.valid.iter().map(|&x| x == 1));
        }
    }
    v
}

fn to_f64(t: &[f32]) -> Vec<f64> {
    t.iter().map(|&v| v as f64).collect()
}

enum Objective {
    Identity,
    Inpainting,
    Segmentation,
}

impl Objective {
    fn of(task: Task) -> Self {
        match task {
            Task::SslIdentity => Objective::Identity,
            Task::SslInpainting => Objective::Inpainting,
            Task::Fsl | Task::Dst => Objective::Segmentation,
        }
    }

    /// Network input for a batch, plus the per-element inpainting mask when used.
    fn input(&self, patches: &[&Patch], masks: &[MaskSpec]) -> (Tensor, Option<Vec<f64>>) {
        let mut x = stack_features(patches);
        if !matches!(self, Objective::Inpainting) {
            return (x, None);
        }
        let plane = x.plane();
        let mut m = Vec::with_capacity(x.data.len());
        for (i, mask) in masks.iter().enumerate() {
            let mv = mask.values();
            for c in 0..x.c {
                let off = (i * x.c + c) * plane;
                for (v, &k) in x.data[off..off + plane].iter_mut().zip(&mv) {
                    *v *= k as f32;
                }
                m.extend_from_slice(&mv);
            }
        }
        (x, Some(m))
    }

    fn loss(&self, patches: &[&Patch], out: &Tensor, mask: Option<&[f64]>) -> Result<LossGrad> {
        let pred = to_f64(&out.data);
        match self {
            Objective::Identity | Objective::Inpainting => {
                let target = to_f64(&stack_features(patches).data);
                let valid = element_valid(patches, N_FEATURES);
                match mask {
                    Some(m) => inpainting_loss(&target, &pred, m, W_REC, Some(&valid)),
                    None => identity_loss(&target, &pred, Some(&valid)),
                }
            }
            Objective::Segmentation => {
                let mut y = Vec::with_capacity(pred.len());
                let mut valid = Vec::with_capacity(pred.len());
                for p in patches {
                    let label = p
                        .label
                        .as_ref()
                        .ok_or_else(|| Error::Data(format!("patch of {} has no label", p.scene_id)))?;
                    for (&l, &v) in label.iter().zip(&p.valid) {
                        valid.push(v == 1 && l <= 1);
                        y.push(if l == 1 { 1.0 } else { 0.0 });
                    }
                }
                downstream_loss(&y, &pred, Some(&valid))
            }
        }
    }
}

fn hole_for(size: usize) -> usize {
    size / 2
}

fn validation_loss(
    model: &Model,
    obj: &Objective,
    val: &[Patch],
    val_masks: &[MaskSpec],
    batch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for (chunk, masks) in val.chunks(batch).zip(val_masks.chunks(batch)) {
        let refs: Vec<&Patch> = chunk.iter().collect();
        let (x, m) = obj.input(&refs, masks);
        let out = model.forward(&x)?;
        total += obj.loss(&refs, &out, m.as_deref())?.value * chunk.len() as f64;
    }
    Ok(total / val.len() as f64)
}

fn validation_confusion(model: &Model, val: &[Patch], threshold: f64) -> Result<ConfusionCounts> {
    let mut c = ConfusionCounts::default();
    for p in val {
        let out = model.forward(&stack_features(&[p]))?;
        let label = p.label.as_ref().ok_or_else(|| Error::Data("validation patch without label".into()))?;
        for ((&prob, &l), &v) in out.data.iter().zip(label).zip(&p.valid) {
            if v == 1 && l <= 1 {
                c.add_pixel(prob as f64 >= threshold, l == 1);
            }
        }
    }
    Ok(c)
}

fn write_curves(path: &Path, train: &[f64], val: &[f64], initial: f64) -> Result<()> {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    s.push_str(&format!("0,,{initial:.17e}\n"));
    for (i, (t, v)) in train.iter().zip(val).enumerate() {
        s.push_str(&format!("{},{t:.17e},{v:.17e}\n", i + 1));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Errors if any scene used for optimization or model selection is a test scene.
pub fn audit_isolation(result: &RunResult, manifest: &Manifest) -> Result<()> {
    let test: BTreeSet<&str> = manifest.split(Split::Test).map(|e| e.scene_id.as_str()).collect();
    if let Some(s) = result
        .train_scenes
        .iter()
        .chain(&result.val_scenes)
        .find(|s| test.contains(s.as_str()))
    {
        return Err(Error::Run(format!("test scene {s} leaked into training")));
    }
    Ok(())
}

/// Core loop shared by all tasks: Adam on the task loss, validation every epoch,
/// best-validation snapshot, early stopping.
fn fit(cfg: &ExperimentConfig, mut model: Model, data: Prepared) -> Result<TrainedRun> {
    let obj = Objective::of(cfg.task);
    let run_dir = cfg.output_dir.clone();
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let digest = cfg.digest();
    fs::write(run_dir.join("config.toml"), cfg.to_toml()).map_err(|e| Error::io(&run_dir, e))?;
    fs::write(run_dir.join("config.sha256"), format!("{digest}\n")).map_err(|e| Error::io(&run_dir, e))?;

    let size = cfg.data.patch_size;
    let mut val_rng = stream_rng(cfg.seed, 31);
    let val_masks: Vec<MaskSpec> = (0..data.val.len())
        .map(|_| MaskSpec::sample(size, hole_for(size), &mut val_rng))
        .collect::<Result<_>>()?;
    let mut order_rng = stream_rng(cfg.seed, 30);
    let mut mask_rng = stream_rng(cfg.seed, 32);

    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.learning_rate,
            ..Default::default()
        },
        &model.params,
    );
    let initial_val_loss = validation_loss(&model, &obj, &data.val, &val_masks, cfg.batch_size)?;
    info!("{} seed {}: initial val loss {initial_val_loss:.6}", cfg.task, cfg.seed);

    let mut best: (f64, usize, ParamStore) = (initial_val_loss, 0, model.params.clone());
    let (mut train_curve, mut val_curve) = (Vec::new(), Vec::new());
    let mut used = BTreeSet::new();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, &mut order_rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let refs: Vec<&Patch> = idx.iter().map(|&i| &data.train[i]).collect();
            let masks: Vec<MaskSpec> = match obj {
                Objective::Inpainting => refs
                    .iter()
                    .map(|_| MaskSpec::sample(size, hole_for(size), &mut mask_rng))
                    .collect::<Result<_>>()?,
                _ => Vec::new(),
            };
            let (x, m) = obj.input(&refs, &masks);
            model.zero_grad();
            let cache = model.forward_train(&x)?;
            let lg = obj.loss(&refs, cache.output(), m.as_deref())?;
            if !lg.value.is_finite() {
                return Err(Error::Run(format!("non-finite training loss at epoch {epoch}")));
            }
            let grad = Tensor {
                data: lg.grad.iter().map(|&g| g as f32).collect(),
                ..*cache.output()
            };
            model.backward(&cache, &grad);
            opt.step(&mut model.params);
            total += lg.value * refs.len() as f64;
            used.extend(refs.iter().map(|p| p.scene_id.clone()));
        }
        let train_loss = total / data.train.len() as f64;
        let val_loss = validation_loss(&model, &obj, &data.val, &val_masks, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Run(format!("non-finite validation loss at epoch {epoch}")));
        }
        debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        train_curve.push(train_loss);
        val_curve.push(val_loss);
        if val_loss < best.0 {
            best = (val_loss, epoch, model.params.clone());
        } else if epoch - best.1 >= cfg.patience {
            info!("early stop at epoch {epoch}, best epoch {}", best.1);
            break;
        }
    }
    model.params = best.2;
    model.zero_grad();

    let checkpoint = run_dir.join("best.ckpt");
    save_checkpoint(&checkpoint, &model, cfg.task, &digest)?;
    write_curves(&run_dir.join("losses.csv"), &train_curve, &val_curve, initial_val_loss)?;

    let (val_report, buckets) = if matches!(obj, Objective::Segmentation) {
        let vc = validation_confusion(&model, &data.val, cfg.threshold)?;
        let buckets = bucket_evaluate(
            &model,
            &data.manifest,
            &data.stats,
            &TestBucket::ALL,
            size,
            cfg.threshold,
        )?;
        (Some(metrics(&vc, "val")), buckets)
    } else {
        (None, Vec::new())
    };

    let mut val_scenes: Vec<String> = data.val.iter().map(|p| p.scene_id.clone()).collect();
    val_scenes.dedup();
    let result = RunResult {
        task: cfg.task,
        seed: cfg.seed,
        config_digest: digest,
        train_loss: train_curve,
        val_loss: val_curve,
        initial_val_loss,
        best_epoch: best.1,
        best_val_loss: best.0,
        checkpoint,
        run_dir: run_dir.clone(),
        train_scenes: used.into_iter().collect(),
        val_scenes,
        val_report,
        buckets,
    };
    audit_isolation(&result, &data.manifest)?;
    write_json(&run_dir.join("run.json"), &result)?;
    if !result.buckets.is_empty() {
        write_json(&run_dir.join("report.json"), &result.buckets)?;
    }
    Ok(TrainedRun { result, model })
}

fn load_manifest(cfg: &ExperimentConfig) -> Result<Manifest> {
    Manifest::load(&cfg.manifest)
}

/// Trains the autoencoder on the identity or inpainting pretext task.
pub fn train_pretext(cfg: &ExperimentConfig) -> Result<TrainedRun> {
    cfg.validate()?;
    if !cfg.is_pretext() {
        return Err(Error::Config(format!("train_pretext got task {}", cfg.task)));
    }
    let data = prepare(cfg, load_manifest(cfg)?)?;
    let model = Model::new(Arch::Cae, cfg.model, cfg.seed)?;
    fit(cfg, model, data)
}

/// Trains a U-Net on labels: from scratch (fsl) or with the encoder of a pretext
/// checkpoint and the configured trainability (dst).
pub fn train_segmentation(cfg: &ExperimentConfig) -> Result<TrainedRun> {
    cfg.validate()?;
    let mut model = Model::new(Arch::Unet, cfg.model, cfg.seed)?;
    match (cfg.task, &cfg.init) {
        (Task::Fsl, _) => model.set_trainability(Trainability::EncoderDecoder),
        (Task::Dst, Init::FromCheckpoint(path)) => {
            let (source, header) = load_checkpoint(path, Some(&cfg.model))?;
            if !matches!(header.task, Task::SslIdentity | Task::SslInpainting) {
                return Err(Error::Config(format!(
                    "dst needs a pretext checkpoint, {} was trained for {}",
                    path.display(),
                    header.task
                )));
            }
            transfer_encoder(&source, &mut model)?;
            model.set_trainability(cfg.trainability);
        }
        _ => return Err(Error::Config(format!("train_segmentation got task {}", cfg.task))),
    }
    let data = prepare(cfg, load_manifest(cfg)?)?;
    fit(cfg, model, data)
}

/// Dispatches on the configured task.
pub fn run(cfg: &ExperimentConfig) -> Result<TrainedRun> {
    if cfg.is_pretext() {
        train_pretext(cfg)
    } else {
        train_segmentation(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketSummary {
    pub bucket: TestBucket,
    /// Mean over runs of every table metric; `None` if no run had test scenes here.
    pub mean: Option<MetricRow>,
    pub runs: Vec<MetricRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub runs: Vec<RunResult>,
    pub buckets: Vec<BucketSummary>,
}

impl ReplicateResult {
    pub fn mean_f1w(&self, b: TestBucket) -> Option<f64> {
        self.buckets
            .iter()
            .find(|s| s.bucket == b)
            .and_then(|s| s.mean)
            .map(|m| m.f1w)
    }
}

/// Per-bucket arithmetic means of the runs' test metrics.
pub fn summarize(runs: &[RunResult]) -> Vec<BucketSummary> {
    TestBucket::ALL
        .iter()
        .map(|&b| {
            let rows: Vec<MetricRow> = runs
                .iter()
                .filter_map(|r| r.buckets.iter().find(|x| x.bucket == b))
                .filter_map(|x| x.report.as_ref())
                .map(MetricRow::from)
                .collect();
            BucketSummary {
                bucket: b,
                mean: MetricRow::mean(&rows),
                runs: rows,
            }
        })
        .collect()
}

/// Runs `n` replicates with seeds `seed, seed + 1, ...`, each in `<output_dir>/seed-<s>`.
pub fn run_replicates(cfg: &ExperimentConfig, n: usize) -> Result<ReplicateResult> {
    if n == 0 {
        return Err(Error::Config("at least one replicate is required".into()));
    }
    let mut runs = Vec::with_capacity(n);
    for i in 0..n {
        let mut c = cfg.clone();
        c.seed = cfg.seed + i as u64;
        c.output_dir = cfg.output_dir.join(format!("seed-{}", c.seed));
        runs.push(run(&c)?.result);
    }
    let buckets = summarize(&runs);
    let out = ReplicateResult { runs, buckets };
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    write_json(&cfg.output_dir.join("replicates.json"), &out)?;
    Ok(out)
}

/// Re-aggregates stored per-scene counts of a run, for reports.
pub fn rebuild_buckets(result: &RunResult) -> Vec<BucketReport> {
    let scenes: Vec<(String, TestBucket, ConfusionCounts)> = result
        .buckets
        .iter()
        .flat_map(|b| b.scenes.iter().cloned().zip(b.scene_counts.iter().copied()).map(move |(s, c)| (s, b.bucket, c)))
        .collect();
    aggregate_buckets(&scenes, &TestBucket::ALL)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip_and_overrides() {
        let mut c = ExperimentConfig::new(Task::Fsl, "m.json", "out");
        let back = ExperimentConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        c.apply_override("epochs=7").unwrap();
        c.apply_override("model.base_filters=8").unwrap();
        c.apply_override("trainability=D").unwrap();
        assert_eq!((c.epochs, c.model.base_filters, c.trainability), (7, 8, Trainability::DecoderOnly));
        c.apply_override("init={from-checkpoint=\"a.ckpt\"}").unwrap();
        assert_eq!(c.init, Init::FromCheckpoint("a.ckpt".into()));
        assert!(c.apply_override("model.nope=1").is_err());
        assert!(c.apply_override("bogus=1").is_err());
        assert!(c.apply_override("epochs=many").is_err());
        assert!(ExperimentConfig::from_toml_str("task = \"fsl\"\nmanifest = \"m\"\noutput_dir = \"o\"\nextra = 1").is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = ExperimentConfig::new(Task::Fsl, "m.json", "out");
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn validation_rules() {
        let mut c = ExperimentConfig::new(Task::Dst, "m", "o");
        assert!(c.validate().unwrap_err().is_config());
        c.init = Init::FromCheckpoint("x".into());
        c.validate().unwrap();
        c.label_fraction = 0.5;
        assert!(c.validate().is_err());
        let mut p = ExperimentConfig::new(Task::SslInpainting, "m", "o");
        p.label_fraction = 0.5;
        p.validate().unwrap();
        p.data.patch_size = 120;
        assert!(p.validate().is_err());
    }

    #[test]
    fn replicate_summary_is_exact_mean() {
        let mk = |f1w: f64| {
            let report = MetricsReport {
                f1w,
                ..metrics(&ConfusionCounts { tp: 1, fp: 0, fn_: 0, tn: 1 }, "short")
            };
            RunResult {
                task: Task::Fsl,
                seed: 0,
                config_digest: String::new(),
                train_loss: vec![],
                val_loss: vec![],
                initial_val_loss: 0.0,
                best_epoch: 0,
                best_val_loss: 0.0,
                checkpoint: PathBuf::new(),
                run_dir: PathBuf::new(),
                train_scenes: vec![],
                val_scenes: vec![],
                val_report: None,
                buckets: vec![BucketReport {
                    bucket: TestBucket::Short,
                    scenes: vec!["a".into()],
                    scene_counts: vec![report.counts],
                    report: Some(report),
                }],
            }
        };
        let runs: Vec<_> = [0.9194, 0.9208, 0.9205].into_iter().map(mk).collect();
        let s = summarize(&runs);
        let mean = s[0].mean.unwrap().f1w;
        assert_eq!(mean, (0.9194 + 0.9208 + 0.9205) / 3.0);
        assert!((mean - 0.9202).abs() < 5e-5);
        assert_eq!(summarize(&runs[..1])[0].mean.unwrap().f1w, 0.9194);
        assert!(s[1].mean.is_none());
    }
}
