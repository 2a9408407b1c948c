//! The experiment matrix: baseline, FSL and four transfer variants over label
//! fractions and replicate seeds, with Fig.-3-style and appendix-style tables.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::{error, info};
use serde::{Deserialize, Serialize};

use crate::evaluation::{table_csv, table_text, TableRow, TestBucket};
use crate::models::{EncoderSchema, Task, Trainability};
use crate::training::{self, summarize, BucketSummary, DataConfig, ExperimentConfig, Init, RunResult};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Approach {
    Baseline,
    Fsl,
    SslIdEd,
    SslIdD,
    SslInEd,
    SslInD,
}

impl Approach {
    pub const ALL: [Approach; 6] = [
        Approach::Baseline,
        Approach::Fsl,
        Approach::SslIdEd,
        Approach::SslIdD,
        Approach::SslInEd,
        Approach::SslInD,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Approach::Baseline => "Baseline",
            Approach::Fsl => "FSL",
            Approach::SslIdEd => "SSL-Id E+D",
            Approach::SslIdD => "SSL-Id D",
            Approach::SslInEd => "SSL-In E+D",
            Approach::SslInD => "SSL-In D",
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            Approach::Baseline => "baseline",
            Approach::Fsl => "fsl",
            Approach::SslIdEd => "ssl-id-ed",
            Approach::SslIdD => "ssl-id-d",
            Approach::SslInEd => "ssl-in-ed",
            Approach::SslInD => "ssl-in-d",
        }
    }

    /// Pretext task and trainability for transfer approaches.
    pub fn transfer(self) -> Option<(Task, Trainability)> {
        match self {
            Approach::SslIdEd => Some((Task::SslIdentity, Trainability::EncoderDecoder)),
            Approach::SslIdD => Some((Task::SslIdentity, Trainability::DecoderOnly)),
            Approach::SslInEd => Some((Task::SslInpainting, Trainability::EncoderDecoder)),
            Approach::SslInD => Some((Task::SslInpainting, Trainability::DecoderOnly)),
            _ => None,
        }
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Approach {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Approach::ALL
            .into_iter()
            .find(|a| a.id() == s || a.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown approach `{s}`")))
    }
}

fn default_fractions() -> Vec<f64> {
    vec![0.015, 0.08, 0.22]
}
fn default_approaches() -> Vec<Approach> {
    Approach::ALL.to_vec()
}
fn default_replicates() -> usize {
    3
}
fn default_epochs() -> usize {
    50
}
fn default_batch() -> usize {
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
fn default_jobs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_approaches")]
    pub approaches: Vec<Approach>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Pretext epochs; defaults to `epochs`.
    #[serde(default)]
    pub pretext_epochs: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default)]
    pub model: EncoderSchema,
    #[serde(default)]
    pub data: DataConfig,
}

impl MatrixConfig {
    pub fn new(manifest: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            output_dir: output_dir.into(),
            seed: 0,
            replicates: default_replicates(),
            fractions: default_fractions(),
            approaches: default_approaches(),
            epochs: default_epochs(),
            pretext_epochs: None,
            batch_size: default_batch(),
            learning_rate: default_lr(),
            patience: default_patience(),
            threshold: default_threshold(),
            jobs: default_jobs(),
            model: EncoderSchema::default(),
            data: DataConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 || self.jobs == 0 {
            return Err(Error::Config("replicates and jobs must be > 0".into()));
        }
        if self.fractions.is_empty() && self.approaches.iter().any(|a| *a != Approach::Baseline) {
            return Err(Error::Config("no label fractions given".into()));
        }
        for &f in &self.fractions {
            self.experiment(Task::Fsl, f, self.seed, PathBuf::new()).validate()?;
        }
        Ok(())
    }

    fn experiment(&self, task: Task, fraction: f64, seed: u64, out: PathBuf) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(task, &self.manifest, out);
        c.label_fraction = fraction;
        c.epochs = match task {
            Task::SslIdentity | Task::SslInpainting => self.pretext_epochs.unwrap_or(self.epochs),
            _ => self.epochs,
        };
        c.batch_size = self.batch_size;
        c.learning_rate = self.learning_rate;
        c.seed = seed;
        c.patience = self.patience;
        c.threshold = self.threshold;
        c.model = self.model;
        c.data = self.data.clone();
        c
    }

    fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.replicates as u64).map(move |i| self.seed + i)
    }

    fn pretext_config(&self, task: Task, seed: u64) -> ExperimentConfig {
        let out = self.output_dir.join("pretext").join(task.as_str()).join(format!("seed-{seed}"));
        self.experiment(task, 1.0, seed, out)
    }

    fn cell_config(&self, approach: Approach, fraction: f64, seed: u64) -> ExperimentConfig {
        let out = self
            .output_dir
            .join("cells")
            .join(approach.id())
            .join(fraction_id(fraction))
            .join(format!("seed-{seed}"));
        match approach.transfer() {
            None => self.experiment(Task::Fsl, fraction, seed, out),
            Some((pretext, mode)) => {
                let mut c = self.experiment(Task::Dst, fraction, seed, out);
                c.init = Init::FromCheckpoint(self.pretext_config(pretext, seed).output_dir.join("best.ckpt"));
                c.trainability = mode;
                c
            }
        }
    }

    /// Every segmentation run of the matrix in a fixed order.
    pub fn cells(&self) -> Vec<(Approach, f64, u64, ExperimentConfig)> {
        let mut out = Vec::new();
        for &a in &self.approaches {
            let fractions = if a == Approach::Baseline {
                vec![1.0]
            } else {
                self.fractions.clone()
            };
            for f in fractions {
                for s in self.seeds() {
                    out.push((a, f, s, self.cell_config(a, f, s)));
                }
            }
        }
        out
    }

    /// Pretext runs needed by the selected approaches.
    pub fn pretext_runs(&self) -> Vec<ExperimentConfig> {
        let mut tasks = Vec::new();
        for (t, _) in self.approaches.iter().filter_map(|a| a.transfer()) {
            if !tasks.contains(&t) {
                tasks.push(t);
            }
        }
        let mut out = Vec::new();
        for t in tasks {
            out.extend(self.seeds().map(|s| self.pretext_config(t, s)));
        }
        out
    }
}

pub fn fraction_id(f: f64) -> String {
    format!("{}pct", f * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub config_digest: String,
    pub run_dir: PathBuf,
    pub result: RunResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub approach: Approach,
    pub fraction: f64,
    pub runs: Vec<RunRecord>,
    pub buckets: Vec<BucketSummary>,
}

impl CellResult {
    pub fn mean_f1w(&self, b: TestBucket) -> Option<f64> {
        self.buckets.iter().find(|s| s.bucket == b).and_then(|s| s.mean).map(|m| m.f1w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub run: String,
    pub config_digest: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretextRecord {
    pub task: Task,
    pub seed: u64,
    pub config_digest: String,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub config: MatrixConfig,
    pub pretext: Vec<PretextRecord>,
    pub cells: Vec<CellResult>,
    pub failures: Vec<Failure>,
}

/// One line of the Fig.-3-style table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig3Row {
    pub approach: Approach,
    pub fraction: f64,
    pub bucket: TestBucket,
    pub f1w: Option<f64>,
    pub n_runs: usize,
}

impl MatrixReport {
    pub fn cell(&self, a: Approach, fraction: f64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.approach == a && (c.fraction - fraction).abs() < 1e-12)
    }

    /// F1w means per approach, fraction and h_amb bucket. The baseline has a single
    /// (100 %) cell and is repeated at every fraction.
    pub fn fig3_rows(&self) -> Vec<Fig3Row> {
        let mut rows = Vec::new();
        for &a in &self.config.approaches {
            for &f in &self.config.fractions {
                let cell = if a == Approach::Baseline {
                    self.cell(a, 1.0)
                } else {
                    self.cell(a, f)
                };
                for b in TestBucket::HAMB {
                    let summary = cell.and_then(|c| c.buckets.iter().find(|s| s.bucket == b));
                    rows.push(Fig3Row {
                        approach: a,
                        fraction: f,
                        bucket: b,
                        f1w: summary.and_then(|s| s.mean).map(|m| m.f1w),
                        n_runs: summary.map_or(0, |s| s.runs.len()),
                    });
                }
            }
        }
        rows
    }

    /// Appendix-style rows for one bucket at one label fraction: each approach
    /// with its runs and their mean.
    pub fn appendix_rows(&self, bucket: TestBucket, fraction: f64) -> Vec<TableRow> {
        let mut rows = Vec::new();
        for &a in &self.config.approaches {
            let cell = if a == Approach::Baseline {
                self.cell(a, 1.0)
            } else {
                self.cell(a, fraction)
            };
            let Some(s) = cell.and_then(|c| c.buckets.iter().find(|s| s.bucket == bucket)) else {
                continue;
            };
            for (i, m) in s.runs.iter().enumerate() {
                rows.push(TableRow {
                    subset: bucket.id().into(),
                    approach: a.label().into(),
                    run: (i + 1).to_string(),
                    metrics: *m,
                });
            }
            if let Some(m) = s.mean {
                rows.push(TableRow {
                    subset: bucket.id().into(),
                    approach: a.label().into(),
                    run: "Mean".into(),
                    metrics: m,
                });
            }
        }
        rows
    }

    pub fn fig3_csv(&self) -> String {
        let mut s = String::from("approach,fraction,bucket,f1w,n_runs\n");
        for r in self.fig3_rows() {
            let v = r.f1w.map(|v| format!("{v:.17e}")).unwrap_or_default();
            s.push_str(&format!("{},{},{},{v},{}\n", r.approach.label(), r.fraction, r.bucket, r.n_runs));
        }
        s
    }

    pub fn digests_csv(&self) -> String {
        let mut s = String::from("kind,approach,fraction,seed,config_digest,run_dir\n");
        for p in &self.pretext {
            s.push_str(&format!(
                "pretext,{},,{},{},{}\n",
                p.task,
                p.seed,
                p.config_digest,
                p.checkpoint.parent().map(|d| d.display().to_string()).unwrap_or_default()
            ));
        }
        for c in &self.cells {
            for r in &c.runs {
                s.push_str(&format!(
                    "segmentation,{},{},{},{},{}\n",
                    c.approach.label(),
                    c.fraction,
                    r.seed,
                    r.config_digest,
                    r.run_dir.display()
                ));
            }
        }
        s
    }

    /// Writes `matrix.json`, `fig3.csv`, `digests.csv`, `failures.csv` and one
    /// appendix table per bucket and fraction (CSV and text).
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put(
            "matrix.json",
            serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?,
        )?;
        put("fig3.csv", self.fig3_csv())?;
        put("digests.csv", self.digests_csv())?;
        let mut failures = String::from("run,config_digest,error\n");
        for f in &self.failures {
            failures.push_str(&format!("{},{},\"{}\"\n", f.run, f.config_digest, f.error.replace('"', "'")));
        }
        put("failures.csv", failures)?;
        for b in TestBucket::ALL {
            for &f in &self.config.fractions {
                let rows = self.appendix_rows(b, f);
                let stem = format!("table-{}-{}", b.id(), fraction_id(f));
                put(&format!("{stem}.csv"), table_csv(&rows))?;
                put(&format!("{stem}.txt"), table_text(&rows))?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

fn run_label(c: &ExperimentConfig) -> String {
    c.output_dir.display().to_string()
}

/// Runs `jobs` at a time; results come back in input order.
fn parallel<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if jobs <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = Mutex::new(0usize);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(items.len()) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                out.lock().expect("lock")[i] = Some(r);
            });
        }
    });
    out.into_inner().expect("lock").into_iter().map(|r| r.expect("every item ran")).collect()
}

/// Runs pretext training, then every matrix cell. Failed runs are recorded and
/// skipped; a transfer cell whose pretext run failed fails too.
pub fn run_matrix(cfg: &MatrixConfig) -> Result<MatrixReport> {
    cfg.validate()?;
    let mut failures = Vec::new();
    let mut pretext = Vec::new();
    let pre_cfgs = cfg.pretext_runs();
    let pre_results = parallel(&pre_cfgs, cfg.jobs, |c| {
        info!("pretext {} seed {}", c.task, c.seed);
        training::train_pretext(c)
    });
    for (c, r) in pre_cfgs.iter().zip(pre_results) {
        match r {
            Ok(run) => pretext.push(PretextRecord {
                task: c.task,
                seed: c.seed,
                config_digest: run.result.config_digest,
                checkpoint: run.result.checkpoint,
            }),
            Err(e) => {
                error!("{}: {e}", run_label(c));
                failures.push(Failure {
                    run: run_label(c),
                    config_digest: c.digest(),
                    error: e.to_string(),
                });
            }
        }
    }

    let cells = cfg.cells();
    let results = parallel(&cells, cfg.jobs, |(a, f, s, c)| {
        info!("{a} at {f} seed {s}");
        training::train_segmentation(c)
    });
    let mut grouped: BTreeMap<(Approach, u64), (f64, Vec<RunRecord>)> = BTreeMap::new();
    for ((a, f, s, c), r) in cells.iter().zip(results) {
        let entry = grouped.entry((*a, f.to_bits())).or_insert_with(|| (*f, Vec::new()));
        match r {
            Ok(run) => entry.1.push(RunRecord {
                seed: *s,
                config_digest: run.result.config_digest.clone(),
                run_dir: run.result.run_dir.clone(),
                result: run.result,
            }),
            Err(e) => {
                error!("{}: {e}", run_label(c));
                failures.push(Failure {
                    run: run_label(c),
                    config_digest: c.digest(),
                    error: e.to_string(),
                });
            }
        }
    }
    let cells = grouped
        .into_iter()
        .map(|((approach, _), (fraction, runs))| {
            let results: Vec<RunResult> = runs.iter().map(|r| r.result.clone()).collect();
            CellResult {
                approach,
                fraction,
                buckets: summarize(&results),
                runs,
            }
        })
        .collect();
    let report = MatrixReport {
        config: cfg.clone(),
        pretext,
        cells,
        failures,
    };
    report.write(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("matrix.toml"), cfg.to_toml()).map_err(|e| Error::io(&cfg.output_dir, e))?;
    Ok(report)
}
