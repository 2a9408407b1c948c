use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use forestssl::dataset::{build_manifest, manifest_stats, resample_majority, Manifest, Split, SplitPolicy};
use forestssl::evaluation::{
    binarize, bucket_evaluate, intercompare, predict_scene, render_confusion_map, table_csv, table_text,
    write_confusion_map, MapPair, MetricRow, TableRow, TestBucket,
};
use forestssl::matrix::{run_matrix, MatrixConfig};
use forestssl::models::load_checkpoint;
use forestssl::report::build_report;
use forestssl::scene_io::{read_scene, write_scene, DATA_EXT};
use forestssl::scene_synth::{sample_geometries, simulate_scene, SynthParams};
use forestssl::training::{apply_overrides, run, run_replicates, ExperimentConfig};
use forestssl::{Error, Result};

const OUT_ENV: &str = "FORESTSSL_OUT";

#[derive(Parser)]
#[command(name = "forestssl", version, about = "Self-supervised forest mapping on InSAR feature stacks")]
struct Cli {
    /// Only report warnings and errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    /// Per-epoch progress.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration field, e.g. `--set model.base_filters=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory. Defaults to `$FORESTSSL_OUT/<command>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate scenes and write them with a split manifest.
    Synth(Common),
    /// Build a manifest from a directory of scene files.
    Manifest {
        #[command(flatten)]
        common: Common,
        /// Directory holding `*.bin` scenes and their sidecars.
        #[arg(long)]
        scenes: PathBuf,
    },
    /// Train the autoencoder on a pretext task.
    TrainPretext(Common),
    /// Train a segmentation model (fsl or dst).
    TrainSeg {
        #[command(flatten)]
        common: Common,
        /// Run this many replicates with consecutive seeds.
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Run the full approach x label-fraction x replicate matrix.
    Matrix {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Evaluate a finished segmentation run on the test buckets.
    Evaluate {
        /// Run directory (holds config.toml and best.ckpt).
        #[arg(long)]
        run: PathBuf,
        /// Evaluate against another manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write confusion maps.
        #[arg(long)]
        maps: bool,
    },
    /// Compare a run's test maps with reference maps on a coarser grid.
    Intercompare {
        #[arg(long)]
        run: PathBuf,
        /// Pixel spacing of our maps in metres.
        #[arg(long, default_value_t = 6.0)]
        ours_res: f64,
        /// Pixel spacing of the reference maps in metres.
        #[arg(long, default_value_t = 10.0)]
        reference_res: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Charts, value tables and confusion panels from matrix or run directories.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip confusion panels.
        #[arg(long)]
        no_panels: bool,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthConfig {
    #[serde(default = "default_n_scenes")]
    n_scenes: usize,
    #[serde(default = "default_hamb_min")]
    hamb_min_m: f64,
    #[serde(default = "default_hamb_max")]
    hamb_max_m: f64,
    #[serde(default)]
    seed: u64,
    /// Channel statistics over train and unlabeled scenes, stored in the manifest.
    #[serde(default = "yes")]
    compute_stats: bool,
    #[serde(default = "default_patch")]
    stats_patch_size: usize,
    #[serde(default)]
    scene: SynthParams,
    #[serde(default)]
    split: SplitPolicy,
}

fn default_n_scenes() -> usize {
    100
}
fn default_hamb_min() -> f64 {
    20.0
}
fn default_hamb_max() -> f64 {
    120.0
}
fn yes() -> bool {
    true
}
fn default_patch() -> usize {
    128
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestConfig {
    #[serde(default)]
    split: SplitPolicy,
    #[serde(default = "yes")]
    compute_stats: bool,
    #[serde(default = "default_patch")]
    stats_patch_size: usize,
}

fn out_dir(explicit: Option<&PathBuf>, command: &str) -> PathBuf {
    match explicit {
        Some(p) => p.clone(),
        None => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("forestssl-out"))
            .join(command),
    }
}

fn read_config(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn load_toml<T: serde::de::DeserializeOwned>(path: Option<&PathBuf>, fallback: Option<&str>) -> Result<T> {
    let text = match (path, fallback) {
        (Some(p), _) => read_config(p)?,
        (None, Some(f)) => f.to_string(),
        (None, None) => return Err(Error::Config("--config is required".into())),
    };
    toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn with_stats(mut m: Manifest, enabled: bool, patch: usize) -> Result<Manifest> {
    let has_pool = m.entries.iter().any(|e| matches!(e.split, Split::Train | Split::Unlabeled));
    if enabled && has_pool {
        m.channel_stats = Some(manifest_stats(&m, patch, patch)?);
    }
    Ok(m)
}

fn cmd_synth(c: &Common) -> Result<()> {
    let mut cfg: SynthConfig = load_toml(c.config.as_ref(), Some(""))?;
    cfg = apply_overrides(&cfg, &c.sets)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.scene.validate()?;
    if !(cfg.hamb_min_m > 0.0 && cfg.hamb_max_m >= cfg.hamb_min_m) {
        return Err(Error::Config("need 0 < hamb_min_m <= hamb_max_m".into()));
    }
    let out = out_dir(c.out.as_ref(), "synth");
    let scene_dir = out.join("scenes");
    fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
    let geoms = sample_geometries(cfg.n_scenes, cfg.hamb_min_m, cfg.hamb_max_m, cfg.seed);
    let mut paths = Vec::with_capacity(geoms.len());
    for (i, g) in geoms.iter().enumerate() {
        let params = SynthParams {
            seed: cfg.seed * 1_000_000 + i as u64,
            ..cfg.scene.clone()
        };
        paths.push(write_scene(&scene_dir, &simulate_scene(&params, g)?)?);
    }
    let split = SplitPolicy { seed: cfg.seed, ..cfg.split };
    let manifest = with_stats(build_manifest(&paths, &split)?, cfg.compute_stats, cfg.stats_patch_size)?;
    manifest.save(&out.join("manifest.json"))?;
    fs::write(out.join("synth.toml"), toml::to_string(&cfg).map_err(|e| Error::Data(e.to_string()))?)
        .map_err(|e| Error::io(&out, e))?;
    info!("wrote {} scenes to {}", paths.len(), scene_dir.display());
    Ok(())
}

fn cmd_manifest(c: &Common, scenes: &Path) -> Result<()> {
    let mut cfg: ManifestConfig = load_toml(c.config.as_ref(), Some(""))?;
    cfg = apply_overrides(&cfg, &c.sets)?;
    if let Some(s) = c.seed {
        cfg.split.seed = s;
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(scenes)
        .map_err(|e| Error::io(scenes, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == DATA_EXT))
        .collect();
    paths.sort();
    let manifest = with_stats(build_manifest(&paths, &cfg.split)?, cfg.compute_stats, cfg.stats_patch_size)?;
    let out = out_dir(c.out.as_ref(), "manifest");
    manifest.save(&out.join("manifest.json"))?;
    info!("manifest of {} scenes in {}", manifest.len(), out.display());
    Ok(())
}

fn experiment(c: &Common) -> Result<ExperimentConfig> {
    let path = c.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = apply_overrides(&ExperimentConfig::from_toml_str(&read_config(path)?)?, &c.sets)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(c: &Common, pretext: bool, replicates: Option<usize>) -> Result<()> {
    let cfg = experiment(c)?;
    if pretext != cfg.is_pretext() {
        return Err(Error::Config(format!(
            "task {} does not belong to {}",
            cfg.task,
            if pretext { "train-pretext" } else { "train-seg" }
        )));
    }
    info!("{} config digest {}", cfg.task, cfg.digest());
    match replicates {
        Some(n) => {
            let r = run_replicates(&cfg, n)?;
            for b in TestBucket::ALL {
                if let Some(v) = r.mean_f1w(b) {
                    info!("{b}: mean F1w {v:.4} over {n} runs");
                }
            }
        }
        None => {
            let r = run(&cfg)?.result;
            info!(
                "best epoch {} val loss {:.6}, checkpoint {}",
                r.best_epoch,
                r.best_val_loss,
                r.checkpoint.display()
            );
            for b in &r.buckets {
                if let Some(m) = &b.report {
                    info!("{}: F1w {:.4} OA {:.4}", b.bucket, m.f1w, m.oa);
                }
            }
        }
    }
    Ok(())
}

fn cmd_matrix(c: &Common, jobs: Option<usize>) -> Result<()> {
    let mut cfg: MatrixConfig = load_toml(c.config.as_ref(), None)?;
    cfg = apply_overrides(&cfg, &c.sets)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    let report = run_matrix(&cfg)?;
    for f in &report.failures {
        warn!("failed: {} ({})", f.run, f.error);
    }
    info!(
        "{} cells, {} failures, tables in {}",
        report.cells.len(),
        report.failures.len(),
        cfg.output_dir.display()
    );
    Ok(())
}

fn load_run(run_dir: &Path, manifest: Option<&PathBuf>) -> Result<(ExperimentConfig, forestssl::models::Model, Manifest)> {
    let cfg = ExperimentConfig::load(&run_dir.join("config.toml"))?;
    let (model, header) = load_checkpoint(&run_dir.join("best.ckpt"), Some(&cfg.model))?;
    info!("checkpoint config digest {}", header.config_digest);
    let m = Manifest::load(manifest.unwrap_or(&cfg.manifest))?;
    Ok((cfg, model, m))
}

fn stats_of(m: &Manifest, cfg: &ExperimentConfig) -> Result<forestssl::dataset::ChannelStats> {
    match m.channel_stats {
        Some(s) => Ok(s),
        None => manifest_stats(m, cfg.data.patch_size, cfg.data.stride),
    }
}

fn cmd_evaluate(run_dir: &Path, manifest: Option<&PathBuf>, out: Option<&PathBuf>, maps: bool) -> Result<()> {
    let (cfg, model, m) = load_run(run_dir, manifest)?;
    let stats = stats_of(&m, &cfg)?;
    let out = out_dir(out, "evaluate");
    let buckets = bucket_evaluate(&model, &m, &stats, &TestBucket::ALL, cfg.data.patch_size, cfg.threshold)?;
    let rows: Vec<TableRow> = buckets
        .iter()
        .filter_map(|b| {
            b.report.as_ref().map(|r| TableRow {
                subset: b.bucket.id().into(),
                approach: cfg.task.to_string(),
                run: cfg.seed.to_string(),
                metrics: MetricRow::from(r),
            })
        })
        .collect();
    write_json(&out.join("report.json"), &buckets)?;
    fs::write(out.join("metrics.csv"), table_csv(&rows)).map_err(|e| Error::io(&out, e))?;
    fs::write(out.join("metrics.txt"), table_text(&rows)).map_err(|e| Error::io(&out, e))?;
    if maps {
        for e in m.split(Split::Test) {
            let scene = read_scene(&e.path)?;
            let prob = predict_scene(&model, &scene, &stats, cfg.data.patch_size)?;
            let map = render_confusion_map(&prob, &scene.label, &scene.valid, cfg.threshold)?;
            write_confusion_map(&out.join("maps").join(format!("{}.png", scene.scene_id)), &map, &scene.scene_id, cfg.threshold)?;
        }
    }
    print!("{}", table_text(&rows));
    Ok(())
}

/// The synthetic truth, majority-resampled to the reference spacing, stands in for
/// an external reference map.
fn cmd_intercompare(run_dir: &Path, ours_res: f64, reference_res: f64, out: Option<&PathBuf>) -> Result<()> {
    let (cfg, model, m) = load_run(run_dir, None)?;
    let stats = stats_of(&m, &cfg)?;
    let mut pairs = Vec::new();
    for e in m.split(Split::Test) {
        let scene = read_scene(&e.path)?;
        let prob = predict_scene(&model, &scene, &stats, cfg.data.patch_size)?;
        pairs.push(MapPair {
            scene_id: scene.scene_id.clone(),
            ours: binarize(&prob, cfg.threshold),
            ours_res_m: ours_res,
            reference: resample_majority(&scene.label, ours_res, reference_res)?,
            reference_res_m: reference_res,
        });
    }
    let result = intercompare(&pairs)?;
    let out = out_dir(out, "intercompare");
    write_json(&out.join("intercomparison.json"), &result)?;
    let row = TableRow {
        subset: "intercomparison".into(),
        approach: cfg.task.to_string(),
        run: cfg.seed.to_string(),
        metrics: MetricRow::from(&result.overall),
    };
    print!("{}", table_text(&[row]));
    Ok(())
}

fn cmd_report(inputs: &[PathBuf], out: Option<&PathBuf>, panels: bool) -> Result<()> {
    let out = out_dir(out, "report");
    let s = build_report(inputs, &out, panels)?;
    for (p, why) in &s.skipped {
        warn!("skipped {}: {why}", p.display());
    }
    info!("{} charts, {} panels in {}", s.charts.len(), s.panels.len(), out.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_config() {
        2
    } else if e.is_data() {
        3
    } else {
        4
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet {
        "warn"
    } else if cli.verbose {
        "debug"
    } else {
        "info"
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Synth(c) => cmd_synth(c),
        Command::Manifest { common, scenes } => cmd_manifest(common, scenes),
        Command::TrainPretext(c) => cmd_train(c, true, None),
        Command::TrainSeg { common, replicates } => cmd_train(common, false, *replicates),
        Command::Matrix { common, jobs } => cmd_matrix(common, *jobs),
        Command::Evaluate { run, manifest, out, maps } => cmd_evaluate(run, manifest.as_ref(), out.as_ref(), *maps),
        Command::Intercompare {
            run,
            ours_res,
            reference_res,
            out,
        } => cmd_intercompare(run, *ours_res, *reference_res, out.as_ref()),
        Command::Report { inputs, out, no_panels } => cmd_report(inputs, out.as_ref(), !no_panels),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
