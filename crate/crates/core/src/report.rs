//! F1w-vs-label-fraction charts (SVG) and confusion-map panels from finished runs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dataset::{manifest_stats, Manifest, Split};
use crate::evaluation::{predict_scene, render_confusion_map, write_confusion_map, MapLegend, TestBucket};
use crate::matrix::{Approach, MatrixReport};
use crate::models::{load_checkpoint, read_checkpoint_header, Task, Trainability};
use crate::scene_io::read_scene;
use crate::training::{ExperimentConfig, Init, RunResult};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartPoint {
    pub series: String,
    pub bucket: TestBucket,
    pub fraction: f64,
    pub f1w: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelRecord {
    pub run_dir: PathBuf,
    pub png: PathBuf,
    pub legend: MapLegend,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub points: Vec<ChartPoint>,
    pub charts: Vec<PathBuf>,
    pub panels: Vec<PanelRecord>,
    /// Inputs that were missing or unreadable, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

pub fn points_from_matrix(report: &MatrixReport) -> Vec<ChartPoint> {
    report
        .fig3_rows()
        .into_iter()
        .filter_map(|r| {
            r.f1w.map(|f1w| ChartPoint {
                series: r.approach.label().into(),
                bucket: r.bucket,
                fraction: r.fraction,
                f1w,
            })
        })
        .collect()
}

/// Series name of a single segmentation run, from its configuration.
pub fn series_label(cfg: &ExperimentConfig) -> String {
    match (&cfg.task, &cfg.init) {
        (Task::Dst, Init::FromCheckpoint(p)) => {
            let pretext = read_checkpoint_header(p).map(|h| h.task).ok();
            let approach = match (pretext, cfg.trainability) {
                (Some(Task::SslIdentity), Trainability::EncoderDecoder) => Some(Approach::SslIdEd),
                (Some(Task::SslIdentity), Trainability::DecoderOnly) => Some(Approach::SslIdD),
                (Some(Task::SslInpainting), Trainability::EncoderDecoder) => Some(Approach::SslInEd),
                (Some(Task::SslInpainting), Trainability::DecoderOnly) => Some(Approach::SslInD),
                _ => None,
            };
            approach.map_or_else(|| format!("DST {}", cfg.trainability), |a| a.label().into())
        }
        _ => Approach::Fsl.label().into(),
    }
}

pub fn points_from_run(cfg: &ExperimentConfig, result: &RunResult) -> Vec<ChartPoint> {
    let series = series_label(cfg);
    TestBucket::HAMB
        .iter()
        .filter_map(|&b| {
            result.bucket_f1w(b).map(|f1w| ChartPoint {
                series: series.clone(),
                bucket: b,
                fraction: cfg.label_fraction,
                f1w,
            })
        })
        .collect()
}

const PALETTE: [&str; 6] = ["#000000", "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line chart of F1w against label fraction for one bucket. Every plotted value is
/// also stored verbatim in a `data-f1w` attribute.
pub fn render_chart_svg(bucket: TestBucket, points: &[ChartPoint]) -> String {
    let (w, h, left, right, top, bottom) = (560.0, 360.0, 60.0, 160.0, 30.0, 50.0);
    let pts: Vec<&ChartPoint> = points.iter().filter(|p| p.bucket == bucket).collect();
    let mut fractions: Vec<f64> = pts.iter().map(|p| p.fraction).collect();
    fractions.sort_by(|a, b| a.total_cmp(b));
    fractions.dedup();
    let lo = pts.iter().map(|p| p.f1w).fold(1.0f64, f64::min);
    let y_min = ((lo - 0.05) * 10.0).floor() / 10.0;
    let y_min = y_min.clamp(0.0, 0.9);
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let x_of = |f: f64| {
        let i = fractions.iter().position(|&v| v == f).unwrap_or(0);
        if fractions.len() <= 1 {
            left + plot_w / 2.0
        } else {
            left + plot_w * i as f64 / (fractions.len() - 1) as f64
        }
    };
    let y_of = |v: f64| top + plot_h * (1.0 - (v - y_min) / (1.0 - y_min));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle" font-size="14">F1w, {} h_amb</text>"#,
        left + plot_w / 2.0,
        bucket
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        top + plot_h,
        left + plot_w,
        top + plot_h,
        top + plot_h
    );
    let mut tick = y_min;
    while tick <= 1.0 + 1e-9 {
        let y = y_of(tick);
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{y}" x2="{left}" y2="{y}" stroke="black"/><text x="{}" y="{}" text-anchor="end">{tick:.2}</text>"##,
            left - 4.0,
            left - 6.0,
            y + 4.0
        );
        tick += 0.05;
    }
    for &f in &fractions {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}%</text>"#,
            x_of(f),
            top + plot_h + 18.0,
            f * 100.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">labeled data</text>"#,
        left + plot_w / 2.0,
        h - 10.0
    );

    let mut series: Vec<&str> = Vec::new();
    for p in &pts {
        if !series.contains(&p.series.as_str()) {
            series.push(&p.series);
        }
    }
    for (k, name) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut line: Vec<&&ChartPoint> = pts.iter().filter(|p| p.series == *name).collect();
        line.sort_by(|a, b| a.fraction.total_cmp(&b.fraction));
        if line.len() > 1 {
            let coords: Vec<String> = line
                .iter()
                .map(|p| format!("{:.2},{:.2}", x_of(p.fraction), y_of(p.f1w)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                coords.join(" ")
            );
        }
        for p in &line {
            let _ = writeln!(
                s,
                r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}" data-series="{}" data-fraction="{}" data-f1w="{:e}"/>"#,
                x_of(p.fraction),
                y_of(p.f1w),
                esc(name),
                p.fraction,
                p.f1w
            );
        }
        let ly = top + 10.0 + 18.0 * k as f64;
        let lx = left + plot_w + 16.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            ly - 9.0,
            lx + 16.0,
            ly,
            esc(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Values of the `data-f1w` attributes of a chart, in document order.
pub fn chart_values(svg: &str) -> Vec<(String, f64, f64)> {
    let attr = |line: &str, key: &str| -> Option<String> {
        let start = line.find(&format!("{key}=\""))? + key.len() + 2;
        let end = line[start..].find('"')? + start;
        Some(line[start..end].to_string())
    };
    svg.lines()
        .filter(|l| l.contains("class=\"point\""))
        .filter_map(|l| {
            Some((
                attr(l, "data-series")?.replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">"),
                attr(l, "data-fraction")?.parse().ok()?,
                attr(l, "data-f1w")?.parse().ok()?,
            ))
        })
        .collect()
}

/// Renders confusion maps of every test scene for one segmentation run.
pub fn run_panels(run_dir: &Path, out: &Path) -> Result<Vec<PanelRecord>> {
    let cfg = ExperimentConfig::load(&run_dir.join("config.toml"))?;
    let (model, _) = load_checkpoint(&run_dir.join("best.ckpt"), Some(&cfg.model))?;
    let manifest = Manifest::load(&cfg.manifest)?;
    let stats = match manifest.channel_stats {
        Some(s) => s,
        None => manifest_stats(&manifest, cfg.data.patch_size, cfg.data.stride)?,
    };
    let mut out_panels = Vec::new();
    for e in manifest.split(Split::Test) {
        let scene = read_scene(&e.path)?;
        let prob = predict_scene(&model, &scene, &stats, cfg.data.patch_size)?;
        let map = render_confusion_map(&prob, &scene.label, &scene.valid, cfg.threshold)?;
        let png = out.join(format!("{}.png", scene.scene_id));
        let legend = write_confusion_map(&png, &map, &scene.scene_id, cfg.threshold)?;
        out_panels.push(PanelRecord {
            run_dir: run_dir.to_path_buf(),
            png,
            legend,
        });
    }
    Ok(out_panels)
}

fn panel_dir_name(run_dir: &Path) -> String {
    run_dir
        .components()
        .rev()
        .take(4)
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect::<Vec<_>>()
        .join("_")
}

/// Builds charts, a value table and (optionally) confusion panels from matrix or
/// run directories. Missing or unreadable inputs are listed and skipped.
pub fn build_report(inputs: &[PathBuf], out: &Path, panels: bool) -> Result<ReportSummary> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut summary = ReportSummary::default();
    let mut panel_runs: Vec<PathBuf> = Vec::new();
    for dir in inputs {
        let matrix = dir.join("matrix.json");
        let run = dir.join("run.json");
        let loaded: Result<()> = if matrix.exists() {
            MatrixReport::load(&matrix).map(|m| {
                summary.points.extend(points_from_matrix(&m));
                let lowest = m.config.fractions.iter().copied().fold(f64::INFINITY, f64::min);
                let mut seen = BTreeSet::new();
                for c in &m.cells {
                    let pick = c.approach == Approach::Baseline || c.fraction == lowest;
                    if let Some(r) = c.runs.first().filter(|_| pick && seen.insert(c.approach)) {
                        panel_runs.push(r.run_dir.clone());
                    }
                }
            })
        } else if run.exists() {
            (|| {
                let cfg = ExperimentConfig::load(&dir.join("config.toml"))?;
                let text = fs::read_to_string(&run).map_err(|e| Error::io(&run, e))?;
                let result: RunResult =
                    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", run.display())))?;
                if cfg.is_pretext() {
                    return Err(Error::Data("pretext run has no test metrics".into()));
                }
                summary.points.extend(points_from_run(&cfg, &result));
                panel_runs.push(dir.clone());
                Ok(())
            })()
        } else {
            Err(Error::Data("no matrix.json or run.json".into()))
        };
        if let Err(e) = loaded {
            warn!("skipping {}: {e}", dir.display());
            summary.skipped.push((dir.clone(), e.to_string()));
        }
    }

    let mut table = String::from("series,bucket,fraction,f1w\n");
    for p in &summary.points {
        let _ = writeln!(table, "{},{},{},{:e}", p.series, p.bucket, p.fraction, p.f1w);
    }
    let tp = out.join("chart-values.csv");
    fs::write(&tp, table).map_err(|e| Error::io(&tp, e))?;
    for b in TestBucket::HAMB {
        if !summary.points.iter().any(|p| p.bucket == b) {
            continue;
        }
        let path = out.join(format!("f1w-{}.svg", b.id()));
        fs::write(&path, render_chart_svg(b, &summary.points)).map_err(|e| Error::io(&path, e))?;
        summary.charts.push(path);
    }
    if panels {
        for dir in panel_runs {
            match run_panels(&dir, &out.join("panels").join(panel_dir_name(&dir))) {
                Ok(p) => summary.panels.extend(p),
                Err(e) => {
                    warn!("no panels for {}: {e}", dir.display());
                    summary.skipped.push((dir, e.to_string()));
                }
            }
        }
    }
    let sp = out.join("report.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&sp, text).map_err(|e| Error::io(&sp, e))?;
    Ok(summary)
}
