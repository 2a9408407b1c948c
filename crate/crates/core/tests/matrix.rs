mod common;

use forestssl::evaluation::{counts_from_map, read_rgb_png, TestBucket};
use forestssl::matrix::{run_matrix, Approach, MatrixConfig, MatrixReport};
use forestssl::models::EncoderSchema;
use forestssl::report::{build_report, chart_values};
use tempfile::tempdir;

use common::synth_dataset;

fn tiny_matrix(manifest: &std::path::Path, out: &std::path::Path) -> MatrixConfig {
    let mut c = MatrixConfig::new(manifest, out);
    c.model = EncoderSchema {
        in_channels: 5,
        base_filters: 4,
        n_levels: 2,
    };
    c.data.patch_size = 32;
    c.data.stride = 32;
    c.data.balance_min_fraction = 0.0;
    c.epochs = 1;
    c.batch_size = 4;
    c.learning_rate = 1e-3;
    c
}

#[test]
fn full_matrix_tables_charts_and_panels_agree() {
    let dir = tempdir().unwrap();
    let manifest = synth_dataset(dir.path(), 16, 32, 11);
    let mut cfg = tiny_matrix(&manifest, &dir.path().join("matrix"));
    cfg.jobs = 2;
    let report = run_matrix(&cfg).unwrap();
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    assert_eq!(report.pretext.len(), 6);
    assert_eq!(report.cells.len(), 1 + 5 * 3);
    assert!(report.cells.iter().all(|c| c.runs.len() == 3));

    let rows = report.fig3_rows();
    assert_eq!(rows.len(), 6 * 3 * 3);
    for r in rows.iter().filter(|r| r.f1w.is_some()) {
        assert_eq!(r.n_runs, 3);
    }
    let base: Vec<_> = rows.iter().filter(|r| r.approach == Approach::Baseline && r.bucket == TestBucket::Mid).collect();
    assert!(base.windows(2).all(|w| w[0].f1w == w[1].f1w));

    let digests = std::fs::read_to_string(dir.path().join("matrix/digests.csv")).unwrap();
    assert_eq!(digests.lines().count(), 1 + 6 + 16 * 3);
    for c in &report.cells {
        for r in &c.runs {
            assert!(digests.contains(&r.config_digest));
        }
    }
    assert_eq!(MatrixReport::load(&dir.path().join("matrix/matrix.json")).unwrap(), report);
    assert!(dir.path().join("matrix/table-short-1.5pct.csv").exists());

    let out = dir.path().join("report");
    let summary = build_report(&[dir.path().join("matrix"), dir.path().join("missing")], &out, true).unwrap();
    assert_eq!(summary.skipped.len(), 1);
    for chart in &summary.charts {
        let svg = std::fs::read_to_string(chart).unwrap();
        for (series, fraction, f1w) in chart_values(&svg) {
            let bucket = TestBucket::HAMB.into_iter().find(|b| chart.to_string_lossy().contains(b.id())).unwrap();
            let row = rows
                .iter()
                .find(|r| r.approach.label() == series && r.fraction == fraction && r.bucket == bucket)
                .unwrap();
            assert_eq!(row.f1w, Some(f1w));
        }
    }
    assert!(!summary.panels.is_empty());
    for p in &summary.panels {
        let tallied = counts_from_map(&read_rgb_png(&p.png).unwrap()).unwrap();
        assert_eq!(tallied, p.legend.counts);
        let run = report
            .cells
            .iter()
            .flat_map(|c| &c.runs)
            .find(|r| r.run_dir == p.run_dir)
            .unwrap();
        let stored = run
            .result
            .buckets
            .iter()
            .find_map(|b| b.scenes.iter().position(|s| *s == p.legend.scene_id).map(|i| b.scene_counts[i]))
            .unwrap();
        assert_eq!(tallied, stored);
    }
}

#[test]
fn failed_pretext_is_recorded_and_the_matrix_continues() {
    let dir = tempdir().unwrap();
    let manifest = synth_dataset(dir.path(), 12, 32, 12);
    let mut cfg = tiny_matrix(&manifest, &dir.path().join("matrix"));
    cfg.replicates = 1;
    cfg.fractions = vec![0.22];
    cfg.approaches = vec![Approach::Fsl, Approach::SslInEd];
    cfg.data.train_cap = 0;
    let report = run_matrix(&cfg).unwrap();
    assert!(report.pretext.is_empty());
    // one pretext failure and the transfer cell that needed it
    assert_eq!(report.failures.len(), 2);
    let fsl = report.cell(Approach::Fsl, 0.22).unwrap();
    assert_eq!(fsl.runs.len(), 1);
    assert!(dir.path().join("matrix/failures.csv").exists());
}

#[test]
fn single_run_report_has_one_point_per_bucket() {
    let dir = tempdir().unwrap();
    let manifest = synth_dataset(dir.path(), 12, 32, 13);
    let mut cfg = common::tiny_config(forestssl::models::Task::Fsl, &manifest, &dir.path().join("run"), 32);
    cfg.epochs = 1;
    let run = forestssl::training::train_segmentation(&cfg).unwrap().result;
    let summary = build_report(&[dir.path().join("run")], &dir.path().join("report"), false).unwrap();
    assert!(summary.skipped.is_empty());
    for chart in &summary.charts {
        let vals = chart_values(&std::fs::read_to_string(chart).unwrap());
        assert_eq!(vals.len(), 1);
        assert!(TestBucket::HAMB.iter().any(|&b| run.bucket_f1w(b) == Some(vals[0].2)));
    }
}
