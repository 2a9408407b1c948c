mod common;

use std::collections::BTreeSet;

use forestssl::dataset::{ChannelStats, Manifest, ManifestEntry, Split};
use forestssl::evaluation::TestBucket;
use forestssl::models::{load_checkpoint, Model, Task, Trainability};
use forestssl::raster::Raster;
use forestssl::scene_io::write_scene;
use forestssl::scene_synth::{InSARScene, OrbitDir, SceneGeometry, SynthParams};
use forestssl::training::{audit_isolation, run_replicates, train_pretext, train_segmentation, Init};
use tempfile::tempdir;

use common::{load, synth_dataset, synth_dataset_with, tiny_config};

#[test]
fn fsl_run_writes_artifacts_and_respects_test_isolation() {
    let dir = tempdir().unwrap();
    let manifest = synth_dataset(dir.path(), 12, 32, 1);
    let cfg = tiny_config(Task::Fsl, &manifest, &dir.path().join("run"), 32);
    let run = train_segmentation(&cfg).unwrap();
    let r = &run.result;
    assert_eq!(r.train_loss.len(), 3);
    assert!(r.val_loss.iter().all(|v| v.is_finite()));
    for f in ["best.ckpt", "losses.csv", "run.json", "report.json", "config.toml", "config.sha256"] {
        assert!(r.run_dir.join(f).exists(), "{f} missing");
    }
    let m = load(&manifest);
    audit_isolation(r, &m).unwrap();
    let test: BTreeSet<_> = m.split(Split::Test).map(|e| e.scene_id.clone()).collect();
    assert!(r.train_scenes.iter().all(|s| !test.contains(s)));
    let evaluated: BTreeSet<_> = r.buckets.iter().flat_map(|b| b.scenes.clone()).collect();
    assert_eq!(evaluated, test);

    let (loaded, header) = load_checkpoint(&r.checkpoint, Some(&cfg.model)).unwrap();
    assert_eq!(header.task, Task::Fsl);
    assert_eq!(header.config_digest, cfg.digest());
    assert_eq!(loaded.params, run.model.params);
}

#[test]
fn same_seed_reproduces_curves_and_metrics() {
    let dir = tempdir().unwrap();
    let manifest = synth_dataset(dir.path(), 8, 32, 2);
    let mut a = tiny_config(Task::SslInpainting, &manifest, &dir.path().join("a"), 32);
    a.data.balance_min_fraction = 0.0;
    let mut b = a.clone();
    b.output_dir = dir.path().join("b");
    let (ra, rb) = (train_pretext(&a).unwrap(), train_pretext(&b).unwrap());
    assert_eq!(ra.result.train_loss, rb.result.train_loss);
    assert_eq!(ra.result.val_loss, rb.result.val_loss);
    assert_eq!(ra.model.params, rb.model.params);
}

#[test]
fn inpainting_improves_validation_loss() {
    let dir = tempdir().unwrap();
    let manifest = synth_dataset(dir.path(), 12, 32, 3);
    let mut cfg = tiny_config(Task::SslInpainting, &manifest, &dir.path().join("run"), 32);
    cfg.data.balance_min_fraction = 0.0;
    cfg.epochs = 8;
    let r = train_pretext(&cfg).unwrap().result;
    assert!(r.best_val_loss < r.initial_val_loss);
    assert!(r.best_epoch > 0);
}

#[test]
fn identity_fits_a_constant_scene() {
    let dir = tempdir().unwrap();
    let n = 16;
    let geometry = SceneGeometry::with_hamb(50.0, 35.0, OrbitDir::Ascending, 2011);
    let constant = |v: f32| Raster::filled(n, n, v);
    let mut entries = Vec::new();
    for (i, split) in [Split::Train, Split::Val].into_iter().enumerate() {
        let scene = InSARScene {
            beta0: constant(0.3),
            gamma_tot: constant(-0.2),
            gamma_vol: constant(0.1),
            theta_i: constant(0.4),
            h_amb: constant(-0.3),
            valid: Raster::filled(n, n, 1),
            label: Raster::filled(n, n, 0),
            geometry,
            scene_id: format!("const_{i}"),
            seed: i as u64,
        };
        let path = write_scene(&dir.path().join("scenes"), &scene).unwrap();
        entries.push(ManifestEntry {
            scene_id: scene.scene_id.clone(),
            path,
            h_amb_m: 50.0,
            orbit_dir: OrbitDir::Ascending,
            year: 2011,
            forest_fraction: 0.5,
            n_pixels: n * n,
            split,
        });
    }
    let m = Manifest {
        entries,
        channel_stats: Some(ChannelStats {
            mean: [0.0; 5],
            std: [1.0; 5],
        }),
    };
    let mp = dir.path().join("m.json");
    m.save(&mp).unwrap();
    let mut cfg = tiny_config(Task::SslIdentity, &mp, &dir.path().join("run"), n);
    cfg.epochs = 3000;
    cfg.patience = 3000;
    cfg.learning_rate = 3e-3;
    let r = train_pretext(&cfg).unwrap().result;
    assert!(r.best_val_loss < 1e-3, "best val loss {}", r.best_val_loss);
}

#[test]
fn decoder_only_transfer_keeps_the_encoder_bitwise() {
    let dir = tempdir().unwrap();
    let manifest = synth_dataset(dir.path(), 12, 32, 4);
    let mut pre = tiny_config(Task::SslIdentity, &manifest, &dir.path().join("pre"), 32);
    pre.data.balance_min_fraction = 0.0;
    pre.epochs = 1;
    let source = train_pretext(&pre).unwrap();

    let mut cfg = tiny_config(Task::Dst, &manifest, &dir.path().join("dst"), 32);
    cfg.init = Init::FromCheckpoint(source.result.checkpoint.clone());
    cfg.trainability = Trainability::DecoderOnly;
    cfg.batch_size = 1;
    let dst = train_segmentation(&cfg).unwrap();
    let mut compared = 0;
    for p in dst.model.params.iter().filter(|p| Model::is_encoder_key(&p.name)) {
        let q = source.model.params.by_name(&p.name).unwrap();
        assert_eq!(p.value, q.value, "{} changed", p.name);
        compared += 1;
    }
    assert!(compared > 0);

    cfg.trainability = Trainability::EncoderDecoder;
    cfg.output_dir = dir.path().join("dst-ed");
    let ed = train_segmentation(&cfg).unwrap();
    assert!(ed.result.best_epoch > 0);
    let enc = ed.model.params.iter().find(|p| p.name.ends_with("conv.weight")).unwrap();
    assert_ne!(enc.value, source.model.params.by_name(&enc.name).unwrap().value);
}

#[test]
fn dst_rejects_missing_or_non_pretext_checkpoints() {
    let dir = tempdir().unwrap();
    let manifest = synth_dataset(dir.path(), 8, 32, 5);
    let cfg = tiny_config(Task::Dst, &manifest, &dir.path().join("dst"), 32);
    assert!(train_segmentation(&cfg).unwrap_err().is_config());

    let mut fsl = tiny_config(Task::Fsl, &manifest, &dir.path().join("fsl"), 32);
    fsl.epochs = 1;
    let ck = train_segmentation(&fsl).unwrap().result.checkpoint;
    let mut cfg = cfg;
    cfg.init = Init::FromCheckpoint(ck);
    assert!(train_segmentation(&cfg).unwrap_err().is_config());
}

#[test]
fn smaller_label_fraction_sees_fewer_scenes() {
    let dir = tempdir().unwrap();
    let manifest = synth_dataset(dir.path(), 16, 32, 6);
    let mut full = tiny_config(Task::Fsl, &manifest, &dir.path().join("full"), 32);
    full.epochs = 1;
    let mut few = full.clone();
    few.label_fraction = 0.015;
    few.output_dir = dir.path().join("few");
    let a = train_segmentation(&full).unwrap().result;
    let b = train_segmentation(&few).unwrap().result;
    assert!(a.train_scenes.len() > b.train_scenes.len());
    assert!(!b.train_scenes.is_empty());
}

#[test]
fn fsl_separates_an_easy_toy_within_ten_epochs() {
    let dir = tempdir().unwrap();
    let easy = SynthParams {
        speckle_looks: 64.0,
        smoothing_scale_px: 10.0,
        n_clearcuts: 0,
        n_roads: 0,
        ..Default::default()
    };
    let manifest = synth_dataset_with(dir.path(), 20, 64, 7, &easy);
    let mut cfg = tiny_config(Task::Fsl, &manifest, &dir.path().join("run"), 32);
    cfg.epochs = 10;
    cfg.batch_size = 2;
    cfg.learning_rate = 3e-3;
    let r = train_segmentation(&cfg).unwrap().result;
    let f1w = r.val_report.unwrap().f1w;
    assert!(f1w > 0.95, "val F1w {f1w}");
}

#[test]
fn replicates_use_consecutive_seeds() {
    let dir = tempdir().unwrap();
    let manifest = synth_dataset(dir.path(), 8, 32, 8);
    let mut cfg = tiny_config(Task::Fsl, &manifest, &dir.path().join("reps"), 32);
    cfg.epochs = 1;
    cfg.seed = 40;
    let rep = run_replicates(&cfg, 2).unwrap();
    assert_eq!(rep.runs.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![40, 41]);
    for b in TestBucket::ALL {
        let per: Vec<f64> = rep.runs.iter().filter_map(|r| r.bucket_f1w(b)).collect();
        match rep.mean_f1w(b) {
            Some(m) => assert_eq!(m, per.iter().sum::<f64>() / per.len() as f64),
            None => assert!(per.is_empty()),
        }
    }
    assert!(dir.path().join("reps/replicates.json").exists());
}
