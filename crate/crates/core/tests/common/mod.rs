#![allow(dead_code)]

use std::path::{Path, PathBuf};

use forestssl::dataset::{build_manifest, Manifest, SplitPolicy};
use forestssl::models::{EncoderSchema, Task};
use forestssl::scene_io::write_scene;
use forestssl::scene_synth::{sample_geometries, simulate_scene, SynthParams};
use forestssl::training::ExperimentConfig;

/// Writes `n` synthetic scenes of `size` px and a manifest; returns the manifest path.
pub fn synth_dataset(dir: &Path, n: usize, size: usize, seed: u64) -> PathBuf {
    synth_dataset_with(dir, n, size, seed, &SynthParams::default())
}

pub fn synth_dataset_with(dir: &Path, n: usize, size: usize, seed: u64, base: &SynthParams) -> PathBuf {
    let geoms = sample_geometries(n, 20.0, 120.0, seed);
    let paths: Vec<PathBuf> = geoms
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let params = SynthParams {
                size_px: size,
                seed: seed * 10_000 + i as u64,
                ..base.clone()
            };
            write_scene(&dir.join("scenes"), &simulate_scene(&params, g).unwrap()).unwrap()
        })
        .collect();
    let manifest = build_manifest(&paths, &SplitPolicy { seed, ..Default::default() }).unwrap();
    let path = dir.join("manifest.json");
    manifest.save(&path).unwrap();
    path
}

pub fn load(path: &Path) -> Manifest {
    Manifest::load(path).unwrap()
}

/// A small, fast configuration.
pub fn tiny_config(task: Task, manifest: &Path, out: &Path, patch: usize) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(task, manifest, out);
    c.model = EncoderSchema {
        in_channels: 5,
        base_filters: 4,
        n_levels: 2,
    };
    c.data.patch_size = patch;
    c.data.stride = patch;
    c.epochs = 3;
    c.batch_size = 8;
    c.learning_rate = 1e-3;
    c
}
