//! Scene container: band-sequential little-endian `f32` raster file plus a TOML
//! sidecar with shape, band names, geometry, seed and scene id.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::scene_synth::{InSARScene, OrbitDir, SceneGeometry};

pub const BAND_NAMES: [&str; 7] = [
    "beta0",
    "gamma_tot",
    "gamma_vol",
    "theta_i",
    "h_amb",
    "valid",
    "label",
];

pub const DATA_EXT: &str = "bin";
pub const SIDECAR_EXT: &str = "toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSidecar {
    pub scene_id: String,
    pub rows: usize,
    pub cols: usize,
    pub bands: Vec<String>,
    pub dtype: String,
    pub byte_order: String,
    pub seed: u64,
    pub h_amb_m: f64,
    pub forest_fraction: f64,
    pub lambda_m: f64,
    pub slant_range_m: f64,
    pub eta_deg: f64,
    pub b_perp_m: f64,
    pub orbit_dir: OrbitDir,
    pub year: i32,
}

impl SceneSidecar {
    pub fn geometry(&self) -> SceneGeometry {
        SceneGeometry {
            lambda_m: self.lambda_m,
            slant_range_m: self.slant_range_m,
            eta_deg: self.eta_deg,
            b_perp_m: self.b_perp_m,
            orbit_dir: self.orbit_dir,
            year: self.year,
        }
    }
}

pub fn sidecar_path(data_path: &Path) -> PathBuf {
    data_path.with_extension(SIDECAR_EXT)
}

pub fn sidecar_for(scene: &InSARScene) -> SceneSidecar {
    let g = scene.geometry;
    SceneSidecar {
        scene_id: scene.scene_id.clone(),
        rows: scene.label.rows(),
        cols: scene.label.cols(),
        bands: BAND_NAMES.iter().map(|s| s.to_string()).collect(),
        dtype: "float32".into(),
        byte_order: "little".into(),
        seed: scene.seed,
        h_amb_m: scene.h_amb_m(),
        forest_fraction: scene.forest_fraction(),
        lambda_m: g.lambda_m,
        slant_range_m: g.slant_range_m,
        eta_deg: g.eta_deg,
        b_perp_m: g.b_perp_m,
        orbit_dir: g.orbit_dir,
        year: g.year,
    }
}

/// Writes `<dir>/<scene_id>.bin` and its sidecar; returns the data path.
pub fn write_scene(dir: &Path, scene: &InSARScene) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data_path = dir.join(format!("{}.{DATA_EXT}", scene.scene_id));
    let n = scene.label.len();
    let mut bytes = Vec::with_capacity(n * 4 * BAND_NAMES.len());
    for band in scene.feature_bands() {
        for v in band.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    for band in [&scene.valid, &scene.label] {
        for &v in band.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(&data_path, &bytes).map_err(|e| Error::io(&data_path, e))?;

    let sidecar = toml::to_string(&sidecar_for(scene)).map_err(|e| Error::Data(e.to_string()))?;
    let side_path = sidecar_path(&data_path);
    fs::write(&side_path, sidecar).map_err(|e| Error::io(&side_path, e))?;
    Ok(data_path)
}

pub fn read_sidecar(data_path: &Path) -> Result<SceneSidecar> {
    let side_path = sidecar_path(data_path);
    if !side_path.exists() {
        return Err(Error::MissingSidecar(data_path.to_path_buf()));
    }
    let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let sc: SceneSidecar =
        toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", side_path.display())))?;
    if sc.bands != BAND_NAMES {
        return Err(Error::Data(format!(
            "{}: unexpected band list {:?}",
            side_path.display(),
            sc.bands
        )));
    }
    Ok(sc)
}

pub fn read_scene(data_path: &Path) -> Result<InSARScene> {
    let sc = read_sidecar(data_path)?;
    let bytes = fs::read(data_path).map_err(|e| Error::io(data_path, e))?;
    let n = sc.rows * sc.cols;
    if bytes.len() != n * 4 * BAND_NAMES.len() {
        return Err(Error::Data(format!(
            "{}: expected {} bytes, found {}",
            data_path.display(),
            n * 4 * BAND_NAMES.len(),
            bytes.len()
        )));
    }
    let band = |k: usize| -> Vec<f32> {
        bytes[k * n * 4..(k + 1) * n * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect()
    };
    let float = |k: usize| Raster::from_vec(sc.rows, sc.cols, band(k));
    let binary = |k: usize| -> Result<Raster<u8>> {
        let v = band(k);
        if let Some(bad) = v.iter().find(|&&x| x != 0.0 && x != 1.0) {
            return Err(Error::Data(format!(
                "{}: band {} is not binary ({bad})",
                data_path.display(),
                BAND_NAMES[k]
            )));
        }
        Raster::from_vec(sc.rows, sc.cols, v.into_iter().map(|x| x as u8).collect())
    };
    Ok(InSARScene {
        beta0: float(0)?,
        gamma_tot: float(1)?,
        gamma_vol: float(2)?,
        theta_i: float(3)?,
        h_amb: float(4)?,
        valid: binary(5)?,
        label: binary(6)?,
        geometry: sc.geometry(),
        scene_id: sc.scene_id,
        seed: sc.seed,
    })
}
