use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flownet::{FlowField, ValidMask};
use crate::synth::codec::{read_flo_masked, read_ppm, write_flo_masked, write_ppm};
use crate::synth::{gen_pair, GenConfig};
use crate::tensor::Tensor;

/// One stored pair; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image1: PathBuf,
    pub image2: PathBuf,
    pub flow: PathBuf,
    pub seed: u64,
}

/// A JSON list of [`ManifestEntry`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Generates every config into `dir` (images as PPM, flow as `.flo` with
/// invalid pixels marked unknown) and writes `manifest.json` there.
pub fn write_dataset(dir: impl AsRef<Path>, configs: &[GenConfig]) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::default();
    for (i, cfg) in configs.iter().enumerate() {
        let pair = gen_pair::<f64>(cfg)?;
        let entry = ManifestEntry {
            image1: format!("{i:05}_img1.ppm").into(),
            image2: format!("{i:05}_img2.ppm").into(),
            flow: format!("{i:05}_flow.flo").into(),
            seed: cfg.seed,
        };
        write_ppm(&pair.image1, dir.join(&entry.image1))?;
        write_ppm(&pair.image2, dir.join(&entry.image2))?;
        write_flo_masked(&pair.flow, &pair.valid, dir.join(&entry.flow))?;
        manifest.entries.push(entry);
    }
    manifest.write(dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Frames, flow and validity of one entry, resolved against `base`.
pub fn load_sample(
    base: impl AsRef<Path>,
    entry: &ManifestEntry,
) -> Result<(Tensor<f32>, Tensor<f32>, FlowField<f32>, ValidMask)> {
    let base = base.as_ref();
    let i1 = read_ppm(base.join(&entry.image1))?;
    let i2 = read_ppm(base.join(&entry.image2))?;
    let (flow, valid) = read_flo_masked(base.join(&entry.flow))?;
    if i1.shape() != i2.shape() || i1.shape()[..2] != [flow.height(), flow.width()] {
        return Err(Error::shape(
            "load_sample",
            format!(
                "frames {:?} / {:?} vs flow {}x{}",
                i1.shape(),
                i2.shape(),
                flow.height(),
                flow.width()
            ),
        ));
    }
    Ok((i1, i2, flow, valid))
}
