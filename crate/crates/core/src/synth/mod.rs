//! Deterministic synthetic image pairs with exact ground-truth flow, and
//! the `.flo` / `.ppm` codecs and dataset manifests used to store them.
//!
//! Frame 1 is multi-octave value noise. Frame 2 is its bilinear backward
//! warp, `I2(y) = I1(y − b(y))`, so the forward flow `f` with
//! `x + f(x) = y` is known exactly.

pub mod codec;
mod manifest;
mod motion;
mod texture;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use manifest::{load_sample, write_dataset, Manifest, ManifestEntry};
pub use motion::{Blob, Motion, MIN_BLOB_SIGMA};
pub use texture::ValueNoise;

use crate::autodiff::kernels::bilinear_tap;
use crate::error::{Error, Result};
use crate::flownet::{FlowField, ValidMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowFamily {
    Translation,
    Affine,
    Blobs,
    /// Translation or blobs with equal probability per sample.
    Mixed,
}

impl FlowFamily {
    pub const ALL: [FlowFamily; 4] = [
        FlowFamily::Translation,
        FlowFamily::Affine,
        FlowFamily::Blobs,
        FlowFamily::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FlowFamily::Translation => "translation",
            FlowFamily::Affine => "affine",
            FlowFamily::Blobs => "blobs",
            FlowFamily::Mixed => "mixed",
        }
    }
}

impl fmt::Display for FlowFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FlowFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FlowFamily::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown flow family `{s}`")))
    }
}

/// Everything that determines one generated pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub family: FlowFamily,
    /// Bound on `|f|` in pixels.
    pub max_displacement: f64,
    pub octaves: usize,
    /// Exact displacement for the translation family instead of a random one.
    #[serde(default)]
    pub translation: Option<[f64; 2]>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            height: 96,
            width: 96,
            family: FlowFamily::Mixed,
            max_displacement: 8.0,
            octaves: 4,
            translation: None,
        }
    }
}

pub const MIN_OCTAVES: usize = 3;

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height < 2 || self.width < 2 {
            return bad(format!("image must be at least 2x2, got {}x{}", self.width, self.height));
        }
        let limit = self.height.min(self.width) as f64 / 4.0;
        if !(self.max_displacement >= 0.0 && self.max_displacement <= limit) {
            return bad(format!(
                "max_displacement {} must lie in [0, min(H, W)/4 = {limit}]",
                self.max_displacement
            ));
        }
        if self.octaves < MIN_OCTAVES {
            return bad(format!("octaves must be >= {MIN_OCTAVES}, got {}", self.octaves));
        }
        if let Some(t) = self.translation {
            if self.family != FlowFamily::Translation {
                return bad("a fixed translation needs the translation family".into());
            }
            if !(t[0].hypot(t[1]) <= self.max_displacement) {
                return bad(format!("translation {t:?} exceeds max_displacement"));
            }
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> GenConfig {
        GenConfig {
            seed,
            ..self.clone()
        }
    }
}

/// Two frames, the forward flow from frame 1 to frame 2, and the pixels
/// whose flow lands inside frame 2.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair<T> {
    pub image1: Tensor<T>,
    pub image2: Tensor<T>,
    pub flow: FlowField<T>,
    pub valid: ValidMask,
    pub motion: Motion,
}

/// Bilinear sample of an `[H,W,C]` image at `(x, y)`, clamped at the border.
pub fn sample_bilinear(image: &Tensor<f64>, x: f64, y: f64) -> Vec<f64> {
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let tap = bilinear_tap(x, y, w, h);
    (0..c)
        .map(|ch| (0..4).map(|q| tap.w[q] * image.data()[tap.idx[q] * c + ch]).sum())
        .collect()
}

/// Frame 2 at a real position `y`: frame 1 sampled at `y − b(y)`.
pub fn warped_at(image1: &Tensor<f64>, motion: &Motion, y: [f64; 2]) -> Vec<f64> {
    let b = motion.backward(y);
    sample_bilinear(image1, y[0] - b[0], y[1] - b[1])
}

pub fn gen_pair<T: Scalar>(config: &GenConfig) -> Result<SamplePair<T>> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise: Vec<ValueNoise> = (0..3)
        .map(|_| ValueNoise::new(w, h, config.octaves, &mut rng))
        .collect();
    let max = config.max_displacement;
    let family = match config.family {
        FlowFamily::Mixed if rng.random::<bool>() => FlowFamily::Translation,
        FlowFamily::Mixed => FlowFamily::Blobs,
        f => f,
    };
    let motion = match (family, config.translation) {
        (FlowFamily::Translation, Some(t)) => Motion::Translation(t),
        (FlowFamily::Translation, None) => Motion::random_translation(max, &mut rng),
        (FlowFamily::Affine, _) => Motion::random_affine(w, h, max, &mut rng),
        _ => Motion::random_blobs(w, h, max, &mut rng),
    };

    let image1 = Tensor::from_fn([h, w, 3], |i| {
        let p = i / 3;
        noise[i % 3].at((p % w) as f64, (p / w) as f64)
    });
    let mut image2 = Vec::with_capacity(h * w * 3);
    let mut flow = Vec::with_capacity(h * w * 2);
    let mut valid = Vec::with_capacity(h * w);
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    for y in 0..h {
        for x in 0..w {
            let p = [x as f64, y as f64];
            image2.extend(warped_at(&image1, &motion, p));
            let f = motion.forward(p);
            flow.extend(f);
            let (tx, ty) = (p[0] + f[0], p[1] + f[1]);
            valid.push((0.0..=xmax).contains(&tx) && (0.0..=ymax).contains(&ty));
        }
    }
    let image2 = Tensor::new([h, w, 3], image2)?;
    let flow = Tensor::new([h, w, 2], flow)?;
    Ok(SamplePair {
        image1: image1.cast(),
        image2: image2.cast(),
        flow: FlowField::new(flow.cast())?,
        valid: ValidMask::new(h, w, valid)?,
        motion,
    })
}

/// First seed of the held-out validation stream; training seeds stay below it.
pub const VALIDATION_SEED_BASE: u64 = 1 << 40;

/// Fixed held-out configurations. For the mixed family the set alternates
/// translation and blob samples so both are always represented.
pub fn validation_configs(base: &GenConfig, count: usize) -> Vec<GenConfig> {
    (0..count)
        .map(|i| {
            let mut c = base.with_seed(VALIDATION_SEED_BASE + i as u64);
            c.translation = None;
            if base.family == FlowFamily::Mixed {
                c.family = if i % 2 == 0 {
                    FlowFamily::Translation
                } else {
                    FlowFamily::Blobs
                };
            }
            c
        })
        .collect()
}

#[cfg(test)]
mod tests;
