//! Seeded synthetic RGB/thermal feature-map pairs.
//!
//! Each scene is a sum of Gaussian blobs. A blob lands in one modality only
//! with probability `complementarity`, otherwise in both. The target is the
//! element-wise maximum of the two maps, which neither map carries alone
//! when blobs are exclusive.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticPairSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub blob_count: usize,
    pub seed: u64,
    /// Fraction of blobs visible in a single modality.
    pub complementarity: f64,
}

impl Default for SyntheticPairSpec {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            channels: 16,
            blob_count: 4,
            seed: 42,
            complementarity: 0.5,
        }
    }
}

impl SyntheticPairSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config(format!(
                "synthetic extents must be positive, got {}x{}x{}",
                self.height, self.width, self.channels
            )));
        }
        if !(0.0..=1.0).contains(&self.complementarity) {
            return Err(Error::Config(format!(
                "complementarity must lie in [0, 1], got {}",
                self.complementarity
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair<S> {
    pub rgb: FeatureMap<S>,
    pub thermal: FeatureMap<S>,
    pub target: FeatureMap<S>,
}

#[derive(Clone, Copy)]
enum Visibility {
    Both,
    RgbOnly,
    ThermalOnly,
}

pub fn gen_synthetic_pair<S: Scalar>(spec: &SyntheticPairSpec) -> Result<SyntheticPair<S>> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rgb = vec![0.0f64; h * w * c];
    let mut thermal = vec![0.0f64; h * w * c];
    let max_sigma = 0.5 + 0.15 * h.min(w) as f64;

    for _ in 0..spec.blob_count {
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let sigma = rng.gen_range(0.5..=max_sigma);
        let amplitude: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..1.0)).collect();
        let visibility = if rng.gen_bool(spec.complementarity) {
            if rng.gen_bool(0.5) {
                Visibility::RgbOnly
            } else {
                Visibility::ThermalOnly
            }
        } else {
            Visibility::Both
        };
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                let g = (-d2 / (2.0 * sigma * sigma)).exp();
                for (ch, a) in amplitude.iter().enumerate() {
                    let i = (y * w + x) * c + ch;
                    let v = a * g;
                    if !matches!(visibility, Visibility::ThermalOnly) {
                        rgb[i] += v;
                    }
                    if !matches!(visibility, Visibility::RgbOnly) {
                        thermal[i] += v;
                    }
                }
            }
        }
    }

    let shape = [h, w, c];
    let rgb = Tensor::<S>::from_f64(&shape, &rgb)?;
    let thermal = Tensor::<S>::from_f64(&shape, &thermal)?;
    let target = rgb.zip_map(&thermal, |a, b| a.max(b))?;
    Ok(SyntheticPair {
        rgb,
        thermal,
        target,
    })
}
