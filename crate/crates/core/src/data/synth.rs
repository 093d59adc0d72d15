use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};

/// Pixel value of the blank image before standardization, and the scale of
/// one pattern unit. Values are clipped to [0, 1] and then standardized with
/// these same constants.
const CENTER: f64 = 0.5;
const SCALE: f64 = 0.25;
const BLOBS_PER_CHANNEL: usize = 3;

/// Class-conditional Gaussian-blob images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub image: [usize; 3],
    /// Standard deviation of the per-pixel noise, in pattern units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 250,
            test_per_class: 100,
            image: [3, 8, 8],
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Training and test sets drawn around the same class patterns.
    pub fn generate(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let patterns = self.patterns()?;
        let train = self.draw(&patterns, self.per_class, 1)?;
        let test = self.draw(&patterns, self.test_per_class, 2)?;
        Ok((train, test))
    }

    fn patterns(&self) -> Result<Vec<Vec<f64>>> {
        if self.classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be finite and >= 0".into()));
        }
        let [c, h, w] = self.image;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let sigma = (h.min(w) as f64 / 5.0).max(0.75);
        let mut out = Vec::with_capacity(self.classes);
        for _ in 0..self.classes {
            let mut p = vec![0.0; c * h * w];
            for ch in 0..c {
                for _ in 0..BLOBS_PER_CHANNEL {
                    let cy = rng.random_range(0.0..h as f64);
                    let cx = rng.random_range(0.0..w as f64);
                    let amp = rng.random_range(-1.0..1.0);
                    for y in 0..h {
                        for x in 0..w {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            p[(ch * h + y) * w + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                        }
                    }
                }
            }
            out.push(p);
        }
        Ok(out)
    }

    fn draw(&self, patterns: &[Vec<f64>], per_class: usize, stream: u64) -> Result<LabeledDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let noise = Normal::new(0.0, self.noise.max(f64::MIN_POSITIVE)).expect("valid normal");
        let mut images = Vec::with_capacity(self.classes * per_class * patterns[0].len());
        let mut labels = Vec::with_capacity(self.classes * per_class);
        for _ in 0..per_class {
            for (class, p) in patterns.iter().enumerate() {
                for &m in p {
                    let n = if self.noise == 0.0 { 0.0 } else { noise.sample(&mut rng) };
                    let pixel = (CENTER + SCALE * (m + n)).clamp(0.0, 1.0);
                    images.push(((pixel - CENTER) / SCALE) as f32);
                }
                labels.push(class);
            }
        }
        LabeledDataset::new(images, self.image, labels, self.classes)
    }
}

/// Training split of a synthetic dataset: `classes * per_class` samples.
pub fn synth_dataset(classes: usize, per_class: usize, image: [usize; 3], noise: f64, seed: u64) -> Result<LabeledDataset> {
    let spec = SynthSpec {
        classes,
        per_class,
        test_per_class: 0,
        image,
        noise,
        seed,
    };
    spec.draw(&spec.patterns()?, per_class, 1)
}
