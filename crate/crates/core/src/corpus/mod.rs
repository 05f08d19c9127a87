//! Deterministic procedural corpus of real and generator-fingerprinted
//! images.

mod fingerprint;
mod generator;
mod manifest;
mod pgm;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use fingerprint::{projection, FingerprintBank};
pub use generator::{Family, GeneratorId};
pub use manifest::{build_corpus, load_images, sample_id, CorpusManifest, SampleRecord};
pub use pgm::{read_pgm, write_pgm};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One grayscale image in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub label: GeneratorId,
    pub split: Split,
}

/// Corpus generation knobs; every field has a default so config files may
/// set any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub train_per_seen: usize,
    pub test_per_seen: usize,
    pub real_train: usize,
    pub real_test: usize,
    pub test_per_unseen: usize,
    pub alpha_family: f64,
    pub alpha_model: f64,
    pub noise_sigma: f64,
    /// Projection of LDM's model pattern onto the gan family pattern.
    pub ldm_gan_projection: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            height: 32,
            width: 32,
            train_per_seen: 600,
            test_per_seen: 300,
            real_train: 3600,
            real_test: 300,
            test_per_unseen: 300,
            alpha_family: 0.10,
            alpha_model: 0.15,
            noise_sigma: 0.05,
            ldm_gan_projection: 0.0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("train_per_seen", self.train_per_seen),
            ("test_per_seen", self.test_per_seen),
            ("real_train", self.real_train),
            ("real_test", self.real_test),
            ("test_per_unseen", self.test_per_unseen),
            ("height", self.height),
            ("width", self.width),
        ];
        for (name, n) in counts {
            if n == 0 {
                return Err(Error::Config(format!("corpus.{name} must be >= 1")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.alpha_family >= 0.0 && self.alpha_model >= 0.0) {
            return Err(Error::Config("corpus amplitudes must be non-negative".into()));
        }
        Ok(())
    }

    pub fn count(&self, gen: GeneratorId, split: Split) -> usize {
        match (gen, split) {
            (GeneratorId::Real, Split::Train) => self.real_train,
            (GeneratorId::Real, Split::Test) => self.real_test,
            (g, Split::Train) if g.is_seen() => self.train_per_seen,
            (g, Split::Test) if g.is_seen() => self.test_per_seen,
            (_, Split::Train) => 0,
            (_, Split::Test) => self.test_per_unseen,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent per-sample streams.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_u64, |acc, p| mix(acc ^ mix(*p)))
}

fn sample_rng(seed: u64, label: GeneratorId, split: Split, index: usize) -> ChaCha8Rng {
    let split_code = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    ChaCha8Rng::seed_from_u64(stream_seed(&[seed, label.code(), split_code, index as u64]))
}

/// Smooth random field (a few sinusoids of at most two cycles per image)
/// around a random brightness.
fn base_field(rng: &mut ChaCha8Rng, height: usize, width: usize) -> Vec<f64> {
    let brightness = 0.5 + rng.gen_range(-0.08..0.08);
    let mut waves = Vec::new();
    for fy in 0..=2usize {
        for fx in 0..=2usize {
            if fx == 0 && fy == 0 {
                continue;
            }
            let amp = rng.gen_range(0.0..0.05);
            let phase = rng.gen_range(0.0..2.0 * PI);
            waves.push((fy as f64, fx as f64, amp, phase));
        }
    }
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let mut v = brightness;
            for &(fy, fx, amp, phase) in &waves {
                v += amp * (2.0 * PI * (fy * y as f64 / height as f64 + fx * x as f64 / width as f64) + phase).cos();
            }
            out.push(v);
        }
    }
    out
}

fn add_noise(rng: &mut ChaCha8Rng, pixels: &mut [f64], sigma: f64) {
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("sigma is finite and positive");
        for p in pixels.iter_mut() {
            *p += noise.sample(rng);
        }
    }
}

fn clip(pixels: &mut [f64]) {
    for p in pixels.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
}

/// A real image: smooth field plus broadband noise, no fingerprint.
pub fn synth_real(config: &CorpusConfig, split: Split, index: usize) -> ImageSample {
    let mut rng = sample_rng(config.seed, GeneratorId::Real, split, index);
    let mut pixels = base_field(&mut rng, config.height, config.width);
    add_noise(&mut rng, &mut pixels, config.noise_sigma);
    clip(&mut pixels);
    ImageSample {
        height: config.height,
        width: config.width,
        pixels,
        label: GeneratorId::Real,
        split,
    }
}

/// A fake image from `gen`: real-style field plus its family and model
/// fingerprints.
pub fn synth_fake(
    config: &CorpusConfig,
    bank: &FingerprintBank,
    gen: GeneratorId,
    split: Split,
    index: usize,
) -> Result<ImageSample> {
    let family = gen
        .family()
        .ok_or_else(|| Error::InvalidArgument("synth_fake requires a fake generator".into()))?;
    if bank.height != config.height || bank.width != config.width {
        return Err(Error::InvalidArgument("fingerprint bank resolution differs from config".into()));
    }
    let mut rng = sample_rng(config.seed, gen, split, index);
    let mut pixels = base_field(&mut rng, config.height, config.width);
    let fam = bank.family(family);
    let model = bank.model(gen).expect("fake generators have a model pattern");
    for ((p, f), m) in pixels.iter_mut().zip(fam).zip(model) {
        *p += config.alpha_family * f + config.alpha_model * m;
    }
    add_noise(&mut rng, &mut pixels, config.noise_sigma);
    clip(&mut pixels);
    Ok(ImageSample {
        height: config.height,
        width: config.width,
        pixels,
        label: gen,
        split,
    })
}

/// Dispatches to [`synth_real`] or [`synth_fake`].
pub fn synth(config: &CorpusConfig, bank: &FingerprintBank, gen: GeneratorId, split: Split, index: usize) -> ImageSample {
    match gen {
        GeneratorId::Real => synth_real(config, split, index),
        g => synth_fake(config, bank, g, split, index).expect("fake generator"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig::default()
    }

    #[test]
    fn real_is_deterministic_and_mid_gray() {
        let c = small();
        assert_eq!(synth_real(&c, Split::Train, 5), synth_real(&c, Split::Train, 5));
        assert_ne!(synth_real(&c, Split::Train, 5).pixels, synth_real(&c, Split::Train, 6).pixels);
        let mean: f64 = (0..100)
            .map(|i| {
                let s = synth_real(&c, Split::Train, i);
                s.pixels.iter().sum::<f64>() / s.pixels.len() as f64
            })
            .sum::<f64>()
            / 100.0;
        assert!((0.3..=0.7).contains(&mean), "mean {mean}");
    }

    #[test]
    fn real_images_carry_no_fingerprint() {
        let c = small();
        let bank = FingerprintBank::new(c.height, c.width, 0.0);
        let mut sums = vec![0.0; 14];
        for i in 0..100 {
            let s = synth_real(&c, Split::Test, i);
            let mut k = 0;
            for fam in Family::ALL {
                sums[k] += projection(&s.pixels, bank.family(fam));
                k += 1;
            }
            for g in GeneratorId::FAKES {
                sums[k] += projection(&s.pixels, bank.model(g).unwrap());
                k += 1;
            }
        }
        for s in sums {
            assert!((s / 100.0).abs() < 0.1);
        }
    }

    #[test]
    fn fake_rejects_real_label() {
        let c = small();
        let bank = FingerprintBank::new(c.height, c.width, 0.0);
        assert!(synth_fake(&c, &bank, GeneratorId::Real, Split::Train, 0).is_err());
    }

    #[test]
    fn fakes_are_deterministic_and_attributable() {
        let c = small();
        let bank = FingerprintBank::new(c.height, c.width, 0.0);
        for g in GeneratorId::FAKES {
            let a = synth_fake(&c, &bank, g, Split::Test, 3).unwrap();
            assert_eq!(a, synth_fake(&c, &bank, g, Split::Test, 3).unwrap());
            let hits = (0..100)
                .filter(|i| {
                    let s = synth_fake(&c, &bank, g, Split::Test, *i).unwrap();
                    bank.nearest_model(&s.pixels) == g
                })
                .count();
            assert!(hits >= 99, "{g}: {hits}/100");
        }
    }

    #[test]
    fn ldm_correlates_with_diffusion_family() {
        let c = small();
        let bank = FingerprintBank::new(c.height, c.width, 0.0);
        for i in 0..20 {
            let s = synth_fake(&c, &bank, GeneratorId::Ldm, Split::Train, i).unwrap();
            let d = projection(&s.pixels, bank.family(Family::Diffusion));
            let g = projection(&s.pixels, bank.family(Family::Gan));
            assert!(d > 0.05 && g.abs() < 0.03, "diffusion {d}, gan {g}");
        }
    }

    #[test]
    fn pixels_stay_in_unit_interval() {
        let c = small();
        let bank = FingerprintBank::new(c.height, c.width, 0.3);
        for g in GeneratorId::ALL {
            let s = synth(&c, &bank, g, Split::Train, 1);
            assert!(s.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }
}
