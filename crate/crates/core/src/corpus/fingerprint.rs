//! Fixed bank of generator fingerprints.
//!
//! Every pattern is a 2-D sinusoid whose period divides 4 along both axes,
//! so each 4×4 tile of an image carries the identical pattern. The real
//! Fourier basis of a 4×4 tile has 15 non-constant elements: two become the
//! family patterns and twelve the per-model patterns. Patterns are scaled to
//! unit mean square, which makes them orthonormal under [`projection`].

use std::f64::consts::PI;

use super::generator::{Family, GeneratorId};

const PERIOD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Wave {
    Cos,
    Sin,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Freq {
    u: usize,
    v: usize,
    wave: Wave,
}

const fn f(u: usize, v: usize, wave: Wave) -> Freq {
    Freq { u, v, wave }
}

fn family_freq(family: Family) -> Freq {
    match family {
        Family::Gan => f(2, 0, Wave::Cos),
        Family::Diffusion => f(0, 2, Wave::Cos),
    }
}

/// One frequency per fake generator, in `GeneratorId::FAKES` order.
const MODEL_FREQS: [Freq; 12] = [
    f(0, 1, Wave::Cos),
    f(1, 0, Wave::Cos),
    f(1, 1, Wave::Cos),
    f(1, 2, Wave::Cos),
    f(1, 3, Wave::Cos),
    f(2, 1, Wave::Cos),
    f(0, 1, Wave::Sin),
    f(1, 0, Wave::Sin),
    f(1, 1, Wave::Sin),
    f(1, 2, Wave::Sin),
    f(1, 3, Wave::Sin),
    f(2, 1, Wave::Sin),
];

fn render(freq: Freq, height: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let phase = 2.0 * PI * ((freq.u * y + freq.v * x) % PERIOD) as f64 / PERIOD as f64;
            out.push(match freq.wave {
                Wave::Cos => phase.cos(),
                Wave::Sin => phase.sin(),
            });
        }
    }
    normalize(&mut out);
    out
}

fn normalize(p: &mut [f64]) {
    let ms = p.iter().map(|v| v * v).sum::<f64>() / p.len() as f64;
    let s = ms.sqrt();
    for v in p.iter_mut() {
        *v /= s;
    }
}

/// Mean of the pixelwise product; the inner product under which the bank is
/// orthonormal.
pub fn projection(pixels: &[f64], pattern: &[f64]) -> f64 {
    pixels.iter().zip(pattern).map(|(a, b)| a * b).sum::<f64>() / pixels.len() as f64
}

/// Rendered fingerprints for one image resolution.
#[derive(Debug, Clone)]
pub struct FingerprintBank {
    pub height: usize,
    pub width: usize,
    family: [Vec<f64>; 2],
    model: Vec<Vec<f64>>,
}

impl FingerprintBank {
    /// `ldm_gan_projection` mixes the gan family pattern into LDM's model
    /// pattern (kept unit norm); zero leaves the bank orthonormal.
    pub fn new(height: usize, width: usize, ldm_gan_projection: f64) -> Self {
        let family = [
            render(family_freq(Family::Gan), height, width),
            render(family_freq(Family::Diffusion), height, width),
        ];
        let mut model: Vec<Vec<f64>> = MODEL_FREQS.iter().map(|fr| render(*fr, height, width)).collect();
        if ldm_gan_projection != 0.0 {
            let c = ldm_gan_projection.clamp(-1.0, 1.0);
            let k = GeneratorId::Ldm.fake_index().unwrap();
            let keep = (1.0 - c * c).sqrt();
            model[k] = model[k]
                .iter()
                .zip(&family[0])
                .map(|(m, g)| keep * m + c * g)
                .collect();
        }
        Self {
            height,
            width,
            family,
            model,
        }
    }

    pub fn family(&self, family: Family) -> &[f64] {
        &self.family[family.index()]
    }

    /// `None` for [`GeneratorId::Real`].
    pub fn model(&self, gen: GeneratorId) -> Option<&[f64]> {
        gen.fake_index().map(|i| self.model[i].as_slice())
    }

    /// Linear probe: the fake generator whose model pattern has the largest
    /// projection onto `pixels`.
    pub fn nearest_model(&self, pixels: &[f64]) -> GeneratorId {
        let mut best = (f64::NEG_INFINITY, GeneratorId::FAKES[0]);
        for g in GeneratorId::FAKES {
            let p = projection(pixels, self.model(g).unwrap());
            if p > best.0 {
                best = (p, g);
            }
        }
        best.1
    }
}
