//! Small convolutional real/fake classifier: two stride-2 convolutions,
//! global average pooling and a single-logit head.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::answer::ParsedAnswer;
use crate::autodiff::{sigmoid, Tape, Tensor, Var};
use crate::checkpoint::{Checkpoint, Kind};
use crate::corpus::{stream_seed, GeneratorId, ImageSample};
use crate::error::{Error, Result};
use crate::metrics::{detection_metrics, DetectionMetrics};
use crate::tuning::{adamw_step, cosine_lr, AdamState, TuneConfig};

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub channels1: usize,
    pub channels2: usize,
    /// Optimizer and schedule, shared with prompt tuning.
    pub optim: TuneConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            channels1: 8,
            channels2: 16,
            optim: TuneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineParams {
    pub height: usize,
    pub width: usize,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

fn out_size(n: usize) -> usize {
    (n + 2 * PAD - KERNEL) / STRIDE + 1
}

/// Gather indices turning an `h×w×c` map (row-major, channels last) into
/// one row per output position; padding reads as zero.
fn im2col_index(h: usize, w: usize, c: usize) -> (Vec<Option<usize>>, usize, usize) {
    let (oh, ow) = (out_size(h), out_size(w));
    let mut idx = Vec::with_capacity(oh * ow * KERNEL * KERNEL * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let y = (oy * STRIDE + ky) as isize - PAD as isize;
                    let x = (ox * STRIDE + kx) as isize - PAD as isize;
                    let inside = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
                    for ch in 0..c {
                        idx.push(inside.then(|| (y as usize * w + x as usize) * c + ch));
                    }
                }
            }
        }
    }
    (idx, oh, ow)
}

impl BaselineParams {
    pub fn init(height: usize, width: usize, config: &BaselineConfig, seed: u64) -> Result<Self> {
        if height < KERNEL || width < KERNEL || config.channels1 == 0 || config.channels2 == 0 {
            return Err(Error::Config("baseline needs images of at least 4x4 and nonzero channels".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 0xc0de]));
        let mut he = |fan_in: usize, rows: usize, cols: usize| {
            let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| n.sample(&mut rng)).collect())
        };
        let k1 = KERNEL * KERNEL;
        let k2 = KERNEL * KERNEL * config.channels1;
        Ok(Self {
            height,
            width,
            w1: he(k1, k1, config.channels1)?,
            b1: Tensor::zeros(&[config.channels1]),
            w2: he(k2, k2, config.channels2)?,
            b2: Tensor::zeros(&[config.channels2]),
            w3: he(config.channels2, config.channels2, 1)?,
            b3: Tensor::zeros(&[1]),
        })
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    fn channels(&self) -> (usize, usize) {
        (self.w1.shape()[1], self.w2.shape()[1])
    }

    fn with_tensors(&self, t: Vec<Tensor>) -> Self {
        let mut it = t.into_iter();
        Self {
            height: self.height,
            width: self.width,
            w1: it.next().unwrap(),
            b1: it.next().unwrap(),
            w2: it.next().unwrap(),
            b2: it.next().unwrap(),
            w3: it.next().unwrap(),
            b3: it.next().unwrap(),
        }
    }

    /// Records the forward pass and returns the `1×1` logit.
    fn forward(&self, tape: &mut Tape, vars: &[Var], image: &ImageSample) -> Result<Var> {
        if image.height != self.height || image.width != self.width {
            return Err(Error::shape(
                "baseline",
                format!("expected {}x{}, got {}x{}", self.height, self.width, image.height, image.width),
            ));
        }
        let (c1, _) = self.channels();
        let centered: Vec<f64> = image.pixels.iter().map(|p| p - 0.5).collect();
        let x = tape.constant(Tensor::matrix(self.height * self.width, 1, centered)?);
        let (idx, oh, ow) = im2col_index(self.height, self.width, 1);
        let cols = tape.gather(x, idx, vec![oh * ow, KERNEL * KERNEL])?;
        let h = tape.matmul(cols, vars[0])?;
        let h = tape.add_row(h, vars[1])?;
        let h = tape.relu(h)?;
        let (idx, oh2, ow2) = im2col_index(oh, ow, c1);
        let cols = tape.gather(h, idx, vec![oh2 * ow2, KERNEL * KERNEL * c1])?;
        let h = tape.matmul(cols, vars[2])?;
        let h = tape.add_row(h, vars[3])?;
        let h = tape.relu(h)?;
        let pooled = tape.mean_rows(h)?;
        let logit = tape.matmul(pooled, vars[4])?;
        tape.add_row(logit, vars[5])
    }

    /// Probability that `image` is fake.
    pub fn predict(&self, image: &ImageSample) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.tensors().iter().map(|t| tape.constant((*t).clone())).collect();
        let logit = self.forward(&mut tape, &vars, image)?;
        Ok(sigmoid(tape.value(logit).data()[0]))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let (c1, c2) = self.channels();
        Checkpoint {
            kind: Kind::Baseline,
            dims: [self.height, self.width, c1, c2].iter().map(|&d| d as u32).collect(),
            vocab_hash: [0; 32],
            payload: self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect(),
            pseudo: None,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        if ckpt.kind != Kind::Baseline || ckpt.dims.len() != 4 {
            return Err(corrupt("not a baseline checkpoint"));
        }
        let d: Vec<usize> = ckpt.dims.iter().map(|&x| x as usize).collect();
        let cfg = BaselineConfig {
            channels1: d[2],
            channels2: d[3],
            ..BaselineConfig::default()
        };
        let template = Self::init(d[0], d[1], &cfg, 0).map_err(|_| corrupt("bad dims"))?;
        let total: usize = template.tensors().iter().map(|t| t.len()).sum();
        if total != ckpt.payload.len() {
            return Err(corrupt("payload size does not match dims"));
        }
        let mut offset = 0;
        let mut out = Vec::new();
        for t in template.tensors() {
            out.push(Tensor::new(t.shape().to_vec(), ckpt.payload[offset..offset + t.len()].to_vec())?);
            offset += t.len();
        }
        Ok(template.with_tensors(out))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

/// Trains with mean binary cross-entropy; fake is label 1. Returns the
/// parameters and the mean loss of each epoch.
pub fn train_baseline(
    train: &[ImageSample],
    config: &BaselineConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(BaselineParams, Vec<f64>)> {
    let opt = &config.optim;
    opt.validate()?;
    let first = train
        .first()
        .ok_or_else(|| Error::InvalidArgument("baseline training needs a non-empty train split".into()))?;
    let mut params = BaselineParams::init(first.height, first.width, config, opt.seed)?;
    let adam = opt.adamw();
    let mut states: Vec<AdamState> = params.tensors().iter().map(|t| AdamState::zeros(t.len())).collect();
    let total = train.len().div_ceil(opt.batch_size) * opt.epochs;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::with_capacity(opt.epochs);
    for epoch in 1..=opt.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[opt.seed, 0xba5e, epoch as u64]));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(opt.batch_size) {
            let mut acc: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            for &i in batch {
                let img = &train[i];
                let mut tape = Tape::new();
                let vars: Vec<Var> = params.tensors().iter().map(|t| tape.leaf((*t).clone())).collect();
                let logit = params.forward(&mut tape, &vars, img)?;
                let target = if img.label.is_fake() { 1.0 } else { 0.0 };
                let loss = tape.bce_with_logits(logit, vec![target])?;
                loss_sum += tape.value(loss).data()[0];
                let grads = tape.backward(loss)?;
                for (a, v) in acc.iter_mut().zip(&vars) {
                    for (x, g) in a.iter_mut().zip(grads.wrt(*v)?.data()) {
                        *x += g;
                    }
                }
            }
            step += 1;
            let lr = cosine_lr(step, total, opt.peak_lr)?;
            let scale = 1.0 / batch.len() as f64;
            let mut updated = Vec::with_capacity(6);
            for (k, t) in params.tensors().into_iter().enumerate() {
                let g = Tensor::new(t.shape().to_vec(), acc[k].iter().map(|x| x * scale).collect())?;
                let (p, s) = adamw_step(t, &g, &states[k], step as u64, lr, &adam)?;
                states[k] = s;
                updated.push(p);
            }
            params = params.with_tensors(updated);
        }
        let mean = loss_sum / train.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged(format!("baseline epoch {epoch} mean loss {mean}")));
        }
        on_epoch(epoch, mean);
        losses.push(mean);
    }
    Ok((params, losses))
}

/// Thresholds a fake probability: `p >= 0.5` means fake.
pub fn verdict(p: f64) -> ParsedAnswer {
    ParsedAnswer {
        is_fake: Some(p >= 0.5),
        ..ParsedAnswer::UNPARSEABLE
    }
}

pub fn eval_baseline(params: &BaselineParams, images: &[ImageSample]) -> Result<DetectionMetrics> {
    let parsed = images
        .iter()
        .map(|img| params.predict(img).map(verdict))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<GeneratorId> = images.iter().map(|i| i.label).collect();
    detection_metrics(&parsed, &truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth, CorpusConfig, FingerprintBank, Split};

    #[test]
    fn im2col_layout() {
        let (idx, oh, ow) = im2col_index(4, 4, 1);
        assert_eq!((oh, ow), (2, 2));
        // first window starts one pixel above and left of the image
        assert_eq!(&idx[..4], &[None, None, None, None]);
        assert_eq!(idx[5], Some(0));
        assert_eq!(idx.len(), 4 * 16);
        let (idx, oh, ow) = im2col_index(16, 16, 8);
        assert_eq!((oh, ow, idx.len()), (8, 8, 64 * 128));
    }

    #[test]
    fn threshold_edge() {
        assert_eq!(verdict(0.5).is_fake, Some(true));
        assert_eq!(verdict(0.4999).is_fake, Some(false));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let c = CorpusConfig::default();
        let bank = FingerprintBank::new(32, 32, 0.0);
        let img = synth(&c, &bank, GeneratorId::Progan, Split::Train, 0);
        let params = BaselineParams::init(32, 32, &BaselineConfig::default(), 3).unwrap();
        let loss_of = |p: &BaselineParams| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = p.tensors().iter().map(|t| tape.leaf((*t).clone())).collect();
            let l = p.forward(&mut tape, &vars, &img).unwrap();
            let loss = tape.bce_with_logits(l, vec![1.0]).unwrap();
            let g = tape.backward(loss).unwrap();
            let grads: Vec<Tensor> = vars.iter().map(|v| g.wrt(*v).unwrap().clone()).collect();
            (tape.value(loss).data()[0], grads)
        };
        let (_, grads) = loss_of(&params);
        let h = 1e-5;
        for k in [0usize, 2, 4, 5] {
            for i in [0usize, 7] {
                let i = i % params.tensors()[k].len();
                let bump = |d: f64| {
                    let mut ts: Vec<Tensor> = params.tensors().iter().map(|t| (*t).clone()).collect();
                    let mut v = ts[k].to_vec();
                    v[i] += d;
                    ts[k] = Tensor::new(ts[k].shape().to_vec(), v).unwrap();
                    loss_of(&params.with_tensors(ts)).0
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let an = grads[k].data()[i];
                assert!((fd - an).abs() <= 1e-6 + 1e-4 * an.abs(), "tensor {k}[{i}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn separable_micro_subset_and_determinism() {
        let c = CorpusConfig::default();
        let bank = FingerprintBank::new(32, 32, 0.0);
        let mut train = Vec::new();
        for i in 0..48 {
            train.push(synth(&c, &bank, GeneratorId::Real, Split::Train, i));
            train.push(synth(&c, &bank, GeneratorId::Progan, Split::Train, i));
        }
        let cfg = BaselineConfig {
            optim: TuneConfig {
                epochs: 8,
                peak_lr: 1e-2,
                ..TuneConfig::default()
            },
            ..BaselineConfig::default()
        };
        let (params, losses) = train_baseline(&train, &cfg, |_, _| {}).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        let (again, _) = train_baseline(&train, &cfg, |_, _| {}).unwrap();
        assert_eq!(params, again);
        let m = eval_baseline(&params, &train).unwrap();
        assert_eq!(m.acc, 1.0, "{m:?}");

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("baseline.ckpt");
        params.save(&path).unwrap();
        assert_eq!(BaselineParams::load(&path).unwrap(), params);
    }
}
