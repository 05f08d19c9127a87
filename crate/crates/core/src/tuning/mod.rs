//! Soft prompt tuning: optimizes the single S* embedding against the frozen
//! backbone.

mod optim;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use optim::{adamw_step, cosine_lr, AdamState, AdamWConfig};

use crate::answer::{build_question, render_label};
use crate::autodiff::{Tape, Tensor};
use crate::corpus::{stream_seed, ImageSample};
use crate::error::{Error, Result};
use crate::vlm::{answer_ids, prefix_cache, forward_segments, logits, KvCache, ModelParams, Segment, Vocab, BOS, PSEUDO};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    pub peak_lr: f64,
    pub init_std: f64,
    pub seed: u64,
    /// Keep each sample's frozen prefix keys/values in memory across epochs.
    pub cache_prefixes: bool,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            epsilon: 1e-8,
            peak_lr: 5e-2,
            init_std: 0.02,
            seed: 7,
            cache_prefixes: true,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("tune.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("tune.batch_size must be >= 1".into()));
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::Config("tune betas must lie in (0, 1)".into()));
        }
        if !(self.peak_lr > 0.0 && self.epsilon > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("tune.peak_lr and tune.epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

/// `(I, q*, y)`: image, prompt with one S*, and the target answer ids
/// ending in EOS.
#[derive(Debug, Clone)]
pub struct TuneTriplet {
    pub image: ImageSample,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

impl TuneTriplet {
    pub fn new(image: ImageSample, prompt: Vec<usize>, answer: Vec<usize>) -> Result<Self> {
        if prompt.iter().filter(|&&t| t == PSEUDO).count() != 1 {
            return Err(Error::Sequence("tuning prompt needs exactly one S* token".into()));
        }
        Ok(Self { image, prompt, answer })
    }
}

/// Triplets with the adjusted question and each image's rendered label.
pub fn make_triplets(vocab: &Vocab, images: Vec<ImageSample>) -> Result<Vec<TuneTriplet>> {
    let prompt = vocab.tokenize(build_question(true))?;
    images
        .into_iter()
        .map(|img| {
            let answer = answer_ids(vocab, &render_label(img.label))?;
            TuneTriplet::new(img, prompt.clone(), answer)
        })
        .collect()
}

/// Random initial S* embedding, i.i.d. normal with standard deviation `std`.
pub fn init_pseudo_embedding(seed: u64, d: usize, std: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 0x5eed_5]));
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::vector((0..d).map(|_| normal.sample(&mut rng)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneHistory {
    pub epochs: Vec<EpochStat>,
    pub theta_checksum: String,
}

impl TuneHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,lr\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{:.10},{:.10e}", e.epoch, e.mean_loss, e.lr);
        }
        out
    }
}

/// Loss and S* gradient for one triplet with the backbone frozen.
pub fn triplet_loss_and_grad(
    params: &ModelParams,
    pseudo: &Tensor,
    triplet: &TuneTriplet,
    cache: Option<&KvCache>,
) -> Result<(f64, Tensor)> {
    let split = triplet.prompt.iter().position(|&t| t == PSEUDO).expect("validated triplet");
    let owned;
    let cache = match cache {
        Some(c) => c,
        None => {
            owned = prefix_cache(params, &triplet.image, &triplet.prompt[..split])?;
            &owned
        }
    };
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let leaf = tape.leaf(pseudo.clone());
    let mut text = triplet.prompt[split..].to_vec();
    text.push(BOS);
    text.extend_from_slice(&triplet.answer[..triplet.answer.len() - 1]);
    let out = forward_segments(&mut tape, params, &bound, cache, &[Segment::Tokens(&text)], Some(leaf))?;
    let first = triplet.prompt.len() - split;
    let n = triplet.answer.len();
    let lg = logits(&mut tape, &bound, out.hidden, (first..first + n).collect())?;
    let loss = tape.cross_entropy(lg, triplet.answer.clone(), vec![true; n])?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).data()[0], grads.wrt(leaf)?.clone()))
}

/// Mean loss and mean S* gradient over a batch, summed in index order.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    pseudo: &Tensor,
    triplets: &[&TuneTriplet],
    caches: Option<&[&KvCache]>,
) -> Result<(f64, Tensor)> {
    let mut loss = 0.0;
    let mut grad = vec![0.0; pseudo.len()];
    for (i, t) in triplets.iter().enumerate() {
        let (l, g) = triplet_loss_and_grad(params, pseudo, t, caches.map(|c| c[i]))?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(g.data()) {
            *a += b;
        }
    }
    let n = triplets.len() as f64;
    Ok((loss / n, Tensor::new(pseudo.shape().to_vec(), grad.into_iter().map(|g| g / n).collect())?))
}

/// Optimizes the S* embedding alone. The backbone is only read.
pub fn tune(
    params: &ModelParams,
    init: &Tensor,
    triplets: &[TuneTriplet],
    config: &TuneConfig,
    mut on_epoch: impl FnMut(&EpochStat),
) -> Result<(Tensor, TuneHistory)> {
    config.validate()?;
    if triplets.is_empty() {
        return Err(Error::InvalidArgument("tuning needs at least one triplet".into()));
    }
    if init.len() != params.config.d_model {
        return Err(Error::shape(
            "tune",
            format!("S* embedding has {} entries, model width is {}", init.len(), params.config.d_model),
        ));
    }
    let checksum_before = params.checksum();
    let caches: Option<Vec<KvCache>> = if config.cache_prefixes {
        Some(
            triplets
                .iter()
                .map(|t| {
                    let split = t.prompt.iter().position(|&x| x == PSEUDO).expect("validated triplet");
                    prefix_cache(params, &t.image, &t.prompt[..split])
                })
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let adam = config.adamw();
    let steps_per_epoch = triplets.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let mut pseudo = init.clone();
    let mut state = AdamState::zeros(pseudo.len());
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[config.seed, 0x7a4e, epoch as u64]));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(config.batch_size) {
            let members: Vec<&TuneTriplet> = batch.iter().map(|&i| &triplets[i]).collect();
            let cache_refs: Option<Vec<&KvCache>> = caches.as_ref().map(|c| batch.iter().map(|&i| &c[i]).collect());
            let (loss, grad) = batch_loss_and_grad(params, &pseudo, &members, cache_refs.as_deref())
                .map_err(|e| diverged(e, epoch, step))?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("loss {loss} at epoch {epoch} step {step}")));
            }
            loss_sum += loss * batch.len() as f64;
            step += 1;
            lr = cosine_lr(step, total, config.peak_lr)?;
            let (p, s) = adamw_step(&pseudo, &grad, &state, step as u64, lr, &adam).map_err(|e| diverged(e, epoch, step))?;
            pseudo = p;
            state = s;
        }
        let stat = EpochStat {
            epoch,
            mean_loss: loss_sum / triplets.len() as f64,
            lr,
        };
        on_epoch(&stat);
        history.push(stat);
    }
    let checksum_after = params.checksum();
    if checksum_before != checksum_after {
        return Err(Error::InvalidArgument("backbone changed during tuning".into()));
    }
    Ok((
        pseudo,
        TuneHistory {
            epochs: history,
            theta_checksum: checksum_after,
        },
    ))
}

fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(op) => Error::Diverged(format!("non-finite value in {op} at epoch {epoch} step {step}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth, CorpusConfig, FingerprintBank, GeneratorId, Split};
    use crate::vlm::{ModelConfig, PSEUDO};

    fn model() -> (ModelParams, Vocab) {
        let vocab = Vocab::new();
        (ModelParams::init(&ModelConfig::default(), vocab.len(), 11).unwrap(), vocab)
    }

    fn micro(vocab: &Vocab) -> Vec<TuneTriplet> {
        let c = CorpusConfig::default();
        let bank = FingerprintBank::new(32, 32, 0.0);
        let gens = [GeneratorId::Real, GeneratorId::Progan, GeneratorId::Ldm, GeneratorId::Glide];
        let imgs = (0..8).map(|i| synth(&c, &bank, gens[i % 4], Split::Train, i)).collect();
        make_triplets(vocab, imgs).unwrap()
    }

    #[test]
    fn init_is_seeded_with_small_std() {
        let a = init_pseudo_embedding(1, 32, 0.02);
        assert_eq!(a, init_pseudo_embedding(1, 32, 0.02));
        assert_ne!(a, init_pseudo_embedding(2, 32, 0.02));
        let big = init_pseudo_embedding(3, 1024, 0.02);
        let mean = big.data().iter().sum::<f64>() / 1024.0;
        let std = (big.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 1023.0).sqrt();
        assert!((0.015..=0.025).contains(&std), "std {std}");
    }

    #[test]
    fn config_preconditions() {
        let (params, vocab) = model();
        let trip = micro(&vocab);
        let init = init_pseudo_embedding(0, 32, 0.02);
        let zero_epochs = TuneConfig {
            epochs: 0,
            ..TuneConfig::default()
        };
        assert!(matches!(tune(&params, &init, &trip, &zero_epochs, |_| {}), Err(Error::Config(_))));
        assert!(tune(&params, &init, &[], &TuneConfig::default(), |_| {}).is_err());
        let bad_beta = TuneConfig {
            beta2: 1.0,
            ..TuneConfig::default()
        };
        assert!(bad_beta.validate().is_err());
    }

    #[test]
    fn triplets_need_one_pseudo_token() {
        let (_, vocab) = model();
        let img = micro(&vocab).remove(0).image;
        let plain = vocab.tokenize(build_question(false)).unwrap();
        assert!(TuneTriplet::new(img.clone(), plain, vec![]).is_err());
        let mut two = vocab.tokenize(build_question(true)).unwrap();
        two.push(PSEUDO);
        assert!(TuneTriplet::new(img, two, vec![]).is_err());
    }

    #[test]
    fn cached_and_full_tape_gradients_agree() {
        let (params, vocab) = model();
        let trip = &micro(&vocab)[1];
        let v = init_pseudo_embedding(4, 32, 0.5);
        let (l1, g1) = triplet_loss_and_grad(&params, &v, trip, None).unwrap();

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let leaf = tape.leaf(v.clone());
        let tf = crate::vlm::teacher_forced(&mut tape, &params, &bound, &trip.image, &trip.prompt, &trip.answer, Some(leaf))
            .unwrap();
        let g2 = crate::autodiff::grad_wrt_leaf(&tape, tf.loss, leaf).unwrap();
        assert!((l1 - tape.value(tf.loss).data()[0]).abs() < 1e-12);
        assert!(g1.max_abs_diff(&g2) < 1e-12);
    }

    #[test]
    fn micro_corpus_loss_falls_and_backbone_is_untouched() {
        let (params, vocab) = model();
        let trip = micro(&vocab);
        let before = params.clone();
        let init = init_pseudo_embedding(5, 32, 0.02);
        let cfg = TuneConfig {
            batch_size: 4,
            ..TuneConfig::default()
        };
        let (v, hist) = tune(&params, &init, &trip, &cfg, |_| {}).unwrap();
        assert_eq!(params, before);
        assert_eq!(hist.theta_checksum, before.checksum());
        assert_eq!(hist.epochs.len(), 5);
        assert!(hist.epochs[4].mean_loss < hist.epochs[0].mean_loss);
        assert_ne!(v, init);
        let (v2, hist2) = tune(&params, &init, &trip, &cfg, |_| {}).unwrap();
        assert_eq!(v, v2);
        assert_eq!(hist, hist2);
        let uncached = TuneConfig {
            cache_prefixes: false,
            ..cfg
        };
        assert_eq!(tune(&params, &init, &trip, &uncached, |_| {}).unwrap().0, v);
        assert!(hist.to_csv().starts_with("epoch,mean_loss,lr\n1,"));
    }
}
