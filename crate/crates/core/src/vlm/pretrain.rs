//! Trains every backbone parameter on a partial task: the plain question,
//! with the generator name replaced by its family word. Model-level
//! attribution is left for the soft prompt to add.
//!
//! Half the questions carry a random filler word in the slot S* occupies
//! later, so the backbone tolerates an extra prompt token the way an
//! instruction-following model tolerates rephrasing.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{evaluate_loss, teacher_forced, ModelConfig, ModelParams};
use super::vocab::{Vocab, PSEUDO};
use super::answer_ids;
use crate::answer::{build_question, render_fake, REAL_ANSWER};
use crate::autodiff::{Tape, Tensor};
use crate::corpus::{stream_seed, GeneratorId, ImageSample};
use crate::error::{Error, Result};
use crate::tuning::{adamw_step, cosine_lr, AdamState, AdamWConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    /// Number of training samples used to measure the initial loss.
    pub probe_samples: usize,
    /// Probability that a task sample's question carries a random filler
    /// word where S* will later sit.
    pub filler_prob: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 16,
            peak_lr: 3e-3,
            weight_decay: 0.01,
            probe_samples: 64,
            filler_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean loss of the probe set before the first update.
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Target text for the partial task.
pub fn family_only_label(gen: GeneratorId) -> String {
    match gen.family() {
        None => REAL_ANSWER.to_string(),
        Some(f) => render_fake(f.word(), f.word()),
    }
}

pub fn pretrain_backbone(
    train: &[ImageSample],
    vocab: &Vocab,
    model: &ModelConfig,
    config: &PretrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(ModelParams, PretrainReport)> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("pretraining needs a non-empty train split".into()));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::Config("pretrain.epochs and pretrain.batch_size must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&config.filler_prob) {
        return Err(Error::Config("pretrain.filler_prob must lie in [0, 1]".into()));
    }
    let mut params = ModelParams::init(model, vocab.len(), stream_seed(&[seed, 0xb0b]))?;
    let prompt = vocab.tokenize(build_question(false))?;
    let targets: Vec<Vec<usize>> = GeneratorId::ALL
        .iter()
        .map(|g| answer_ids(vocab, &family_only_label(*g)))
        .collect::<Result<_>>()?;
    let target = |g: GeneratorId| &targets[g as usize];
    let slotted = vocab.tokenize(build_question(true))?;
    let fillers: Vec<Vec<usize>> = (PSEUDO + 1..vocab.len())
        .map(|w| slotted.iter().map(|&t| if t == PSEUDO { w } else { t }).collect())
        .collect();
    let n_items = train.len();

    let probe = &train[..config.probe_samples.clamp(1, train.len())];
    let initial_loss = probe
        .iter()
        .map(|s| evaluate_loss(&params, s, &prompt, target(s.label), None).map(|(l, _)| l))
        .sum::<Result<f64>>()?
        / probe.len() as f64;

    let adam = AdamWConfig {
        weight_decay: config.weight_decay,
        ..AdamWConfig::default()
    };
    let n_params = params.tensors().len();
    let mut states: Vec<AdamState> = params.tensors().iter().map(|t| AdamState::zeros(t.len())).collect();
    let steps_per_epoch = n_items.div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 0x9e7, epoch as u64]));
        order.shuffle(&mut rng);
        let questions: Vec<Option<usize>> = (0..n_items)
            .map(|_| rng.gen_bool(config.filler_prob).then(|| rng.gen_range(0..fillers.len())))
            .collect();
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            for &i in batch {
                let image = &train[i];
                let question = questions[i].map_or(&prompt, |f| &fillers[f]);
                let answer = target(image.label);
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape, true);
                let tf = teacher_forced(&mut tape, &params, &bound, image, question, answer, None)
                    .map_err(|e| diverged(e, epoch, step))?;
                loss_sum += tape.value(tf.loss).data()[0];
                let grads = tape.backward(tf.loss)?;
                for (a, v) in acc.iter_mut().zip(&bound.vars) {
                    for (x, g) in a.iter_mut().zip(grads.wrt(*v)?.data()) {
                        *x += g;
                    }
                }
            }
            step += 1;
            let lr = cosine_lr(step, total, config.peak_lr)?;
            let scale = 1.0 / batch.len() as f64;
            let mut updated = Vec::with_capacity(n_params);
            for (k, t) in params.tensors().into_iter().enumerate() {
                let g = Tensor::new(t.shape().to_vec(), acc[k].iter().map(|x| x * scale).collect())?;
                let (p, s) = adamw_step(t, &g, &states[k], step as u64, lr, &adam).map_err(|e| diverged(e, epoch, step))?;
                states[k] = s;
                updated.push(p);
            }
            params = ModelParams::from_tensors(model, vocab.len(), updated)?;
        }
        let mean = loss_sum / n_items as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged(format!("epoch {} mean loss {mean}", epoch + 1)));
        }
        on_epoch(epoch + 1, mean);
        epoch_losses.push(mean);
    }
    Ok((
        params,
        PretrainReport {
            initial_loss,
            epoch_losses,
        },
    ))
}

fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(op) => Error::Diverged(format!("non-finite value in {op} at epoch {} step {step}", epoch + 1)),
        other => other,
    }
}
