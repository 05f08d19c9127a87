//! Patch-embedding vision encoder feeding a small pre-norm transformer
//! decoder with tied output projection.
//!
//! Context layout is `[image patches | prompt | BOS answer...]`. Image
//! positions attend bidirectionally among themselves; every other position
//! is causal. Because image positions never see text, any prefix of the
//! context can be cached as constant keys/values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, BOS, EOS, PSEUDO};
use crate::autodiff::{AttnMask, Tape, Tensor, Var};
use crate::corpus::ImageSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub patch: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub max_context: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_blocks: 2,
            n_heads: 2,
            d_ff: 64,
            patch: 4,
            image_height: 32,
            image_width: 32,
            max_context: 96,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config("model.d_model must be a positive multiple of model.n_heads".into()));
        }
        if self.patch == 0 || self.image_height % self.patch != 0 || self.image_width % self.patch != 0 {
            return Err(Error::Config("image dimensions must be divisible by model.patch".into()));
        }
        if self.n_blocks == 0 || self.d_ff == 0 {
            return Err(Error::Config("model.n_blocks and model.d_ff must be >= 1".into()));
        }
        if self.max_context <= self.n_patches() {
            return Err(Error::Config("model.max_context leaves no room for text".into()));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.image_height / self.patch) * (self.image_width / self.patch)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Frozen backbone weights. The output projection is the transposed token
/// table.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub patch_proj: Tensor,
    pub patch_bias: Tensor,
    pub positions: Tensor,
    pub tokens: Tensor,
    pub blocks: Vec<BlockParams>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut randn = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect()).unwrap()
        };
        let d = config.d_model;
        let pp = config.patch * config.patch;
        let patch_proj = randn(&[pp, d]);
        let positions = randn(&[config.max_context, d]);
        let tokens = randn(&[vocab_size, d]);
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for _ in 0..config.n_blocks {
            blocks.push(BlockParams {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                wq: randn(&[d, d]),
                wk: randn(&[d, d]),
                wv: randn(&[d, d]),
                wo: randn(&[d, d]),
                bo: Tensor::zeros(&[d]),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                w1: randn(&[d, config.d_ff]),
                b1: Tensor::zeros(&[config.d_ff]),
                w2: randn(&[config.d_ff, d]),
                b2: Tensor::zeros(&[d]),
            });
        }
        Ok(Self {
            config: config.clone(),
            vocab_size,
            patch_proj,
            patch_bias: Tensor::zeros(&[d]),
            positions,
            tokens,
            blocks,
            lnf_gain: Tensor::full(&[d], 1.0),
            lnf_bias: Tensor::zeros(&[d]),
        })
    }

    /// All tensors in canonical serialization order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.patch_proj, &self.patch_bias, &self.positions, &self.tokens];
        for b in &self.blocks {
            out.extend([
                &b.ln1_gain, &b.ln1_bias, &b.wq, &b.wk, &b.wv, &b.wo, &b.bo, &b.ln2_gain, &b.ln2_bias, &b.w1, &b.b1,
                &b.w2, &b.b2,
            ]);
        }
        out.extend([&self.lnf_gain, &self.lnf_bias]);
        out
    }

    /// Rebuilds parameters from tensors in [`ModelParams::tensors`] order.
    pub fn from_tensors(config: &ModelConfig, vocab_size: usize, tensors: Vec<Tensor>) -> Result<Self> {
        let template = Self::init(config, vocab_size, 0)?;
        let shapes: Vec<Vec<usize>> = template.tensors().iter().map(|t| t.shape().to_vec()).collect();
        if shapes.len() != tensors.len() || shapes.iter().zip(&tensors).any(|(s, t)| s.as_slice() != t.shape()) {
            return Err(Error::shape("model_params", "tensor list does not match model config"));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().unwrap();
        let patch_proj = next();
        let patch_bias = next();
        let positions = next();
        let tokens = next();
        let mut blocks = Vec::new();
        for _ in 0..config.n_blocks {
            blocks.push(BlockParams {
                ln1_gain: next(),
                ln1_bias: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                bo: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            });
        }
        Ok(Self {
            config: config.clone(),
            vocab_size,
            patch_proj,
            patch_bias,
            positions,
            tokens,
            blocks,
            lnf_gain: next(),
            lnf_bias: next(),
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        BoundParams::from_vars(self.config.n_blocks, vars)
    }
}

pub struct BoundBlock {
    ln1_gain: Var,
    ln1_bias: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    bo: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Parameters recorded on a tape, as leaves or constants.
pub struct BoundParams {
    pub vars: Vec<Var>,
    patch_proj: Var,
    patch_bias: Var,
    positions: Var,
    tokens: Var,
    blocks: Vec<BoundBlock>,
    lnf_gain: Var,
    lnf_bias: Var,
}

impl BoundParams {
    fn from_vars(n_blocks: usize, vars: Vec<Var>) -> Self {
        let mut it = vars.iter().copied();
        let mut next = || it.next().unwrap();
        let patch_proj = next();
        let patch_bias = next();
        let positions = next();
        let tokens = next();
        let blocks = (0..n_blocks)
            .map(|_| BoundBlock {
                ln1_gain: next(),
                ln1_bias: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                bo: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        let lnf_gain = next();
        let lnf_bias = next();
        Self {
            vars,
            patch_proj,
            patch_bias,
            positions,
            tokens,
            blocks,
            lnf_gain,
            lnf_bias,
        }
    }
}

/// Constant keys and values for the first `len` context positions.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    pub len: usize,
    layers: Vec<(Tensor, Tensor)>,
}

/// One contiguous run of context positions.
pub enum Segment<'a> {
    Image(&'a ImageSample),
    Tokens(&'a [usize]),
}

/// Output of a segment forward: final-norm hidden states for the segment's
/// positions and the keys/values of every position so far.
pub struct SegmentOut {
    pub hidden: Var,
    kv: Vec<(Var, Var)>,
    end: usize,
}

impl SegmentOut {
    pub fn cache(&self, tape: &Tape) -> KvCache {
        KvCache {
            len: self.end,
            layers: self
                .kv
                .iter()
                .map(|(k, v)| (tape.value(*k).clone(), tape.value(*v).clone()))
                .collect(),
        }
    }
}

/// Splits an image into flattened `patch×patch` rows, row-major over patches.
pub fn patchify(image: &ImageSample, patch: usize) -> Result<Tensor> {
    if patch == 0 || image.height % patch != 0 || image.width % patch != 0 {
        return Err(Error::shape(
            "encode_image",
            format!("{}x{} not divisible by patch {patch}", image.height, image.width),
        ));
    }
    let (ph, pw) = (image.height / patch, image.width / patch);
    let mut out = Vec::with_capacity(image.pixels.len());
    for py in 0..ph {
        for px in 0..pw {
            for y in 0..patch {
                let row = (py * patch + y) * image.width + px * patch;
                out.extend_from_slice(&image.pixels[row..row + patch]);
            }
        }
    }
    Tensor::matrix(ph * pw, patch * patch, out)
}

/// Runs `segments` through the decoder, appending to `cache`. `pseudo`
/// supplies the embedding row for the S* token wherever it occurs.
pub fn forward_segments(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &BoundParams,
    cache: &KvCache,
    segments: &[Segment<'_>],
    pseudo: Option<Var>,
) -> Result<SegmentOut> {
    let cfg = &params.config;
    let n_img = cfg.n_patches();
    let mut pos = cache.len;
    let mut parts = Vec::new();
    for seg in segments {
        match seg {
            Segment::Image(image) => {
                if pos != 0 {
                    return Err(Error::Sequence("the image must open the context".into()));
                }
                if image.height != cfg.image_height || image.width != cfg.image_width {
                    return Err(Error::shape(
                        "encode_image",
                        format!("expected {}x{}, got {}x{}", cfg.image_height, cfg.image_width, image.height, image.width),
                    ));
                }
                let patches = tape.constant(patchify(image, cfg.patch)?);
                let e = tape.matmul(patches, bound.patch_proj)?;
                let e = tape.add_row(e, bound.patch_bias)?;
                let p = tape.gather_rows(bound.positions, (0..n_img).collect())?;
                parts.push(tape.add(e, p)?);
                pos = n_img;
            }
            Segment::Tokens(ids) => {
                if ids.is_empty() {
                    continue;
                }
                if pos < n_img {
                    return Err(Error::Sequence("text must follow the image".into()));
                }
                if pos + ids.len() > cfg.max_context {
                    return Err(Error::Sequence(format!(
                        "sequence of {} positions exceeds max context {}",
                        pos + ids.len(),
                        cfg.max_context
                    )));
                }
                if let Some(&bad) = ids.iter().find(|&&t| t >= params.vocab_size) {
                    return Err(Error::OutOfRange {
                        what: "token id",
                        index: bad,
                        size: params.vocab_size,
                    });
                }
                let mut pieces = Vec::new();
                let mut run = Vec::new();
                for &t in ids.iter() {
                    match (t, pseudo) {
                        (PSEUDO, Some(v)) => {
                            if !run.is_empty() {
                                pieces.push(tape.gather_rows(bound.tokens, std::mem::take(&mut run))?);
                            }
                            pieces.push(v);
                        }
                        _ => run.push(t),
                    }
                }
                if !run.is_empty() {
                    pieces.push(tape.gather_rows(bound.tokens, run)?);
                }
                let e = if pieces.len() == 1 { pieces[0] } else { tape.concat_rows(pieces)? };
                let p = tape.gather_rows(bound.positions, (pos..pos + ids.len()).collect())?;
                parts.push(tape.add(e, p)?);
                pos += ids.len();
            }
        }
    }
    if parts.is_empty() {
        return Err(Error::Sequence("empty segment".into()));
    }
    let mut x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(parts)? };

    let mask = AttnMask {
        q_offset: cache.len,
        bidir_prefix: n_img,
    };
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut kv = Vec::with_capacity(bound.blocks.len());
    for (l, blk) in bound.blocks.iter().enumerate() {
        let h = tape.layer_norm(x, blk.ln1_gain, blk.ln1_bias)?;
        let q = tape.matmul(h, blk.wq)?;
        let mut k = tape.matmul(h, blk.wk)?;
        let mut v = tape.matmul(h, blk.wv)?;
        if cache.len > 0 {
            let (ck, cv) = &cache.layers[l];
            let ck = tape.constant(ck.clone());
            let cv = tape.constant(cv.clone());
            k = tape.concat_rows(vec![ck, k])?;
            v = tape.concat_rows(vec![cv, v])?;
        }
        kv.push((k, v));
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let (qh, kh, vh) = if cfg.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, hd * dh, dh)?,
                    tape.slice_cols(k, hd * dh, dh)?,
                    tape.slice_cols(v, hd * dh, dh)?,
                )
            };
            let s = tape.matmul_bt(qh, kh)?;
            let s = tape.scale(s, scale)?;
            let a = tape.masked_softmax(s, mask)?;
            heads.push(tape.matmul(a, vh)?);
        }
        let att = if heads.len() == 1 { heads[0] } else { tape.concat_cols(heads)? };
        let o = tape.matmul(att, blk.wo)?;
        let o = tape.add_row(o, blk.bo)?;
        x = tape.add(x, o)?;

        let h = tape.layer_norm(x, blk.ln2_gain, blk.ln2_bias)?;
        let f = tape.matmul(h, blk.w1)?;
        let f = tape.add_row(f, blk.b1)?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, blk.w2)?;
        let f = tape.add_row(f, blk.b2)?;
        x = tape.add(x, f)?;
    }
    let hidden = tape.layer_norm(x, bound.lnf_gain, bound.lnf_bias)?;
    Ok(SegmentOut { hidden, kv, end: pos })
}

/// Next-token logits for the selected segment rows.
pub fn logits(tape: &mut Tape, bound: &BoundParams, hidden: Var, rows: Vec<usize>) -> Result<Var> {
    let h = tape.gather_rows(hidden, rows)?;
    tape.matmul_bt(h, bound.tokens)
}

fn check_prompt(prompt: &[usize]) -> Result<()> {
    if prompt.iter().filter(|&&t| t == PSEUDO).count() > 1 {
        return Err(Error::Sequence("prompt contains more than one S* token".into()));
    }
    Ok(())
}

fn check_answer(answer: &[usize]) -> Result<()> {
    if answer.last() != Some(&EOS) {
        return Err(Error::Sequence("answer must end with EOS".into()));
    }
    if answer[..answer.len() - 1].contains(&EOS) || answer.contains(&PSEUDO) {
        return Err(Error::Sequence("answer contains control tokens".into()));
    }
    Ok(())
}

/// Teacher-forced language-modeling loss over the answer positions.
pub struct TeacherForced {
    pub loss: Var,
    pub logits: Var,
}

/// Records the full context on `tape`. `answer` ends with EOS; the decoder
/// reads `BOS answer[..-1]` and is scored on `answer`.
pub fn teacher_forced(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &BoundParams,
    image: &ImageSample,
    prompt: &[usize],
    answer: &[usize],
    pseudo: Option<Var>,
) -> Result<TeacherForced> {
    check_prompt(prompt)?;
    check_answer(answer)?;
    let mut text = prompt.to_vec();
    text.push(BOS);
    text.extend_from_slice(&answer[..answer.len() - 1]);
    let out = forward_segments(
        tape,
        params,
        bound,
        &KvCache::default(),
        &[Segment::Image(image), Segment::Tokens(&text)],
        pseudo,
    )?;
    let first = params.config.n_patches() + prompt.len();
    let lg = logits(tape, bound, out.hidden, (first..first + answer.len()).collect())?;
    let loss = tape.cross_entropy(lg, answer.to_vec(), vec![true; answer.len()])?;
    Ok(TeacherForced { loss, logits: lg })
}

/// Same loss as [`teacher_forced`], but everything before the S* token is
/// computed off-tape as a constant cache. Only valid when the frozen
/// parameters are bound as constants.
pub fn teacher_forced_from_pseudo(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &BoundParams,
    image: &ImageSample,
    prompt: &[usize],
    answer: &[usize],
    pseudo: Var,
) -> Result<TeacherForced> {
    check_prompt(prompt)?;
    check_answer(answer)?;
    let split = prompt
        .iter()
        .position(|&t| t == PSEUDO)
        .ok_or_else(|| Error::Sequence("prompt has no S* token".into()))?;
    let cache = prefix_cache(params, image, &prompt[..split])?;
    let mut text = prompt[split..].to_vec();
    text.push(BOS);
    text.extend_from_slice(&answer[..answer.len() - 1]);
    let out = forward_segments(tape, params, bound, &cache, &[Segment::Tokens(&text)], Some(pseudo))?;
    let first = prompt.len() - split;
    let lg = logits(tape, bound, out.hidden, (first..first + answer.len()).collect())?;
    let loss = tape.cross_entropy(lg, answer.to_vec(), vec![true; answer.len()])?;
    Ok(TeacherForced { loss, logits: lg })
}

/// Constant cache for `[image | tokens]` under frozen parameters.
pub fn prefix_cache(params: &ModelParams, image: &ImageSample, tokens: &[usize]) -> Result<KvCache> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let out = forward_segments(
        &mut tape,
        params,
        &bound,
        &KvCache::default(),
        &[Segment::Image(image), Segment::Tokens(tokens)],
        None,
    )?;
    Ok(out.cache(&tape))
}

/// Mean loss and logits without recording gradients.
pub fn evaluate_loss(
    params: &ModelParams,
    image: &ImageSample,
    prompt: &[usize],
    answer: &[usize],
    pseudo: Option<&Tensor>,
) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let pv = pseudo.map(|p| tape.constant(p.clone()));
    let tf = teacher_forced(&mut tape, params, &bound, image, prompt, answer, pv)?;
    Ok((tape.value(tf.loss).data()[0], tape.value(tf.logits).clone()))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from BOS until EOS, `max_len` emitted tokens, or the end
/// of the context. Returns the generated ids (without EOS).
pub fn generate_ids(
    params: &ModelParams,
    image: &ImageSample,
    prompt: &[usize],
    max_len: usize,
    pseudo: Option<&Tensor>,
) -> Result<Vec<usize>> {
    check_prompt(prompt)?;
    let mut out = Vec::new();
    if max_len == 0 {
        return Ok(out);
    }
    let mut text = prompt.to_vec();
    text.push(BOS);

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let pv = pseudo.map(|p| tape.constant(p.clone()));
    let step = forward_segments(
        &mut tape,
        params,
        &bound,
        &KvCache::default(),
        &[Segment::Image(image), Segment::Tokens(&text)],
        pv,
    )?;
    let last = tape.value(step.hidden).rows_cols().0 - 1;
    let lg = logits(&mut tape, &bound, step.hidden, vec![last])?;
    let mut next = argmax(tape.value(lg).data());
    let mut cache = step.cache(&tape);

    loop {
        if next == EOS {
            break;
        }
        out.push(next);
        if out.len() >= max_len || cache.len >= params.config.max_context {
            break;
        }
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let step = forward_segments(&mut tape, params, &bound, &cache, &[Segment::Tokens(&[next])], None)?;
        let lg = logits(&mut tape, &bound, step.hidden, vec![0])?;
        next = argmax(tape.value(lg).data());
        cache = step.cache(&tape);
    }
    Ok(out)
}

pub fn generate(
    params: &ModelParams,
    vocab: &Vocab,
    image: &ImageSample,
    prompt: &[usize],
    max_len: usize,
    pseudo: Option<&Tensor>,
) -> Result<String> {
    Ok(vocab.detokenize(&generate_ids(params, image, prompt, max_len, pseudo)?))
}
