//! The frozen toy vision-language model: vocabulary, parameters, forward
//! pass, greedy decoding and backbone pretraining.

mod model;
mod pretrain;
mod store;
mod vocab;

pub use model::{
    argmax, evaluate_loss, forward_segments, generate, generate_ids, logits, patchify, prefix_cache, teacher_forced,
    teacher_forced_from_pseudo, BlockParams, BoundParams, KvCache, ModelConfig, ModelParams, Segment, SegmentOut,
    TeacherForced,
};
pub use pretrain::{family_only_label, pretrain_backbone, PretrainConfig, PretrainReport};
pub use vocab::{Role, TokenSequence, Vocab, BOS, EOS, IMG, PAD, PSEUDO, PSEUDO_WORD};

use crate::autodiff::{Tape, Tensor};
use crate::corpus::ImageSample;
use crate::error::Result;

/// Position-encoded visual embeddings, one row per patch.
pub fn encode_image(params: &ModelParams, image: &ImageSample) -> Result<Tensor> {
    let mut tape = Tape::new();
    let patches = tape.constant(patchify(image, params.config.patch)?);
    let w = tape.constant(params.patch_proj.clone());
    let b = tape.constant(params.patch_bias.clone());
    let pos = tape.constant(params.positions.clone());
    let e = tape.matmul(patches, w)?;
    let e = tape.add_row(e, b)?;
    let n = params.config.n_patches();
    let p = tape.gather_rows(pos, (0..n).collect())?;
    let out = tape.add(e, p)?;
    Ok(tape.value(out).clone())
}

/// Answer token ids (ending in EOS) for a rendered label.
pub fn answer_ids(vocab: &Vocab, text: &str) -> Result<Vec<usize>> {
    let mut ids = vocab.tokenize(text)?;
    ids.push(EOS);
    Ok(ids)
}

/// Full context as a role-tagged sequence (image positions as IMG).
pub fn context_layout(config: &ModelConfig, prompt: &[usize], answer: &[usize]) -> TokenSequence {
    let mut ids = vec![IMG; config.n_patches()];
    let mut roles = vec![Role::Image; ids.len()];
    ids.extend_from_slice(prompt);
    roles.extend(std::iter::repeat(Role::Prompt).take(prompt.len()));
    ids.push(BOS);
    ids.extend_from_slice(&answer[..answer.len().saturating_sub(1)]);
    roles.extend(std::iter::repeat(Role::Answer).take(answer.len()));
    TokenSequence { ids, roles }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answer::{build_question, render_label};
    use crate::corpus::{synth, CorpusConfig, FingerprintBank, GeneratorId, Split};
    use crate::error::Error;

    fn setup() -> (ModelParams, Vocab, ImageSample) {
        let vocab = Vocab::new();
        let params = ModelParams::init(&ModelConfig::default(), vocab.len(), 3).unwrap();
        let c = CorpusConfig::default();
        let bank = FingerprintBank::new(32, 32, 0.0);
        let img = synth(&c, &bank, GeneratorId::Stylegan, Split::Train, 0);
        (params, vocab, img)
    }

    #[test]
    fn image_encoding_shapes_and_zero_input() {
        let (params, _, img) = setup();
        let e = encode_image(&params, &img).unwrap();
        assert_eq!(e.shape(), &[64, 32]);
        let zero = ImageSample {
            pixels: vec![0.0; 1024],
            ..img.clone()
        };
        let e = encode_image(&params, &zero).unwrap();
        for r in 0..64 {
            for c in 0..32 {
                let want = params.positions.row(r)[c] + params.patch_bias.data()[c];
                assert_eq!(e.row(r)[c], want);
            }
        }
        assert_eq!(encode_image(&params, &img).unwrap(), encode_image(&params, &img).unwrap());
        let odd = ImageSample {
            height: 30,
            width: 30,
            pixels: vec![0.0; 900],
            ..img
        };
        assert!(matches!(encode_image(&params, &odd), Err(Error::Shape { .. })));
    }

    #[test]
    fn layout_orders_image_prompt_answer() {
        let (params, vocab, _) = setup();
        let q = vocab.tokenize(build_question(true)).unwrap();
        let a = answer_ids(&vocab, &render_label(GeneratorId::Sd14)).unwrap();
        let seq = context_layout(&params.config, &q, &a);
        assert!(seq.len() <= params.config.max_context);
        let last_image = seq.roles.iter().rposition(|r| *r == Role::Image).unwrap();
        let first_prompt = seq.roles.iter().position(|r| *r == Role::Prompt).unwrap();
        let last_prompt = seq.roles.iter().rposition(|r| *r == Role::Prompt).unwrap();
        let first_answer = seq.roles.iter().position(|r| *r == Role::Answer).unwrap();
        assert!(last_image < first_prompt && last_prompt < first_answer);
        assert_eq!(seq.pseudo_count(), 1);
    }

    #[test]
    fn random_model_loss_is_near_uniform() {
        let (params, vocab, _) = setup();
        let c = CorpusConfig::default();
        let bank = FingerprintBank::new(32, 32, 0.0);
        let q = vocab.tokenize(build_question(false)).unwrap();
        let mut total = 0.0;
        let gens = [GeneratorId::Real, GeneratorId::Progan, GeneratorId::Sd14, GeneratorId::Glide];
        for (i, g) in gens.iter().enumerate() {
            let img = synth(&c, &bank, *g, Split::Train, i);
            let a = answer_ids(&vocab, &render_label(*g)).unwrap();
            let (loss, _) = evaluate_loss(&params, &img, &q, &a, None).unwrap();
            assert!(loss >= 0.0);
            total += loss;
        }
        let mean = total / gens.len() as f64;
        let lnv = (vocab.len() as f64).ln();
        assert!((mean - lnv).abs() < 0.15 * lnv, "mean {mean} vs ln V {lnv}");
    }

    #[test]
    fn pseudo_embedding_changes_the_loss() {
        let (params, vocab, img) = setup();
        let q = vocab.tokenize(build_question(true)).unwrap();
        let a = answer_ids(&vocab, &render_label(GeneratorId::Stylegan)).unwrap();
        let base = evaluate_loss(&params, &img, &q, &a, None).unwrap().0;
        let photo = params.tokens.row(vocab.id("photo").unwrap()).to_vec();
        let swapped = evaluate_loss(&params, &img, &q, &a, Some(&Tensor::vector(photo))).unwrap().0;
        assert_ne!(base, swapped);
    }

    #[test]
    fn forward_rejects_bad_sequences() {
        let (params, vocab, img) = setup();
        let a = answer_ids(&vocab, &render_label(GeneratorId::Real)).unwrap();
        let two = vec![PSEUDO, PSEUDO];
        assert!(matches!(evaluate_loss(&params, &img, &two, &a, None), Err(Error::Sequence(_))));
        let no_eos = vocab.tokenize("no").unwrap();
        assert!(matches!(evaluate_loss(&params, &img, &[], &no_eos, None), Err(Error::Sequence(_))));
        let long = vec![vocab.id("is").unwrap(); 40];
        assert!(matches!(evaluate_loss(&params, &img, &long, &a, None), Err(Error::Sequence(_))));
    }

    #[test]
    fn causality_of_answer_logits() {
        let (params, vocab, img) = setup();
        let q = vocab.tokenize(build_question(false)).unwrap();
        let a = answer_ids(&vocab, &render_label(GeneratorId::Progan)).unwrap();
        let mut b = a.clone();
        // edit the last real answer token; the logits row that reads it is the last one
        let k = b.len() - 2;
        b[k] = vocab.id("ldm").unwrap();
        let (_, la) = evaluate_loss(&params, &img, &q, &a, None).unwrap();
        let (_, lb) = evaluate_loss(&params, &img, &q, &b, None).unwrap();
        for r in 0..=k {
            assert_eq!(la.row(r), lb.row(r), "row {r}");
        }
        assert_ne!(la.row(k + 1), lb.row(k + 1));
    }

    #[test]
    fn cached_generation_matches_full_recompute() {
        let (params, vocab, img) = setup();
        let q = vocab.tokenize(build_question(false)).unwrap();
        let ids = generate_ids(&params, &img, &q, 6, None).unwrap();
        // recompute each step from scratch
        let mut text = q.clone();
        text.push(BOS);
        let mut expect = Vec::new();
        for _ in 0..6 {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false);
            let out = forward_segments(
                &mut tape,
                &params,
                &bound,
                &KvCache::default(),
                &[Segment::Image(&img), Segment::Tokens(&text)],
                None,
            )
            .unwrap();
            let last = tape.value(out.hidden).rows_cols().0 - 1;
            let lg = logits(&mut tape, &bound, out.hidden, vec![last]).unwrap();
            let next = argmax(tape.value(lg).data());
            if next == EOS {
                break;
            }
            expect.push(next);
            text.push(next);
        }
        assert_eq!(ids, expect);
        assert_eq!(generate_ids(&params, &img, &q, 6, None).unwrap(), ids);
        assert!(generate(&params, &vocab, &img, &q, 0, None).unwrap().is_empty());
    }

    #[test]
    fn constructed_projection_forces_a_token() {
        let (mut params, vocab, img) = setup();
        // zero the residual stream's final norm so every hidden state equals
        // the bias, then make that bias align with one token row only
        let target = vocab.id("glide").unwrap();
        let d = params.config.d_model;
        params.lnf_gain = Tensor::zeros(&[d]);
        let mut bias = vec![0.0; d];
        bias[0] = 1.0;
        params.lnf_bias = Tensor::vector(bias);
        let mut table = vec![0.0; params.vocab_size * d];
        table[target * d] = 5.0;
        params.tokens = Tensor::matrix(params.vocab_size, d, table).unwrap();
        let q = vocab.tokenize(build_question(false)).unwrap();
        let ids = generate_ids(&params, &img, &q, 5, None).unwrap();
        assert_eq!(ids, vec![target; 5]);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
