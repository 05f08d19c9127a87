//! Backbone checkpoints: frozen parameters plus an optional S* record.

use std::path::Path;

use super::model::{ModelConfig, ModelParams};
use super::vocab::Vocab;
use crate::autodiff::Tensor;
use crate::checkpoint::{Checkpoint, Kind};
use crate::error::{Error, Result};
use crate::provenance::sha256_hex;

impl ModelParams {
    /// Every parameter, concatenated in canonical order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// SHA-256 over the little-endian payload; equals the checkpoint's
    /// parameter checksum.
    pub fn checksum(&self) -> String {
        let bytes: Vec<u8> = self.flat().iter().flat_map(|v| v.to_le_bytes()).collect();
        sha256_hex(&bytes)
    }

    pub fn to_checkpoint(&self, vocab: &Vocab, pseudo: Option<&Tensor>) -> Checkpoint {
        let c = &self.config;
        let dims = [
            c.d_model,
            c.n_blocks,
            c.n_heads,
            c.d_ff,
            c.patch,
            c.image_height,
            c.image_width,
            c.max_context,
            self.vocab_size,
        ];
        Checkpoint {
            kind: Kind::Backbone,
            dims: dims.iter().map(|&d| d as u32).collect(),
            vocab_hash: vocab_hash_bytes(vocab),
            payload: self.flat(),
            pseudo: pseudo.map(|p| p.to_vec()),
        }
    }

    /// Rebuilds the backbone and its S* embedding, if one was stored.
    pub fn from_checkpoint(ckpt: &Checkpoint, vocab: &Vocab, path: &Path) -> Result<(Self, Option<Tensor>)> {
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        if ckpt.kind != Kind::Backbone {
            return Err(corrupt("not a backbone checkpoint".into()));
        }
        if ckpt.vocab_hash != vocab_hash_bytes(vocab) {
            return Err(corrupt("vocabulary hash mismatch".into()));
        }
        let d: Vec<usize> = ckpt.dims.iter().map(|&x| x as usize).collect();
        if d.len() != 9 {
            return Err(corrupt(format!("expected 9 dims, found {}", d.len())));
        }
        let config = ModelConfig {
            d_model: d[0],
            n_blocks: d[1],
            n_heads: d[2],
            d_ff: d[3],
            patch: d[4],
            image_height: d[5],
            image_width: d[6],
            max_context: d[7],
            ..ModelConfig::default()
        };
        config.validate().map_err(|e| corrupt(e.to_string()))?;
        if d[8] != vocab.len() {
            return Err(corrupt(format!("vocabulary size {} != {}", d[8], vocab.len())));
        }
        let template = ModelParams::init(&config, d[8], 0)?;
        let mut offset = 0;
        let mut tensors = Vec::new();
        for t in template.tensors() {
            let end = offset + t.len();
            let chunk = ckpt
                .payload
                .get(offset..end)
                .ok_or_else(|| corrupt("payload shorter than the dims imply".into()))?;
            tensors.push(Tensor::new(t.shape().to_vec(), chunk.to_vec())?);
            offset = end;
        }
        if offset != ckpt.payload.len() {
            return Err(corrupt("payload longer than the dims imply".into()));
        }
        let params = ModelParams::from_tensors(&config, d[8], tensors)?;
        let pseudo = match &ckpt.pseudo {
            None => None,
            Some(p) if p.len() == config.d_model => Some(Tensor::vector(p.clone())),
            Some(p) => return Err(corrupt(format!("S* record has {} values, model width {}", p.len(), config.d_model))),
        };
        Ok((params, pseudo))
    }

    pub fn save(&self, vocab: &Vocab, pseudo: Option<&Tensor>, path: &Path) -> Result<()> {
        self.to_checkpoint(vocab, pseudo).save(path)
    }

    pub fn load(vocab: &Vocab, path: &Path) -> Result<(Self, Option<Tensor>)> {
        Self::from_checkpoint(&Checkpoint::load(path)?, vocab, path)
    }
}

fn vocab_hash_bytes(vocab: &Vocab) -> [u8; 32] {
    let mut out = [0u8; 32];
    hex::decode_to_slice(vocab.hash(), &mut out).expect("sha256 hex");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tuning::init_pseudo_embedding;

    #[test]
    fn round_trip_with_and_without_pseudo() {
        let vocab = Vocab::new();
        let params = ModelParams::init(&ModelConfig::default(), vocab.len(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backbone.ckpt");
        params.save(&vocab, None, &path).unwrap();
        let (back, pseudo) = ModelParams::load(&vocab, &path).unwrap();
        assert_eq!(back, params);
        assert!(pseudo.is_none());

        let v = init_pseudo_embedding(1, 32, 0.02);
        params.save(&vocab, Some(&v), &path).unwrap();
        let (back, pseudo) = ModelParams::load(&vocab, &path).unwrap();
        assert_eq!(back.checksum(), params.checksum());
        assert_eq!(pseudo.unwrap(), v);
        assert_eq!(params.to_checkpoint(&vocab, None).payload_checksum(), params.checksum());
    }

    #[test]
    fn missing_and_wrong_kind() {
        let vocab = Vocab::new();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nope.ckpt");
        assert!(matches!(ModelParams::load(&vocab, &path), Err(Error::MissingArtifact(_))));
        let params = ModelParams::init(&ModelConfig::default(), vocab.len(), 3).unwrap();
        let mut c = params.to_checkpoint(&vocab, None);
        c.kind = Kind::Baseline;
        assert!(matches!(ModelParams::from_checkpoint(&c, &vocab, &path), Err(Error::Corrupt { .. })));
        let mut c = params.to_checkpoint(&vocab, None);
        c.payload.pop();
        assert!(ModelParams::from_checkpoint(&c, &vocab, &path).is_err());
    }
}
