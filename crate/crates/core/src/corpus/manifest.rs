use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{pgm, synth, CorpusConfig, Family, FingerprintBank, GeneratorId, ImageSample, Split};
use crate::error::{Error, Result};
use crate::provenance::short_hash;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CORPUS_FILE: &str = "corpus.json";

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub label: GeneratorId,
    pub family: Option<Family>,
    pub split: Split,
    /// Relative to the corpus directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CorpusHeader {
    config: CorpusConfig,
    config_hash: String,
    counts: Vec<(GeneratorId, usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub config: CorpusConfig,
    pub config_hash: String,
    pub records: Vec<SampleRecord>,
}

pub fn sample_id(gen: GeneratorId, split: Split, index: usize) -> String {
    format!("{}-{}-{:05}", gen.slug(), split.as_str(), index)
}

impl CorpusManifest {
    /// Manifest implied by `config`, without touching the filesystem.
    pub fn plan(config: &CorpusConfig) -> Result<Self> {
        config.validate()?;
        let mut records = Vec::new();
        for gen in GeneratorId::ALL {
            for split in [Split::Train, Split::Test] {
                for index in 0..config.count(gen, split) {
                    let id = sample_id(gen, split, index);
                    records.push(SampleRecord {
                        path: format!("images/{id}.pgm"),
                        id,
                        label: gen,
                        family: gen.family(),
                        split,
                    });
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            config_hash: short_hash(&serde_json::to_vec(config)?),
            records,
        })
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Test images shared by every evaluation subset.
    pub fn real_test_pool(&self) -> Vec<&SampleRecord> {
        self.split(Split::Test)
            .filter(|r| r.label == GeneratorId::Real)
            .collect()
    }

    /// Test population for one fake generator: its fakes plus the shared
    /// real pool.
    pub fn test_subset(&self, gen: GeneratorId) -> Vec<&SampleRecord> {
        let mut out: Vec<&SampleRecord> = self
            .split(Split::Test)
            .filter(|r| r.label == gen)
            .collect();
        out.extend(self.real_test_pool());
        out
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header_path = dir.join(CORPUS_FILE);
        if !header_path.exists() {
            return Err(Error::MissingArtifact(header_path));
        }
        let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: CorpusHeader = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: header_path.clone(),
            reason: e.to_string(),
        })?;
        let path = dir.join(MANIFEST_FILE);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| Error::Corrupt {
                path: path.clone(),
                reason: e.to_string(),
            })?);
        }
        let expected = Self::plan(&header.config)?;
        if expected.config_hash != header.config_hash || expected.records != records {
            return Err(Error::Corrupt {
                path,
                reason: "manifest does not match its recorded config".into(),
            });
        }
        Ok(expected)
    }
}

/// Synthesizes every image and writes the PGM files, `manifest.jsonl` and
/// `corpus.json` under `out`.
pub fn build_corpus(config: &CorpusConfig, out: &Path) -> Result<CorpusManifest> {
    let manifest = CorpusManifest::plan(config)?;
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let bank = FingerprintBank::new(config.height, config.width, config.ldm_gan_projection);

    for rec in &manifest.records {
        let index: usize = rec.id.rsplit('-').next().and_then(|s| s.parse().ok()).expect("planned id");
        let sample = synth(config, &bank, rec.label, rec.split, index);
        pgm::write_pgm(&out.join(&rec.path), config.width, config.height, &sample.pixels)?;
    }

    let path = out.join(MANIFEST_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for rec in &manifest.records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let header = CorpusHeader {
        config: config.clone(),
        config_hash: manifest.config_hash.clone(),
        counts: GeneratorId::ALL
            .iter()
            .map(|g| (*g, config.count(*g, Split::Train), config.count(*g, Split::Test)))
            .collect(),
    };
    let header_path = out.join(CORPUS_FILE);
    fs::write(&header_path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&header_path, e))?;
    Ok(manifest)
}

/// Reads the PGM behind each record.
pub fn load_images<'a>(dir: &Path, records: impl IntoIterator<Item = &'a SampleRecord>) -> Result<Vec<ImageSample>> {
    records
        .into_iter()
        .map(|rec| {
            let path: PathBuf = dir.join(&rec.path);
            let (width, height, pixels) = pgm::read_pgm(&path)?;
            Ok(ImageSample {
                height,
                width,
                pixels,
                label: rec.label,
                split: rec.split,
            })
        })
        .collect()
}
