//! Experiment orchestration behind the CLI: every stage reads and writes
//! artifacts under one output directory.
//!
//! ```text
//! out/corpus/                 manifest.jsonl, corpus.json, images/*.pgm
//! out/model.ckpt              frozen backbone, plus the S* record after `tune`
//! out/pretrain.json
//! out/tune.json, out/tune_history.csv
//! out/baseline.ckpt, out/baseline.json
//! out/eval/<method>-<subsets>/predictions.jsonl, metrics.json, *.csv, *.pgm
//! ```

mod report;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use report::{cmd_report, ComparisonTable};

use crate::answer::{build_question, parse_answer, Prediction, Truth};
use crate::autodiff::Tensor;
use crate::baseline::{train_baseline, verdict, BaselineConfig, BaselineParams};
use crate::checkpoint::{frozen_section, Checkpoint};
use crate::corpus::{build_corpus, load_images, stream_seed, CorpusConfig, CorpusManifest, GeneratorId, Split};
use crate::error::{Error, Result};
use crate::metrics::{build_report, detection_metrics, Confusion, DetectionMetrics, MetricsReport};
use crate::provenance::{short_hash, Provenance};
use crate::tuning::{init_pseudo_embedding, make_triplets, tune, TuneConfig, TuneHistory};
use crate::vlm::{generate, pretrain_backbone, ModelConfig, ModelParams, PretrainConfig, PretrainReport, Vocab};

pub const CORPUS_DIR: &str = "corpus";
pub const MODEL_FILE: &str = "model.ckpt";
pub const BASELINE_FILE: &str = "baseline.ckpt";
pub const METRICS_FILE: &str = "metrics.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SubsetSelection {
    Seen,
    Unseen,
    All,
}

impl SubsetSelection {
    pub fn generators(self) -> Vec<GeneratorId> {
        match self {
            SubsetSelection::Seen => GeneratorId::SEEN.to_vec(),
            SubsetSelection::Unseen => GeneratorId::UNSEEN.to_vec(),
            SubsetSelection::All => GeneratorId::FAKES.to_vec(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SubsetSelection::Seen => "seen",
            SubsetSelection::Unseen => "unseen",
            SubsetSelection::All => "all",
        }
    }
}

/// Which S* embedding evaluation feeds the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PseudoSource {
    /// The embedding stored by `tune`.
    Tuned,
    /// The seeded random starting point of tuning.
    Init,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub subsets: SubsetSelection,
    pub with_pseudo: bool,
    pub pseudo_source: PseudoSource,
    pub baseline: bool,
    pub max_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            subsets: SubsetSelection::Seen,
            with_pseudo: true,
            pseudo_source: PseudoSource::Tuned,
            baseline: false,
            max_len: 24,
        }
    }
}

/// Everything a run depends on. `seed` is the root: the corpus, backbone,
/// tuning and baseline seeds are all derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub tune: TuneConfig,
    pub baseline: BaselineConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            tune: TuneConfig::default(),
            baseline: BaselineConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Copies derived seeds into the stage configs and checks cross-stage
    /// consistency.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        c.corpus.seed = self.seed;
        c.tune.seed = stream_seed(&[self.seed, 2]);
        c.baseline.optim.seed = stream_seed(&[self.seed, 3]);
        c.corpus.validate()?;
        c.model.validate()?;
        c.tune.validate()?;
        c.baseline.optim.validate()?;
        if (c.corpus.height, c.corpus.width) != (c.model.image_height, c.model.image_width) {
            return Err(Error::Config("corpus and model image sizes differ".into()));
        }
        Ok(c)
    }

    pub fn pretrain_seed(&self) -> u64 {
        stream_seed(&[self.seed, 1])
    }

    pub fn hash(&self) -> String {
        short_hash(&serde_json::to_vec(self).expect("config serializes"))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn load_corpus(config: &ExperimentConfig, out: &Path) -> Result<CorpusManifest> {
    let manifest = CorpusManifest::load(&out.join(CORPUS_DIR))?;
    if manifest.config != config.corpus {
        return Err(Error::Config(
            "corpus on disk was built from a different corpus config; rerun `corpus`".into(),
        ));
    }
    Ok(manifest)
}

fn provenance(config: &ExperimentConfig, manifest: &CorpusManifest, checkpoints: Vec<(String, String)>) -> Provenance {
    Provenance {
        config_hash: config.hash(),
        corpus_seed: manifest.seed(),
        corpus_hash: manifest.config_hash.clone(),
        checkpoints,
    }
}

pub fn cmd_corpus(config: &ExperimentConfig, out: &Path) -> Result<CorpusManifest> {
    let config = config.resolved()?;
    build_corpus(&config.corpus, &out.join(CORPUS_DIR))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub config: ExperimentConfig,
    pub provenance: Provenance,
    pub report: PretrainReport,
}

/// Trains the backbone on the partial task and writes the frozen
/// checkpoint without an S* record.
pub fn cmd_pretrain(config: &ExperimentConfig, out: &Path, mut log: impl FnMut(&str)) -> Result<PretrainRecord> {
    let config = config.resolved()?;
    let manifest = load_corpus(&config, out)?;
    let dir = out.join(CORPUS_DIR);
    let train = load_images(&dir, manifest.split(Split::Train))?;
    let vocab = Vocab::new();
    let (params, report) = pretrain_backbone(
        &train,
        &vocab,
        &config.model,
        &config.pretrain,
        config.pretrain_seed(),
        |e, l| log(&format!("pretrain epoch {e}: mean loss {l:.6}")),
    )?;
    let path = out.join(MODEL_FILE);
    params.save(&vocab, None, &path)?;
    let record = PretrainRecord {
        provenance: provenance(&config, &manifest, vec![(MODEL_FILE.into(), params.checksum())]),
        config,
        report,
    };
    write_json(&out.join("pretrain.json"), &record)?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub config: ExperimentConfig,
    pub provenance: Provenance,
    pub epoch_losses: Vec<f64>,
}

pub fn cmd_pretrain_baseline(config: &ExperimentConfig, out: &Path, mut log: impl FnMut(&str)) -> Result<BaselineRecord> {
    let config = config.resolved()?;
    let manifest = load_corpus(&config, out)?;
    let train = load_images(&out.join(CORPUS_DIR), manifest.split(Split::Train))?;
    let (params, epoch_losses) = train_baseline(&train, &config.baseline, |e, l| {
        log(&format!("baseline epoch {e}: mean loss {l:.6}"))
    })?;
    let path = out.join(BASELINE_FILE);
    params.save(&path)?;
    let record = BaselineRecord {
        provenance: provenance(
            &config,
            &manifest,
            vec![(BASELINE_FILE.into(), params.to_checkpoint().payload_checksum())],
        ),
        config,
        epoch_losses,
    };
    write_json(&out.join("baseline.json"), &record)?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneRecord {
    pub config: ExperimentConfig,
    pub provenance: Provenance,
    pub history: TuneHistory,
}

/// The seeded starting point of tuning.
pub fn initial_pseudo(config: &ExperimentConfig) -> Result<Tensor> {
    let config = config.resolved()?;
    Ok(init_pseudo_embedding(config.tune.seed, config.model.d_model, config.tune.init_std))
}

/// Tunes S* against the frozen backbone and rewrites the checkpoint with
/// the new S* record. The frozen section is verified to be byte-identical.
pub fn cmd_tune(config: &ExperimentConfig, out: &Path, mut log: impl FnMut(&str)) -> Result<TuneRecord> {
    let config = config.resolved()?;
    let manifest = load_corpus(&config, out)?;
    let path = out.join(MODEL_FILE);
    let before = read_bytes(&path)?;
    let vocab = Vocab::new();
    let (params, _) = ModelParams::load(&vocab, &path)?;
    let train = load_images(&out.join(CORPUS_DIR), manifest.split(Split::Train))?;
    let triplets = make_triplets(&vocab, train)?;
    let v0 = initial_pseudo(&config)?;
    let (v, history) = tune(&params, &v0, &triplets, &config.tune, |e| {
        log(&format!("tune epoch {}: mean loss {:.6}, lr {:.3e}", e.epoch, e.mean_loss, e.lr))
    })?;
    let ckpt = params.to_checkpoint(&vocab, Some(&v));
    let after = ckpt.encode();
    let corrupt = |reason: String| Error::Corrupt {
        path: path.clone(),
        reason,
    };
    if frozen_section(&before).map_err(corrupt)? != frozen_section(&after).map_err(corrupt)? {
        return Err(Error::InvalidArgument("frozen parameters changed during tuning".into()));
    }
    write_file(&path, &after)?;
    write_file(&out.join("tune_history.csv"), history.to_csv().as_bytes())?;
    let record = TuneRecord {
        provenance: provenance(
            &config,
            &manifest,
            vec![
                (MODEL_FILE.into(), ckpt.payload_checksum()),
                ("pseudo".into(), ckpt.pseudo_checksum().expect("pseudo present")),
            ],
        ),
        config,
        history,
    };
    write_json(&out.join("tune.json"), &record)?;
    Ok(record)
}

/// Detection scores of one subset (its fakes plus the real pool).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub subset: GeneratorId,
    pub detection: DetectionMetrics,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub subsets: SubsetSelection,
    pub config: ExperimentConfig,
    pub provenance: Provenance,
    pub detection: Vec<DetectionRow>,
    /// Text-answer metrics; absent for the baseline classifier.
    pub metrics: Option<MetricsReport>,
}

impl EvalReport {
    pub fn detection_average(&self) -> (f64, f64) {
        let n = self.detection.len().max(1) as f64;
        (
            self.detection.iter().map(|r| r.detection.acc).sum::<f64>() / n,
            self.detection.iter().map(|r| r.detection.f1).sum::<f64>() / n,
        )
    }
}

pub fn method_name(eval: &EvalConfig) -> &'static str {
    match (eval.baseline, eval.with_pseudo, eval.pseudo_source) {
        (true, ..) => "cnn-baseline",
        (false, false, _) => "vqa-plain",
        (false, true, PseudoSource::Tuned) => "vqa-tuned",
        (false, true, PseudoSource::Init) => "vqa-init",
    }
}

pub fn eval_dir(out: &Path, eval: &EvalConfig) -> PathBuf {
    out.join("eval").join(format!("{}-{}", method_name(eval), eval.subsets.as_str()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BaselinePrediction {
    id: String,
    prob_fake: f64,
    is_fake: bool,
    truth: Truth,
}

/// Evaluates the chosen subsets, writing predictions (sorted by sample id),
/// the metrics JSON and the matrices. Returns the report and its directory.
pub fn cmd_eval(config: &ExperimentConfig, out: &Path, mut log: impl FnMut(&str)) -> Result<(EvalReport, PathBuf)> {
    let config = config.resolved()?;
    let manifest = load_corpus(&config, out)?;
    let corpus_dir = out.join(CORPUS_DIR);
    let gens = config.eval.subsets.generators();
    let mut records: Vec<_> = manifest
        .split(Split::Test)
        .filter(|r| r.label == GeneratorId::Real || gens.contains(&r.label))
        .collect();
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let images = load_images(&corpus_dir, records.iter().copied())?;
    let dir = eval_dir(out, &config.eval);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let method = method_name(&config.eval).to_string();

    let (parsed, lines, checkpoints, metrics) = if config.eval.baseline {
        let path = out.join(BASELINE_FILE);
        let params = BaselineParams::load(&path)?;
        let mut parsed = Vec::with_capacity(images.len());
        let mut lines = Vec::with_capacity(images.len());
        for (rec, img) in records.iter().zip(&images) {
            let p = params.predict(img)?;
            let v = verdict(p);
            lines.push(serde_json::to_string(&BaselinePrediction {
                id: rec.id.clone(),
                prob_fake: p,
                is_fake: v.is_fake == Some(true),
                truth: Truth::from(rec.label),
            })?);
            parsed.push(v);
        }
        let sums = vec![(BASELINE_FILE.to_string(), params.to_checkpoint().payload_checksum())];
        (parsed, lines, sums, None)
    } else {
        let path = out.join(MODEL_FILE);
        let vocab = Vocab::new();
        let ckpt = Checkpoint::load(&path)?;
        let (params, stored) = ModelParams::from_checkpoint(&ckpt, &vocab, &path)?;
        let mut sums = vec![(MODEL_FILE.to_string(), ckpt.payload_checksum())];
        let pseudo = match (config.eval.with_pseudo, config.eval.pseudo_source) {
            (false, _) => None,
            (true, PseudoSource::Init) => Some(initial_pseudo(&config)?),
            (true, PseudoSource::Tuned) => Some(stored.ok_or_else(|| {
                Error::InvalidArgument(format!("{} has no tuned S* record; run `tune` first", path.display()))
            })?),
        };
        if let Some(v) = &pseudo {
            let bytes: Vec<u8> = v.data().iter().flat_map(|x| x.to_le_bytes()).collect();
            sums.push(("pseudo".into(), crate::provenance::sha256_hex(&bytes)));
        }
        let question = build_question(pseudo.is_some());
        let prompt = vocab.tokenize(question)?;
        let mut preds = Vec::with_capacity(images.len());
        for (k, (rec, img)) in records.iter().zip(&images).enumerate() {
            let generated = generate(&params, &vocab, img, &prompt, config.eval.max_len, pseudo.as_ref())?;
            preds.push(Prediction {
                id: rec.id.clone(),
                question: question.to_string(),
                parsed: parse_answer(&generated),
                generated,
                truth: Truth::from(rec.label),
            });
            if (k + 1) % 500 == 0 {
                log(&format!("eval {}/{}", k + 1, images.len()));
            }
        }
        let lines = preds.iter().map(serde_json::to_string).collect::<serde_json::Result<Vec<_>>>()?;
        let parsed = preds.iter().map(|p| p.parsed).collect();
        (parsed, lines, sums, Some(build_report(&preds)?))
    };

    let mut detection = Vec::new();
    for g in &gens {
        let (p, t): (Vec<_>, Vec<_>) = records
            .iter()
            .zip(&parsed)
            .filter(|(r, _)| r.label == *g || r.label == GeneratorId::Real)
            .map(|(r, p)| (*p, r.label))
            .unzip();
        detection.push(DetectionRow {
            subset: *g,
            detection: detection_metrics(&p, &t)?,
        });
    }

    let mut jsonl = Vec::new();
    for line in &lines {
        jsonl.write_all(line.as_bytes()).and_then(|_| jsonl.write_all(b"\n")).expect("in-memory write");
    }
    write_file(&dir.join(PREDICTIONS_FILE), &jsonl)?;
    let report = EvalReport {
        method,
        subsets: config.eval.subsets,
        provenance: provenance(&config, &manifest, checkpoints),
        config,
        detection,
        metrics,
    };
    write_json(&dir.join(METRICS_FILE), &report)?;
    if let Some(m) = &report.metrics {
        write_file(&dir.join("subsets.csv"), m.subsets_csv().as_bytes())?;
        let matrices: [(&str, &Confusion); 3] = [("binary", &m.binary), ("family", &m.family), ("model", &m.model)];
        for (name, matrix) in matrices {
            write_file(&dir.join(format!("{name}.csv")), matrix.to_csv().as_bytes())?;
            matrix.write_heatmap(&dir.join(format!("{name}.pgm")), 16)?;
        }
    }
    Ok((report, dir))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let c = ExperimentConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        let partial = ExperimentConfig::from_toml("seed = 7\n[tune]\nepochs = 2\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.tune.epochs, 2);
        assert_eq!(partial.tune.batch_size, 16);
        assert!(matches!(ExperimentConfig::from_toml("sede = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn seeds_flow_from_the_root() {
        let a = ExperimentConfig::default().resolved().unwrap();
        let b = ExperimentConfig {
            seed: 9,
            ..ExperimentConfig::default()
        }
        .resolved()
        .unwrap();
        assert_eq!(a.corpus.seed, 2024);
        assert_eq!(b.corpus.seed, 9);
        assert_ne!(a.tune.seed, b.tune.seed);
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn mismatched_image_size_is_a_config_error() {
        let mut c = ExperimentConfig::default();
        c.corpus.height = 16;
        assert!(matches!(c.resolved(), Err(Error::Config(_))));
    }

    #[test]
    fn method_names() {
        let mut e = EvalConfig::default();
        assert_eq!(method_name(&e), "vqa-tuned");
        e.pseudo_source = PseudoSource::Init;
        assert_eq!(method_name(&e), "vqa-init");
        e.with_pseudo = false;
        assert_eq!(method_name(&e), "vqa-plain");
        e.baseline = true;
        assert_eq!(method_name(&e), "cnn-baseline");
    }
}
