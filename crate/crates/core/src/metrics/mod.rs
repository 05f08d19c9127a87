//! Detection and attribution scores, ROUGE, and confusion matrices over a
//! prediction dump.

mod confusion;
mod rouge;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use confusion::{binary_matrix, family_matrix, model_matrix, Confusion, NONE_LABEL, UNPARSEABLE_LABEL};
pub use rouge::{lcs_len, rouge2, rouge2_tokens, rouge_l, rouge_l_tokens};

use crate::answer::{render_label, ParsedAnswer, Prediction};
use crate::corpus::GeneratorId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub acc: f64,
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub unparseable: u64,
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Fake is the positive class. An unparseable answer is wrong whatever the
/// truth: a missed fake or a false alarm on a real image.
pub fn detection_metrics(parsed: &[ParsedAnswer], truth: &[GeneratorId]) -> Result<DetectionMetrics> {
    if parsed.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground-truth labels",
            parsed.len(),
            truth.len()
        )));
    }
    if parsed.is_empty() {
        return Err(Error::Empty("detection_metrics"));
    }
    let (mut tp, mut fp, mut tn, mut fn_, mut unparseable) = (0, 0, 0, 0, 0);
    for (p, t) in parsed.iter().zip(truth) {
        let fake = t.is_fake();
        match p.is_fake {
            None => {
                unparseable += 1;
                if fake {
                    fn_ += 1;
                } else {
                    fp += 1;
                }
            }
            Some(true) if fake => tp += 1,
            Some(true) => fp += 1,
            Some(false) if fake => fn_ += 1,
            Some(false) => tn += 1,
        }
    }
    Ok(DetectionMetrics {
        acc: (tp + tn) as f64 / parsed.len() as f64,
        f1: f1(tp, fp, fn_),
        tp,
        fp,
        tn,
        fn_,
        unparseable,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributionMetrics {
    pub acc: f64,
    pub f1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

/// Scores a subset population (the subset's fakes plus the real pool).
/// Correct means the exact verdict and, for fakes, the exact generator.
/// F1 treats "attributed to `subset`" as the positive class.
pub fn attribution_metrics(preds: &[&Prediction], subset: GeneratorId) -> Result<AttributionMetrics> {
    if !subset.is_fake() {
        return Err(Error::InvalidArgument("attribution subsets are fake generators".into()));
    }
    if preds.is_empty() {
        return Err(Error::Empty("attribution_metrics"));
    }
    let (mut correct, mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    let (mut r2, mut rl) = (0.0, 0.0);
    for p in preds {
        let label = p.truth.label;
        if label != subset && label != GeneratorId::Real {
            return Err(Error::InvalidArgument(format!("{label} sample in the {subset} subset")));
        }
        if p.parsed.attributes_to(label) {
            correct += 1;
        }
        let predicted = p.parsed.attributes_to(subset);
        match (label == subset, predicted) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
        let reference = render_label(label);
        r2 += rouge2(&p.generated, &reference);
        rl += rouge_l(&p.generated, &reference);
    }
    let n = preds.len() as f64;
    Ok(AttributionMetrics {
        acc: correct as f64 / n,
        f1: f1(tp, fp, fn_),
        rouge2: r2 / n,
        rouge_l: rl / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub subset: GeneratorId,
    pub population: u64,
    pub detection: DetectionMetrics,
    pub attribution: AttributionMetrics,
    pub binary: Confusion,
}

/// Unweighted means over subsets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub subsets: usize,
    pub detection_acc: f64,
    pub detection_f1: f64,
    pub attribution_acc: f64,
    pub attribution_f1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

impl Averages {
    fn of<'a>(rows: impl IntoIterator<Item = &'a SubsetReport>) -> Option<Self> {
        let rows: Vec<_> = rows.into_iter().collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&SubsetReport) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        Some(Self {
            subsets: rows.len(),
            detection_acc: mean(&|r| r.detection.acc),
            detection_f1: mean(&|r| r.detection.f1),
            attribution_acc: mean(&|r| r.attribution.acc),
            attribution_f1: mean(&|r| r.attribution.f1),
            rouge2: mean(&|r| r.attribution.rouge2),
            rouge_l: mean(&|r| r.attribution.rouge_l),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Distinct predictions evaluated.
    pub population: u64,
    pub unparseable: u64,
    pub subsets: Vec<SubsetReport>,
    /// Keyed by "seen", "unseen" and "all", when present.
    pub averages: BTreeMap<String, Averages>,
    /// Every prediction, real and fake.
    pub binary: Confusion,
    /// Fakes detected as fake.
    pub family: Confusion,
    pub model: Confusion,
}

/// Builds the report for a prediction dump. Each fake generator present
/// forms a subset together with every real prediction.
pub fn build_report(preds: &[Prediction]) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::Empty("build_report"));
    }
    let reals: Vec<&Prediction> = preds.iter().filter(|p| !p.truth.label.is_fake()).collect();
    let mut subsets = Vec::new();
    for g in GeneratorId::FAKES {
        let mut members: Vec<&Prediction> = preds.iter().filter(|p| p.truth.label == g).collect();
        if members.is_empty() {
            continue;
        }
        members.extend(reals.iter().copied());
        let parsed: Vec<ParsedAnswer> = members.iter().map(|p| p.parsed).collect();
        let truth: Vec<GeneratorId> = members.iter().map(|p| p.truth.label).collect();
        subsets.push(SubsetReport {
            subset: g,
            population: members.len() as u64,
            detection: detection_metrics(&parsed, &truth)?,
            attribution: attribution_metrics(&members, g)?,
            binary: binary_matrix(members.iter().map(|p| (&p.parsed, &p.truth))),
        });
    }
    let mut averages = BTreeMap::new();
    let groups: [(&str, fn(GeneratorId) -> bool); 3] =
        [("seen", GeneratorId::is_seen), ("unseen", |g| !g.is_seen()), ("all", |_| true)];
    for (key, keep) in groups {
        if let Some(a) = Averages::of(subsets.iter().filter(|s| keep(s.subset))) {
            averages.insert(key.to_string(), a);
        }
    }
    let pairs = || preds.iter().map(|p| (&p.parsed, &p.truth));
    Ok(MetricsReport {
        population: preds.len() as u64,
        unparseable: preds.iter().filter(|p| p.parsed.is_unparseable()).count() as u64,
        subsets,
        averages,
        binary: binary_matrix(pairs()),
        family: family_matrix(pairs()),
        model: model_matrix(pairs()),
    })
}

impl MetricsReport {
    /// Fakes answered as fake, over all predictions.
    pub fn fake_true_positives(&self) -> u64 {
        self.binary.get("fake", "fake")
    }

    /// One CSV row per subset.
    pub fn subsets_csv(&self) -> String {
        let mut out = String::from("subset,population,det_acc,det_f1,attr_acc,attr_f1,rouge2,rouge_l\n");
        for s in &self.subsets {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                s.subset.slug(),
                s.population,
                s.detection.acc,
                s.detection.f1,
                s.attribution.acc,
                s.attribution.f1,
                s.attribution.rouge2,
                s.attribution.rouge_l
            ));
        }
        out
    }
}
