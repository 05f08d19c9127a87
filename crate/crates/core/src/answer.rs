//! Question and answer grammar: rendering ground truth into template text
//! and recovering structured labels from generated text.

use serde::{Deserialize, Serialize};

use crate::corpus::{Family, GeneratorId};

pub const QUESTION: &str = "Is this photo fake, and what is its source generator?";
pub const QUESTION_WITH_PSEUDO: &str = "Is this photo fake, and what is its source generator S*?";
pub const REAL_ANSWER: &str = "No, it is a real sample.";

pub fn build_question(with_pseudo: bool) -> &'static str {
    if with_pseudo {
        QUESTION_WITH_PSEUDO
    } else {
        QUESTION
    }
}

/// Ground-truth answer text for an image from `gen`.
pub fn render_label(gen: GeneratorId) -> String {
    match gen.family() {
        None => REAL_ANSWER.to_string(),
        Some(family) => render_fake(gen.answer_name(), family.word()),
    }
}

pub(crate) fn render_fake(name: &str, category: &str) -> String {
    format!("Yes, it is a fake sample generated by {name}, a {category} model.")
}

/// Structured reading of a generated answer. `is_fake == None` means the
/// text was unparseable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub is_fake: Option<bool>,
    pub model_name: Option<GeneratorId>,
    pub model_category: Option<Family>,
    /// Parsed name and parsed category disagree on the family.
    pub family_mismatch: bool,
}

impl ParsedAnswer {
    pub const UNPARSEABLE: ParsedAnswer = ParsedAnswer {
        is_fake: None,
        model_name: None,
        model_category: None,
        family_mismatch: false,
    };

    pub fn is_unparseable(&self) -> bool {
        self.is_fake.is_none()
    }

    /// Family implied by the answer: the stated category, else the family of
    /// the stated name.
    pub fn family(&self) -> Option<Family> {
        self.model_category.or_else(|| self.model_name.and_then(GeneratorId::family))
    }

    /// Exact detection-and-source agreement with the ground truth.
    pub fn attributes_to(&self, truth: GeneratorId) -> bool {
        match truth {
            GeneratorId::Real => self.is_fake == Some(false),
            g => self.is_fake == Some(true) && self.model_name == Some(g),
        }
    }
}

/// Ground-truth record in the prediction dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truth {
    pub label: GeneratorId,
    pub is_fake: bool,
    pub family: Option<Family>,
}

impl From<GeneratorId> for Truth {
    fn from(label: GeneratorId) -> Self {
        Self {
            label,
            is_fake: label.is_fake(),
            family: label.family(),
        }
    }
}

/// One line of the predictions JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub question: String,
    pub generated: String,
    pub parsed: ParsedAnswer,
    pub truth: Truth,
}

/// Lowercase words; commas, periods and the like act as separators.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| c.is_whitespace() || matches!(c, ',' | '.' | '?' | '!' | ';' | ':' | '"' | '\''))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn name_words(gen: GeneratorId) -> Vec<&'static str> {
    gen.answer_name().split(' ').collect()
}

/// Leftmost name occurrence; among names starting at the same word, the
/// longest wins. Names are whole-word sequences, so a hyphenated name is
/// never matched by its suffix.
fn find_name(ws: &[String]) -> Option<(GeneratorId, usize, usize)> {
    for start in 0..ws.len() {
        let mut best: Option<(GeneratorId, usize)> = None;
        for g in GeneratorId::FAKES {
            let nw = name_words(g);
            let end = start + nw.len();
            if end <= ws.len() && ws[start..end].iter().zip(&nw).all(|(a, b)| a == b) {
                let len = g.answer_name().len();
                if best.map_or(true, |(b, _)| len > b.answer_name().len()) {
                    best = Some((g, end));
                }
            }
        }
        if let Some((g, end)) = best {
            return Some((g, start, end));
        }
    }
    None
}

pub fn parse_answer(text: &str) -> ParsedAnswer {
    let ws = words(text);
    let verdict = match ws.first().map(String::as_str) {
        Some("yes") => Some(true),
        Some("no") => Some(false),
        _ => ws.iter().find_map(|w| match w.as_str() {
            "fake" => Some(true),
            "real" => Some(false),
            _ => None,
        }),
    };
    let name = find_name(&ws);
    let category = ws.iter().enumerate().find_map(|(i, w)| {
        if let Some((_, s, e)) = name {
            if (s..e).contains(&i) {
                return None;
            }
        }
        match w.as_str() {
            "gan" => Some(Family::Gan),
            "diffusion" => Some(Family::Diffusion),
            _ => None,
        }
    });
    let model_name = name.map(|(g, ..)| g);

    // A source without an explicit verdict still implies a fake.
    let is_fake = verdict.or(if model_name.is_some() || category.is_some() {
        Some(true)
    } else {
        None
    });
    match is_fake {
        None => ParsedAnswer::UNPARSEABLE,
        Some(false) => ParsedAnswer {
            is_fake: Some(false),
            model_name: None,
            model_category: None,
            family_mismatch: false,
        },
        Some(true) => ParsedAnswer {
            is_fake: Some(true),
            model_name,
            model_category: category,
            family_mismatch: matches!((model_name.and_then(GeneratorId::family), category), (Some(a), Some(b)) if a != b),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vlm::{Vocab, PSEUDO};

    #[test]
    fn questions() {
        assert_eq!(build_question(false), "Is this photo fake, and what is its source generator?");
        assert_eq!(build_question(true), "Is this photo fake, and what is its source generator S*?");
        let v = Vocab::new();
        let ids = v.tokenize(build_question(true)).unwrap();
        assert_eq!(ids.iter().filter(|&&t| t == PSEUDO).count(), 1);
        assert!(!v.tokenize(build_question(false)).unwrap().contains(&PSEUDO));
    }

    #[test]
    fn rendered_templates() {
        assert_eq!(render_label(GeneratorId::Real), "No, it is a real sample.");
        assert_eq!(
            render_label(GeneratorId::Ldm),
            "Yes, it is a fake sample generated by ldm, a diffusion model."
        );
        assert_eq!(
            render_label(GeneratorId::Progan),
            "Yes, it is a fake sample generated by progan, a gan model."
        );
        assert_eq!(
            render_label(GeneratorId::Sd14),
            "Yes, it is a fake sample generated by stable diffusion, a diffusion model."
        );
    }

    #[test]
    fn every_label_round_trips_and_tokenizes() {
        let v = Vocab::new();
        for g in GeneratorId::ALL {
            let text = render_label(g);
            let p = parse_answer(&text);
            assert_eq!(p.is_fake, Some(g.is_fake()), "{g}");
            assert_eq!(p.model_name, g.family().map(|_| g));
            assert_eq!(p.model_category, g.family());
            assert!(!p.family_mismatch);
            assert_eq!(v.detokenize(&v.tokenize(&text).unwrap()), text.to_lowercase());
        }
    }

    #[test]
    fn parses_free_text() {
        assert_eq!(
            parse_answer("No, it is a real sample."),
            ParsedAnswer {
                is_fake: Some(false),
                model_name: None,
                model_category: None,
                family_mismatch: false
            }
        );
        let p = parse_answer("yes, it is a fake sample generated by glide, a diffusion model.");
        assert_eq!(p.is_fake, Some(true));
        assert_eq!(p.model_name, Some(GeneratorId::Glide));
        assert_eq!(p.model_category, Some(Family::Diffusion));
        assert!(parse_answer("purple elephants").is_unparseable());
        assert!(parse_answer("").is_unparseable());
    }

    #[test]
    fn longest_and_whole_word_matching() {
        let p = parse_answer("yes generated by diff-projectedgan");
        assert_eq!(p.model_name, Some(GeneratorId::DiffProjectedgan));
        assert_eq!(parse_answer("yes iddpm").model_name, Some(GeneratorId::Iddpm));
        assert_eq!(parse_answer("yes diff-stylegan2").model_name, Some(GeneratorId::DiffStylegan2));
        // "diffusion" inside "stable diffusion" is part of the name, not the category
        let p = parse_answer("yes, stable diffusion");
        assert_eq!(p.model_name, Some(GeneratorId::Sd14));
        assert_eq!(p.model_category, None);
    }

    #[test]
    fn verdict_fallbacks_and_mismatch_flag() {
        assert_eq!(parse_answer("this looks fake").is_fake, Some(true));
        assert_eq!(parse_answer("clearly real").is_fake, Some(false));
        let p = parse_answer("yes, it is a fake sample generated by progan, a diffusion model.");
        assert!(p.family_mismatch);
        assert_eq!(p.model_name, Some(GeneratorId::Progan));
        assert_eq!(p.model_category, Some(Family::Diffusion));
        // family word standing in for a name
        let p = parse_answer("yes, it is a fake sample generated by gan, a gan model.");
        assert_eq!(p.model_name, None);
        assert_eq!(p.model_category, Some(Family::Gan));
        // "no" answers never carry a source
        let p = parse_answer("no, progan");
        assert_eq!((p.is_fake, p.model_name), (Some(false), None));
    }

    #[test]
    fn attribution_requires_exact_name() {
        let p = parse_answer(&render_label(GeneratorId::Stylegan));
        assert!(p.attributes_to(GeneratorId::Stylegan));
        assert!(!p.attributes_to(GeneratorId::Progan));
        assert!(!ParsedAnswer::UNPARSEABLE.attributes_to(GeneratorId::Real));
    }

    #[test]
    fn prediction_json_shape() {
        let p = Prediction {
            id: "ldm-test-00001".into(),
            question: QUESTION_WITH_PSEUDO.into(),
            generated: "no, it is a real sample.".into(),
            parsed: parse_answer("no, it is a real sample."),
            truth: GeneratorId::Ldm.into(),
        };
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(
            json,
            r#"{"id":"ldm-test-00001","question":"Is this photo fake, and what is its source generator S*?","generated":"no, it is a real sample.","parsed":{"is_fake":false,"model_name":null,"model_category":null,"family_mismatch":false},"truth":{"label":"ldm","is_fake":true,"family":"diffusion"}}"#
        );
        assert_eq!(serde_json::from_str::<Prediction>(&json).unwrap(), p);
    }
}
