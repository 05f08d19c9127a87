//! Count matrices with fixed, labelled rows and columns.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::answer::{ParsedAnswer, Truth};
use crate::corpus::{write_pgm, Family, GeneratorId};
use crate::error::Result;

pub const NONE_LABEL: &str = "none";
pub const UNPARSEABLE_LABEL: &str = "unparseable";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    /// Ground-truth classes.
    pub rows: Vec<String>,
    /// Predicted classes.
    pub cols: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(rows: Vec<String>, cols: Vec<String>) -> Self {
        let counts = vec![vec![0; cols.len()]; rows.len()];
        Self { rows, cols, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn get(&self, row: &str, col: &str) -> u64 {
        let r = self.rows.iter().position(|x| x == row);
        let c = self.cols.iter().position(|x| x == col);
        match (r, c) {
            (Some(r), Some(c)) => self.counts[r][c],
            _ => 0,
        }
    }

    /// Sum of cells whose row and column carry the same label.
    pub fn diagonal(&self) -> u64 {
        self.rows
            .iter()
            .enumerate()
            .filter_map(|(r, name)| self.cols.iter().position(|c| c == name).map(|c| self.counts[r][c]))
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("truth");
        for c in &self.cols {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for (name, row) in self.rows.iter().zip(&self.counts) {
            out.push_str(name);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Row-normalized heatmap, one `cell×cell` block per entry; brighter is
    /// a larger share of the row.
    pub fn write_heatmap(&self, path: &Path, cell: usize) -> Result<()> {
        let (h, w) = (self.rows.len() * cell, self.cols.len() * cell);
        let mut pixels = vec![0.0; h * w];
        for (r, row) in self.counts.iter().enumerate() {
            let sum: u64 = row.iter().sum();
            for (c, &v) in row.iter().enumerate() {
                let shade = if sum == 0 { 0.0 } else { v as f64 / sum as f64 };
                for y in r * cell..(r + 1) * cell {
                    pixels[y * w + c * cell..y * w + (c + 1) * cell].fill(shade);
                }
            }
        }
        write_pgm(path, w, h, &pixels)
    }
}

fn strings<I: IntoIterator<Item = S>, S: ToString>(it: I) -> Vec<String> {
    it.into_iter().map(|s| s.to_string()).collect()
}

/// Truth {real, fake} against prediction {real, fake, unparseable}.
pub fn binary_matrix<'a>(items: impl IntoIterator<Item = (&'a ParsedAnswer, &'a Truth)>) -> Confusion {
    let mut m = Confusion::new(strings(["real", "fake"]), strings(["real", "fake", UNPARSEABLE_LABEL]));
    for (p, t) in items {
        let col = match p.is_fake {
            Some(false) => 0,
            Some(true) => 1,
            None => 2,
        };
        m.counts[t.is_fake as usize][col] += 1;
    }
    m
}

/// Family of fakes detected as fake; predicted family "none" when the
/// answer names neither.
pub fn family_matrix<'a>(items: impl IntoIterator<Item = (&'a ParsedAnswer, &'a Truth)>) -> Confusion {
    let mut cols = strings(Family::ALL.iter().map(|f| f.word()));
    cols.push(NONE_LABEL.into());
    let mut m = Confusion::new(strings(Family::ALL.iter().map(|f| f.word())), cols);
    for (p, t) in items {
        let Some(fam) = t.family else { continue };
        if p.is_fake != Some(true) {
            continue;
        }
        let col = p.family().map_or(Family::ALL.len(), Family::index);
        m.counts[fam.index()][col] += 1;
    }
    m
}

/// Generator of fakes detected as fake, rows and columns in the fixed
/// order of [`GeneratorId::FAKES`], plus a "none" column.
pub fn model_matrix<'a>(items: impl IntoIterator<Item = (&'a ParsedAnswer, &'a Truth)>) -> Confusion {
    let names = strings(GeneratorId::FAKES.iter().map(|g| g.slug()));
    let mut cols = names.clone();
    cols.push(NONE_LABEL.into());
    let mut m = Confusion::new(names, cols);
    for (p, t) in items {
        let Some(row) = t.label.fake_index() else { continue };
        if p.is_fake != Some(true) {
            continue;
        }
        let col = p.model_name.and_then(GeneratorId::fake_index).unwrap_or(GeneratorId::FAKES.len());
        m.counts[row][col] += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answer::{parse_answer, render_label};

    fn run(pairs: &[(&str, GeneratorId)]) -> Vec<(ParsedAnswer, Truth)> {
        pairs.iter().map(|(t, g)| (parse_answer(t), Truth::from(*g))).collect()
    }

    #[test]
    fn perfect_predictor_is_diagonal() {
        let texts: Vec<String> = GeneratorId::ALL.iter().map(|g| render_label(*g)).collect();
        let pairs: Vec<(&str, GeneratorId)> = texts.iter().map(String::as_str).zip(GeneratorId::ALL).collect();
        let items = run(&pairs);
        let it = || items.iter().map(|(p, t)| (p, t));
        let b = binary_matrix(it());
        assert_eq!(b.total(), 13);
        assert_eq!(b.diagonal(), 13);
        let f = family_matrix(it());
        assert_eq!((f.total(), f.diagonal()), (12, 12));
        let m = model_matrix(it());
        assert_eq!((m.total(), m.diagonal()), (12, 12));
        assert_eq!(m.cols.len(), 13);
    }

    #[test]
    fn ldm_attributed_to_progan() {
        let wrong = "Yes, it is a fake sample generated by progan, a gan model.";
        let items = run(&[(wrong, GeneratorId::Ldm), (wrong, GeneratorId::Ldm), (wrong, GeneratorId::Ldm)]);
        let m = model_matrix(items.iter().map(|(p, t)| (p, t)));
        assert_eq!(m.get("ldm", "progan"), 3);
        let f = family_matrix(items.iter().map(|(p, t)| (p, t)));
        assert_eq!(f.get("diffusion", "gan"), 3);
    }

    #[test]
    fn only_detected_fakes_enter_source_matrices() {
        let items = run(&[
            ("No, it is a real sample.", GeneratorId::Glide),
            ("purple elephants", GeneratorId::Glide),
            ("yes", GeneratorId::Glide),
            ("yes", GeneratorId::Real),
        ]);
        let it = || items.iter().map(|(p, t)| (p, t));
        let b = binary_matrix(it());
        assert_eq!(b.get("fake", "real"), 1);
        assert_eq!(b.get("fake", UNPARSEABLE_LABEL), 1);
        assert_eq!(b.get("fake", "fake"), 1);
        assert_eq!(b.get("real", "fake"), 1);
        assert_eq!(family_matrix(it()).get("diffusion", NONE_LABEL), 1);
        assert_eq!(model_matrix(it()).get("glide", NONE_LABEL), 1);
        assert_eq!(model_matrix(it()).total(), 1);
    }

    #[test]
    fn csv_and_heatmap() {
        let items = run(&[("No, it is a real sample.", GeneratorId::Real)]);
        let b = binary_matrix(items.iter().map(|(p, t)| (p, t)));
        assert_eq!(b.to_csv(), "truth,real,fake,unparseable\nreal,1,0,0\nfake,0,0,0\n");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.pgm");
        b.write_heatmap(&path, 4).unwrap();
        let (w, h, px) = crate::corpus::read_pgm(&path).unwrap();
        assert_eq!((w, h), (12, 8));
        assert_eq!(px[0], 1.0);
    }
}
