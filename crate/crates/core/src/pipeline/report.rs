//! Merges evaluation runs into comparison tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{write_file, EvalReport, SubsetSelection};
use crate::corpus::GeneratorId;
use crate::error::{Error, Result};

/// One cell pair: two percentages for a method on a subset (or the
/// unweighted "average" column).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub table: String,
    pub selection: SubsetSelection,
    pub method: String,
    pub subset: String,
    pub first: f64,
    pub second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub corpus_seed: u64,
    pub rows: Vec<TableRow>,
}

const TABLES: [(&str, &str); 3] = [
    ("detection", "ACC / F1"),
    ("attribution", "ACC / F1"),
    ("rouge", "ROUGE-2 / ROUGE-L"),
];

impl ComparisonTable {
    pub fn from_reports(reports: &[EvalReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::InvalidArgument("report needs at least one metrics file".into()))?;
        let seed = first.provenance.corpus_seed;
        if let Some(bad) = reports.iter().find(|r| r.provenance.corpus_seed != seed) {
            return Err(Error::InvalidArgument(format!(
                "runs disagree on the corpus seed ({seed} vs {})",
                bad.provenance.corpus_seed
            )));
        }
        let mut rows = Vec::new();
        let mut push = |table: &str, r: &EvalReport, subset: String, a: f64, b: f64| {
            rows.push(TableRow {
                table: table.into(),
                selection: r.subsets,
                method: r.method.clone(),
                subset,
                first: 100.0 * a,
                second: 100.0 * b,
            })
        };
        for r in reports {
            for d in &r.detection {
                push("detection", r, d.subset.slug().into(), d.detection.acc, d.detection.f1);
            }
            let (acc, f1) = r.detection_average();
            push("detection", r, "average".into(), acc, f1);
            if let Some(m) = &r.metrics {
                for s in &m.subsets {
                    let a = &s.attribution;
                    push("attribution", r, s.subset.slug().into(), a.acc, a.f1);
                    push("rouge", r, s.subset.slug().into(), a.rouge2, a.rouge_l);
                }
                if let Some(avg) = m.averages.get("all") {
                    push("attribution", r, "average".into(), avg.attribution_acc, avg.attribution_f1);
                    push("rouge", r, "average".into(), avg.rouge2, avg.rouge_l);
                }
            }
        }
        Ok(Self { corpus_seed: seed, rows })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("table,selection,method,subset,first,second\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.2},{:.2}",
                r.table,
                r.selection.as_str(),
                r.method,
                r.subset,
                r.first,
                r.second
            );
        }
        out
    }

    /// One grid per (table, subset selection): methods down, subsets across.
    pub fn to_text(&self) -> String {
        let mut out = format!("corpus seed {}\n", self.corpus_seed);
        for (table, unit) in TABLES {
            for sel in [SubsetSelection::Seen, SubsetSelection::Unseen, SubsetSelection::All] {
                let rows: Vec<&TableRow> = self.rows.iter().filter(|r| r.table == table && r.selection == sel).collect();
                if rows.is_empty() {
                    continue;
                }
                let mut cols: Vec<String> = GeneratorId::FAKES
                    .iter()
                    .map(|g| g.slug().to_string())
                    .filter(|s| rows.iter().any(|r| &r.subset == s))
                    .collect();
                cols.push("average".into());
                let mut methods: Vec<&str> = Vec::new();
                for r in &rows {
                    if !methods.contains(&r.method.as_str()) {
                        methods.push(&r.method);
                    }
                }
                let _ = writeln!(out, "\n{table} ({unit}, %), {} subsets", sel.as_str());
                let width = cols.iter().map(|c| c.len()).max().unwrap_or(0).max(15) + 2;
                let _ = write!(out, "{:<14}", "method");
                for c in &cols {
                    let _ = write!(out, "{c:>width$}");
                }
                out.push('\n');
                for m in methods {
                    let _ = write!(out, "{m:<14}");
                    for c in &cols {
                        match rows.iter().find(|r| r.method == m && &r.subset == c) {
                            Some(r) => {
                                let _ = write!(out, "{:>width$}", format!("{:.2} / {:.2}", r.first, r.second));
                            }
                            None => {
                                let _ = write!(out, "{:>width$}", "-");
                            }
                        }
                    }
                    out.push('\n');
                }
            }
        }
        out
    }
}

/// Reads each `metrics.json`, refuses runs over different corpus seeds,
/// and writes `report.csv` and `report.txt` into `out`.
pub fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<ComparisonTable> {
    let mut reports = Vec::with_capacity(inputs.len());
    for path in inputs {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.clone()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: EvalReport = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        reports.push(report);
    }
    let table = ComparisonTable::from_reports(&reports)?;
    write_file(&out.join("report.csv"), table.to_csv().as_bytes())?;
    write_file(&out.join("report.txt"), table.to_text().as_bytes())?;
    Ok(table)
}
