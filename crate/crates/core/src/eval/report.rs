use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{EvalError, EvalRecord};

pub const OVERALL: &str = "Overall";

/// How per-question Pass@1 is computed from several passes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass1Mode {
    /// Mean accuracy over all passes of a question.
    #[default]
    MeanOverPasses,
    /// Only the lowest-index pass of each question.
    FirstPass,
}

/// Minus sign used when rendering negative deltas.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinusStyle {
    /// ASCII hyphen-minus, as in `57.2(-42.8)`.
    #[default]
    Ascii,
    /// U+2212, as in `57.2(−42.8)`.
    Unicode,
}

fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

/// `value(+delta)` with one decimal. The shown delta is the difference of
/// the rounded values, so a cell always agrees with its baseline cell.
pub fn render_cell(value: f64, baseline: f64, minus: MinusStyle) -> String {
    let shown = round1(value);
    let delta = round1(shown - round1(baseline));
    let sign = if delta < 0.0 {
        match minus {
            MinusStyle::Ascii => "-",
            MinusStyle::Unicode => "\u{2212}",
        }
    } else {
        "+"
    };
    format!("{shown:.1}({sign}{:.1})", delta.abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonCell {
    pub pass1: f64,
    pub pct_tokens: f64,
    /// Exact differences from the baseline cell.
    pub delta_pass1: f64,
    pub delta_tokens: f64,
}

impl ComparisonCell {
    pub fn pass1_text(&self, minus: MinusStyle) -> String {
        render_cell(self.pass1, self.pass1 - self.delta_pass1, minus)
    }

    pub fn tokens_text(&self, minus: MinusStyle) -> String {
        render_cell(self.pct_tokens, self.pct_tokens - self.delta_tokens, minus)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub category: String,
    pub questions: usize,
    pub original_pass1: f64,
    pub original_tokens: u64,
    pub ours_tokens: u64,
    pub ours: ComparisonCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub method: String,
    pub baseline: String,
    pub mode: Pass1Mode,
    /// Listed categories in order, then the overall row.
    pub rows: Vec<ReportRow>,
}

fn pass1(records: &[&EvalRecord], mode: Pass1Mode) -> f64 {
    let mut per_q: BTreeMap<&str, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        per_q.entry(r.question_id.as_str()).or_default().push(r);
    }
    if per_q.is_empty() {
        return 0.0;
    }
    let total: f64 = per_q
        .values()
        .map(|rs| match mode {
            Pass1Mode::MeanOverPasses => {
                rs.iter().filter(|r| r.correct).count() as f64 / rs.len() as f64
            }
            Pass1Mode::FirstPass => {
                let first = rs.iter().min_by_key(|r| r.pass_index).expect("non-empty");
                first.correct as u8 as f64
            }
        })
        .sum();
    100.0 * total / per_q.len() as f64
}

fn label(records: &[EvalRecord]) -> String {
    let ids: BTreeSet<&str> = records.iter().map(|r| r.method_id.as_str()).collect();
    ids.into_iter().collect::<Vec<_>>().join("+")
}

/// Pass@1 and token share of `ours` against `original`, per category and
/// overall. Both sets must cover the same question ids. An empty
/// `categories` list means every category present, sorted.
pub fn comparison_report(
    ours: &[EvalRecord],
    original: &[EvalRecord],
    categories: &[String],
    mode: Pass1Mode,
) -> Result<ComparisonReport, EvalError> {
    if ours.is_empty() || original.is_empty() {
        return Err(EvalError::Empty);
    }
    for r in ours.iter().chain(original) {
        r.validate()?;
    }
    let q_ours: BTreeSet<&str> = ours.iter().map(|r| r.question_id.as_str()).collect();
    let q_orig: BTreeSet<&str> = original.iter().map(|r| r.question_id.as_str()).collect();
    if q_ours != q_orig {
        return Err(EvalError::Coverage {
            only_ours: q_ours.difference(&q_orig).map(|s| s.to_string()).collect(),
            only_original: q_orig.difference(&q_ours).map(|s| s.to_string()).collect(),
        });
    }

    let cats: Vec<String> = if categories.is_empty() {
        let all: BTreeSet<&str> = original.iter().map(|r| r.category.as_str()).collect();
        all.into_iter().map(String::from).collect()
    } else {
        categories.to_vec()
    };

    let row = |name: &str, filter: &dyn Fn(&EvalRecord) -> bool| -> Result<ReportRow, EvalError> {
        let o: Vec<&EvalRecord> = ours.iter().filter(|r| filter(r)).collect();
        let b: Vec<&EvalRecord> = original.iter().filter(|r| filter(r)).collect();
        if b.is_empty() {
            return Err(EvalError::Invalid(format!(
                "no original records in category {name:?}"
            )));
        }
        let ours_tokens: u64 = o.iter().map(|r| r.total_tokens).sum();
        let original_tokens: u64 = b.iter().map(|r| r.total_tokens).sum();
        if original_tokens == 0 {
            return Err(EvalError::Domain(format!(
                "original uses zero tokens in {name:?}"
            )));
        }
        let (p_ours, p_orig) = (pass1(&o, mode), pass1(&b, mode));
        let pct_tokens = 100.0 * ours_tokens as f64 / original_tokens as f64;
        let questions = b
            .iter()
            .map(|r| r.question_id.as_str())
            .collect::<BTreeSet<_>>()
            .len();
        Ok(ReportRow {
            category: name.to_string(),
            questions,
            original_pass1: p_orig,
            original_tokens,
            ours_tokens,
            ours: ComparisonCell {
                pass1: p_ours,
                pct_tokens,
                delta_pass1: p_ours - p_orig,
                delta_tokens: pct_tokens - 100.0,
            },
        })
    };

    let mut rows = Vec::with_capacity(cats.len() + 1);
    for c in &cats {
        rows.push(row(c, &|r: &EvalRecord| r.category == *c)?);
    }
    rows.push(row(OVERALL, &|_| true)?);
    Ok(ComparisonReport {
        method: label(ours),
        baseline: label(original),
        mode,
        rows,
    })
}

impl ComparisonReport {
    pub fn row(&self, category: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.category == category)
    }

    /// Aligned plain-text table.
    pub fn to_text(&self, minus: MinusStyle) -> String {
        let header = ["Category", "Original Pass@1", "Pass@1", "%Tokens"];
        let body: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.category.clone(),
                    format!("{:.1}", round1(r.original_pass1)),
                    r.ours.pass1_text(minus),
                    r.ours.tokens_text(minus),
                ]
            })
            .collect();
        let mut widths = header.map(|h| h.chars().count());
        for cells in &body {
            for (w, c) in widths.iter_mut().zip(cells) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let _ = writeln!(out, "{} vs {}", self.method, self.baseline);
        let line = |out: &mut String, cells: &[String]| {
            let padded: Vec<String> = cells
                .iter()
                .zip(widths)
                .enumerate()
                .map(|(i, (c, w))| {
                    let pad = w - c.chars().count();
                    if i == 0 {
                        format!("{c}{}", " ".repeat(pad))
                    } else {
                        format!("{}{c}", " ".repeat(pad))
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", padded.join("  ").trim_end());
        };
        line(&mut out, &header.map(String::from));
        for cells in &body {
            line(&mut out, cells);
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W, minus: MinusStyle) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "category",
            "questions",
            "original_pass1",
            "pass1",
            "delta_pass1",
            "pct_tokens",
            "delta_tokens",
            "pass1_cell",
            "tokens_cell",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.category.clone(),
                r.questions.to_string(),
                r.original_pass1.to_string(),
                r.ours.pass1.to_string(),
                r.ours.delta_pass1.to_string(),
                r.ours.pct_tokens.to_string(),
                r.ours.delta_tokens.to_string(),
                r.ours.pass1_text(minus),
                r.ours.tokens_text(minus),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
