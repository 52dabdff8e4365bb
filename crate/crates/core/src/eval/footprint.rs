use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::EvalRecord;
use crate::probe::Difficulty;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMetric {
    #[default]
    Total,
    Thinking,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Min, quartiles and max. Quartiles are medians of the lower and upper
/// halves, excluding the overall median when the count is odd; a single
/// value yields five equal numbers.
pub fn five_number_summary(values: &[f64]) -> Option<FiveNumber> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let (q1, q3) = if n == 1 {
        (v[0], v[0])
    } else {
        let half = n / 2;
        (median(&v[..half]), median(&v[n - half..]))
    };
    Some(FiveNumber {
        min: v[0],
        q1,
        median: median(&v),
        q3,
        max: v[n - 1],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintGroup {
    pub method_id: String,
    pub difficulty: Difficulty,
    pub correct: bool,
    pub n: usize,
    #[serde(flatten)]
    pub summary: FiveNumber,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FootprintReport {
    pub metric: TokenMetric,
    pub groups: Vec<FootprintGroup>,
    /// (method, difficulty, correct) combinations with no records.
    pub omitted: Vec<(String, Difficulty, bool)>,
}

impl FootprintReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "method",
            "difficulty",
            "correct",
            "n",
            "min",
            "q1",
            "median",
            "q3",
            "max",
        ])?;
        for g in &self.groups {
            let s = &g.summary;
            w.write_record([
                g.method_id.clone(),
                g.difficulty.as_str().to_string(),
                g.correct.to_string(),
                g.n.to_string(),
                s.min.to_string(),
                s.q1.to_string(),
                s.median.to_string(),
                s.q3.to_string(),
                s.max.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Token-count summaries keyed by (method, difficulty, correctness).
pub fn token_footprint(records: &[EvalRecord], metric: TokenMetric) -> FootprintReport {
    let mut groups: BTreeMap<(&str, Difficulty, bool), Vec<f64>> = BTreeMap::new();
    let mut methods = BTreeSet::new();
    let mut difficulties = BTreeSet::new();
    for r in records {
        methods.insert(r.method_id.as_str());
        difficulties.insert(r.difficulty);
        let v = match metric {
            TokenMetric::Total => r.total_tokens,
            TokenMetric::Thinking => r.thinking_tokens,
        };
        groups
            .entry((r.method_id.as_str(), r.difficulty, r.correct))
            .or_default()
            .push(v as f64);
    }
    let mut report = FootprintReport {
        metric,
        ..Default::default()
    };
    for m in &methods {
        for d in &difficulties {
            for correct in [true, false] {
                match groups.get(&(*m, *d, correct)) {
                    Some(values) => report.groups.push(FootprintGroup {
                        method_id: m.to_string(),
                        difficulty: *d,
                        correct,
                        n: values.len(),
                        summary: five_number_summary(values).expect("non-empty group"),
                    }),
                    None => report.omitted.push((m.to_string(), *d, correct)),
                }
            }
        }
    }
    report
}
