use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{EvalError, EvalRecord};

/// Category × method matrix of mean accuracies (percent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub categories: Vec<String>,
    pub methods: Vec<String>,
    /// `values[category][method]`.
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScores {
    pub categories: Vec<String>,
    pub methods: Vec<String>,
    pub z: Vec<Vec<f64>>,
    /// Rows with zero spread, reported as all zeros.
    pub degenerate: Vec<bool>,
}

/// Mean accuracy ×100 per (category, method). Missing cells are an error,
/// since z-scores need every method in every row.
pub fn mean_accuracy_matrix(records: &[EvalRecord]) -> Result<AccuracyMatrix, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut acc: BTreeMap<(&str, &str), (u64, u64)> = BTreeMap::new();
    let mut categories = BTreeSet::new();
    let mut methods = BTreeSet::new();
    for r in records {
        categories.insert(r.category.as_str());
        methods.insert(r.method_id.as_str());
        let e = acc
            .entry((r.category.as_str(), r.method_id.as_str()))
            .or_default();
        e.0 += 1;
        e.1 += r.correct as u64;
    }
    let mut values = Vec::new();
    for c in &categories {
        let mut row = Vec::new();
        for m in &methods {
            let (n, k) = acc.get(&(*c, *m)).ok_or_else(|| {
                EvalError::Invalid(format!("method {m:?} has no records in category {c:?}"))
            })?;
            row.push(100.0 * *k as f64 / *n as f64);
        }
        values.push(row);
    }
    Ok(AccuracyMatrix {
        categories: categories.into_iter().map(String::from).collect(),
        methods: methods.into_iter().map(String::from).collect(),
        values,
    })
}

/// Standardizes each category row across methods with the population
/// standard deviation.
pub fn category_zscores(m: &AccuracyMatrix) -> Result<ZScores, EvalError> {
    if m.methods.len() < 2 {
        return Err(EvalError::Domain(format!(
            "z-scores need at least 2 methods per category, got {}",
            m.methods.len()
        )));
    }
    if m.values.len() != m.categories.len() || m.values.iter().any(|r| r.len() != m.methods.len()) {
        return Err(EvalError::Invalid(
            "matrix shape does not match its labels".into(),
        ));
    }
    let mut z = Vec::with_capacity(m.values.len());
    let mut degenerate = Vec::with_capacity(m.values.len());
    for row in &m.values {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if sd == 0.0 || row.iter().all(|v| *v == row[0]) {
            z.push(vec![0.0; row.len()]);
            degenerate.push(true);
        } else {
            z.push(row.iter().map(|v| (v - mean) / sd).collect());
            degenerate.push(false);
        }
    }
    Ok(ZScores {
        categories: m.categories.clone(),
        methods: m.methods.clone(),
        z,
        degenerate,
    })
}
