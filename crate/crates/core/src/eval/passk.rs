use std::collections::BTreeMap;

use super::{EvalError, EvalRecord};

fn binom(n: u64, k: u64) -> Option<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) / (i + 1) stays integral at every step.
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// Unbiased pass@k estimate `1 - C(n-c, k) / C(n, k)` from `c` correct
/// passes out of `n`.
///
/// Exact integer binomials are used while they fit in 128 bits, otherwise
/// the product form `1 - prod_{i=n-c+1}^{n} (1 - k/i)`.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, EvalError> {
    if k == 0 || k > n {
        return Err(EvalError::Domain(format!(
            "k must satisfy 1 <= k <= n, got k={k}, n={n}"
        )));
    }
    if c > n {
        return Err(EvalError::Domain(format!("c={c} exceeds n={n}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    if c == 0 {
        return Ok(0.0);
    }
    if let (Some(total), Some(miss)) = (binom(n, k), binom(n - c, k)) {
        return Ok((total - miss) as f64 / total as f64);
    }
    let miss: f64 = (n - c + 1..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

/// Mean pass@k over questions; every question needs at least `k` passes.
pub fn mean_pass_at_k(records: &[EvalRecord], k: u64) -> Result<f64, EvalError> {
    let mut per_q: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for r in records {
        let e = per_q.entry(r.question_id.as_str()).or_default();
        e.0 += 1;
        e.1 += r.correct as u64;
    }
    if per_q.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sum = 0.0;
    for (n, c) in per_q.values() {
        sum += pass_at_k(*n, *c, k)?;
    }
    Ok(sum / per_q.len() as f64)
}
