//! `eval`: per-pass evaluation records from decoded traces.

use std::collections::BTreeMap;

use lookback_core::EvalRecord;

use super::Ctx;
use crate::data::{EvalLine, TraceLine};
use crate::error::{CliError, CliResult};
use crate::store::{read_jsonl, write_atomic};

/// Evaluation record of one trace. Total tokens are the billed budget when a
/// decode log exists (branch overhead included), else the sampled tokens.
pub fn eval_line(
    line: &TraceLine,
    default_method: &str,
    default_hash: &str,
) -> CliResult<EvalLine> {
    let t = &line.trace;
    let correct = t.correct.ok_or_else(|| {
        CliError::Config(format!(
            "trace {} has no correctness label; give its question an `answer`",
            t.key()
        ))
    })?;
    let total = line.decode.as_ref().map_or(t.generated_tokens(), |d| {
        d.budget_used.max(t.generated_tokens())
    });
    let record = EvalRecord {
        question_id: t.question_id.clone(),
        category: t.category.clone(),
        difficulty: t.difficulty,
        pass_index: t.pass_index,
        correct,
        total_tokens: total as u64,
        thinking_tokens: t.thinking_tokens() as u64,
        method_id: if line.method_id.is_empty() {
            default_method.to_string()
        } else {
            line.method_id.clone()
        },
    };
    record
        .validate()
        .map_err(|e| CliError::Other(anyhow::anyhow!("{e}")))?;
    Ok(EvalLine {
        config_hash: if line.config_hash.is_empty() {
            default_hash.to_string()
        } else {
            line.config_hash.clone()
        },
        record,
    })
}

pub fn run(ctx: &Ctx) -> CliResult<String> {
    let cfg = &ctx.cfg;
    let traces: Vec<TraceLine> = read_jsonl(&cfg.paths.traces)?;
    let mut lines = traces
        .iter()
        .map(|t| eval_line(t, &cfg.eval.method_id, &ctx.hash))
        .collect::<CliResult<Vec<_>>>()?;
    lines.sort_by(|a, b| {
        let key = |l: &EvalLine| {
            (
                l.record.method_id.clone(),
                l.record.question_id.clone(),
                l.record.pass_index,
            )
        };
        key(a).cmp(&key(b))
    });

    let mut per_method: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for l in &lines {
        let e = per_method.entry(l.record.method_id.as_str()).or_default();
        e.0 += 1;
        e.1 += l.record.correct as usize;
    }
    let summary: Vec<String> = per_method
        .iter()
        .map(|(m, (n, c))| format!("{m}: {c}/{n} correct"))
        .collect();
    if ctx.dry_run {
        return Ok(format!(
            "eval (dry run): {} records; {}",
            lines.len(),
            summary.join(", ")
        ));
    }

    let mut body = String::new();
    for l in &lines {
        body.push_str(&serde_json::to_string(l)?);
        body.push('\n');
    }
    write_atomic(&cfg.paths.eval, body.as_bytes())?;
    Ok(format!(
        "eval: {} records ({}) -> {}",
        lines.len(),
        summary.join(", "),
        cfg.paths.eval.display()
    ))
}
