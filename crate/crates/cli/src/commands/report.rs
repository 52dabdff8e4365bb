//! `report`: comparison table, pass@k, category z-scores and token
//! footprints from one or more evaluation files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::warn;
use lookback_core::eval::{
    category_zscores, comparison_report, mean_accuracy_matrix, mean_pass_at_k, token_footprint,
    EvalError, TokenMetric,
};
use lookback_core::EvalRecord;
use serde_json::json;

use super::Ctx;
use crate::config::sha256_hex;
use crate::data::{write_meta, EvalLine};
use crate::error::{CliError, CliResult};
use crate::store::{read_jsonl, write_atomic};

pub struct ReportOpts {
    /// Evaluation files; the configured `paths.eval` when empty.
    pub inputs: Vec<PathBuf>,
    /// Combine records of one method produced under different configs.
    pub force: bool,
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<(), csv::Error>) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

pub fn run(ctx: &Ctx, opts: &ReportOpts) -> CliResult<String> {
    let cfg = &ctx.cfg;
    let inputs = if opts.inputs.is_empty() {
        vec![cfg.paths.eval.clone()]
    } else {
        opts.inputs.clone()
    };

    let mut records: Vec<EvalRecord> = Vec::new();
    let mut hashes: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut input_meta = Vec::new();
    for path in &inputs {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let lines: Vec<EvalLine> = read_jsonl(path)?;
        input_meta.push(json!({
            "path": path.display().to_string(),
            "sha256": sha256_hex(&bytes),
            "records": lines.len(),
        }));
        for l in lines {
            hashes
                .entry(l.record.method_id.clone())
                .or_default()
                .insert(l.config_hash);
            records.push(l.record);
        }
    }
    if records.is_empty() {
        return Err(CliError::Coverage(
            "no evaluation records in the inputs".into(),
        ));
    }
    for (method, hs) in &hashes {
        if hs.len() > 1 {
            let msg = format!(
                "method {method:?} mixes records from {} configurations ({}); pass --force to combine them",
                hs.len(),
                hs.iter().map(|h| &h[..12.min(h.len())]).collect::<Vec<_>>().join(", ")
            );
            if !opts.force {
                return Err(CliError::Coverage(msg));
            }
            warn!("{msg}");
        }
    }

    let by_method = |m: &str| -> Vec<EvalRecord> {
        records
            .iter()
            .filter(|r| r.method_id == m)
            .cloned()
            .collect()
    };
    let methods: Vec<String> = hashes.keys().cloned().collect();

    if ctx.dry_run {
        return Ok(format!(
            "report (dry run): {} records, methods {methods:?}, no backend calls",
            records.len()
        ));
    }

    let dir = &cfg.paths.reports;
    std::fs::create_dir_all(dir)?;
    let minus = cfg.eval.minus;
    let mut written: Vec<String> = Vec::new();
    let mut summary = String::new();
    let mut put =
        |name: &str, bytes: &[u8], meta: Option<serde_json::Value>| -> CliResult<PathBuf> {
            let path = dir.join(name);
            write_atomic(&path, bytes)?;
            if let Some(extra) = meta {
                write_meta(&path, &ctx.hash, extra)?;
            }
            written.push(name.to_string());
            Ok(path)
        };

    // Method comparison.
    let (ours_id, base_id) = (&cfg.eval.method_id, &cfg.eval.baseline_method);
    let (ours, base) = (by_method(ours_id), by_method(base_id));
    if ours.is_empty() || base.is_empty() {
        warn!("comparison skipped: need records for both {ours_id:?} and {base_id:?}, found {methods:?}");
    } else {
        let report = comparison_report(&ours, &base, &cfg.eval.categories, cfg.eval.pass1_mode)
            .map_err(|e| match e {
                EvalError::Coverage { .. } => CliError::Coverage(e.to_string()),
                other => CliError::Coverage(other.to_string()),
            })?;
        let text = report.to_text(minus);
        put("comparison.txt", text.as_bytes(), None)?;
        let meta = json!({ "method": ours_id, "baseline": base_id, "pass1_mode": cfg.eval.pass1_mode, "minus": minus });
        put(
            "comparison.csv",
            &csv_bytes(|b| report.write_csv(b, minus))?,
            Some(meta),
        )?;
        let mut js = serde_json::to_string_pretty(&report)?;
        js.push('\n');
        put("comparison.json", js.as_bytes(), None)?;
        summary.push_str(&text);
    }

    // pass@k for every k each method supports.
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "k", "pass_at_k", "questions"])?;
    for m in &methods {
        let rs = by_method(m);
        let mut per_q: BTreeMap<&str, u64> = BTreeMap::new();
        for r in &rs {
            *per_q.entry(r.question_id.as_str()).or_default() += 1;
        }
        let max_k = per_q.values().copied().min().unwrap_or(0);
        for k in 1..=max_k {
            let v = mean_pass_at_k(&rs, k).map_err(|e| CliError::Other(anyhow::anyhow!("{e}")))?;
            w.write_record([
                m.clone(),
                k.to_string(),
                format!("{v:.6}"),
                per_q.len().to_string(),
            ])?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Other(anyhow::anyhow!("{e}")))?;
    put("passk.csv", &bytes, Some(json!({ "methods": methods })))?;

    // Category z-scores across methods.
    if methods.len() >= 2 {
        match mean_accuracy_matrix(&records).and_then(|m| category_zscores(&m).map(|z| (m, z))) {
            Ok((m, z)) => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(["category", "method", "accuracy", "z", "degenerate"])?;
                for (ci, cat) in z.categories.iter().enumerate() {
                    for (mi, method) in z.methods.iter().enumerate() {
                        w.write_record([
                            cat.clone(),
                            method.clone(),
                            format!("{:.6}", m.values[ci][mi]),
                            format!("{:.6}", z.z[ci][mi]),
                            z.degenerate[ci].to_string(),
                        ])?;
                    }
                }
                let bytes = w
                    .into_inner()
                    .map_err(|e| CliError::Other(anyhow::anyhow!("{e}")))?;
                put("zscores.csv", &bytes, Some(json!({ "sd": "population" })))?;
            }
            Err(e) => warn!("z-scores skipped: {e}"),
        }
    } else {
        warn!("z-scores skipped: need at least two methods");
    }

    // Token footprints.
    let mut omitted = serde_json::Map::new();
    for (metric, name) in [
        (TokenMetric::Total, "footprint_total.csv"),
        (TokenMetric::Thinking, "footprint_thinking.csv"),
    ] {
        let fp = token_footprint(&records, metric);
        let om = json!(fp.omitted);
        put(
            name,
            &csv_bytes(|b| fp.write_csv(b))?,
            Some(json!({ "metric": metric, "omitted": om })),
        )?;
        omitted.insert(name.to_string(), om);
    }

    let vocab_hash = std::fs::read(&cfg.paths.vocab).ok().map(|b| sha256_hex(&b));
    let manifest = json!({
        "config_hash": ctx.hash,
        "config": cfg.to_json(),
        "vocab_sha256": vocab_hash,
        "inputs": input_meta,
        "method_config_hashes": hashes,
        "omitted_footprint_groups": omitted,
        "outputs": written,
    });
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&dir.join("manifest.json"), text.as_bytes())?;

    summary.push_str(&format!(
        "report: {} records, methods {methods:?} -> {}",
        records.len(),
        display(dir)
    ));
    Ok(summary)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
