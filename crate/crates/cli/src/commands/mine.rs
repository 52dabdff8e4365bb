//! `mine`: step flags from probe records, then the phrase vocabulary.

use std::collections::BTreeMap;

use log::warn;
use lookback_core::miner::{alignment_rate, mine_vocabulary, FlaggedTrace, MinerError, Provenance};
use lookback_core::probe::{flag_steps, ProbeError, StepFlag, ThresholdSpec};
use lookback_core::ThinkingTrace;
use serde_json::json;

use super::Ctx;
use crate::config::sha256_hex;
use crate::data::{thinking_prefix, write_meta, ProbeLine, TraceLine};
use crate::error::{CliError, CliResult};
use crate::store::{read_jsonl, write_atomic};

pub fn run(ctx: &Ctx) -> CliResult<String> {
    let cfg = &ctx.cfg;
    let probes_path = &cfg.paths.probes;
    let probe_bytes = std::fs::read(probes_path).map_err(|e| {
        CliError::Config(format!(
            "cannot read {}: {e}; run `probe` first",
            probes_path.display()
        ))
    })?;
    let probes: Vec<ProbeLine> = read_jsonl(probes_path)?;
    let lines: Vec<TraceLine> = read_jsonl(&cfg.paths.traces)?;

    let mut by_trace: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for p in probes {
        by_trace
            .entry(p.record.trace_key())
            .or_default()
            .push(p.record);
    }

    // Traces in file order, each with its step records in step order.
    let mut traces: Vec<ThinkingTrace> = Vec::new();
    let mut records = Vec::new();
    for l in &lines {
        let Some(mut recs) = by_trace.remove(&l.trace.key()) else {
            continue;
        };
        let t = thinking_prefix(&l.trace);
        recs.sort_by_key(|r| r.step);
        if recs.len() != t.tokens.len() || recs.iter().enumerate().any(|(i, r)| r.step != i + 1) {
            return Err(CliError::Config(format!(
                "probe records of {} do not cover its {} thinking tokens; rerun `probe`",
                t.key(),
                t.tokens.len()
            )));
        }
        records.extend(recs);
        traces.push(t);
    }
    if let Some(orphan) = by_trace.keys().next() {
        warn!(
            "{} probed trace(s) missing from the trace file, e.g. {orphan}",
            by_trace.len()
        );
    }

    if ctx.dry_run {
        return Ok(format!(
            "mine (dry run): {} traces, {} probe records, no backend calls",
            traces.len(),
            records.len()
        ));
    }

    let (flags, thresholds) = flag_steps(&records, cfg.probe.thresholds).map_err(|e| match e {
        ProbeError::InsufficientData { .. } => CliError::Config(format!(
            "{e}; e.g. set probe.thresholds = {{ mode = \"absolute\", presence_min = .., content_max = .., grounded_max = .. }} in the config"
        )),
        ProbeError::EmptyInput => CliError::Config(format!("{}: no probe records", probes_path.display())),
        other => CliError::Other(anyhow::anyhow!("{other}")),
    })?;

    let mut flagged = Vec::with_capacity(traces.len());
    let mut offset = 0;
    for t in &traces {
        let n = t.tokens.len();
        flagged.push(
            FlaggedTrace::new(t, &flags[offset..offset + n])
                .map_err(|e| CliError::Other(anyhow::anyhow!("{e}")))?,
        );
        offset += n;
    }

    let provenance = Provenance {
        thresholds: Some(thresholds.clone()),
        corpus_id: sha256_hex(&probe_bytes),
        config_hash: ctx.hash.clone(),
        run_seed: cfg.sampling.seed,
        ..Provenance::default()
    };
    let vocab = mine_vocabulary(&flagged, &cfg.mining, provenance).map_err(|e| match e {
        MinerError::NoCorrectTraces | MinerError::InvalidParam(_) => {
            CliError::Config(e.to_string())
        }
        other => CliError::Other(anyhow::anyhow!("{other}")),
    })?;

    let alignment = match alignment_rate(&vocab, &flagged) {
        Ok(r) => Some(r),
        Err(MinerError::UndefinedRate(why)) => {
            warn!("alignment rate undefined: {why}");
            None
        }
        Err(e) => return Err(CliError::Other(anyhow::anyhow!("{e}"))),
    };

    let count = |f: StepFlag| flags.iter().filter(|&&x| x == f).count();
    let (presence, grounded) = (
        count(StepFlag::PresenceSensitive),
        count(StepFlag::ContentGrounded),
    );
    if presence == 0 {
        warn!("no presence-sensitive steps flagged; vocabulary holds seed markers only");
    }

    let out = &cfg.paths.vocab;
    write_atomic(out, vocab.to_json().as_bytes())?;
    write_meta(
        out,
        &ctx.hash,
        json!({
            "thresholds": thresholds,
            "threshold_kind": match cfg.probe.thresholds {
                ThresholdSpec::Absolute { .. } => "absolute",
                ThresholdSpec::Quantiles { .. } => "quantiles",
            },
            "records": records.len(),
            "traces": traces.len(),
            "presence_sensitive_steps": presence,
            "content_grounded_steps": grounded,
            "alignment": alignment,
        }),
    )?;

    let top: Vec<&str> = vocab
        .pause_phrases
        .iter()
        .take(5)
        .map(|p| p.text.as_str())
        .collect();
    Ok(format!(
        "mine: {} records from {} traces; {presence} presence-sensitive, {grounded} content-grounded steps; \
         {} pause phrases (top: {top:?}), {} templates, alignment {} -> {}",
        records.len(),
        traces.len(),
        vocab.pause_phrases.len(),
        vocab.lookback_templates.len(),
        alignment.map_or("undefined".to_string(), |a| format!("{:.3}", a.rate)),
        out.display()
    ))
}
