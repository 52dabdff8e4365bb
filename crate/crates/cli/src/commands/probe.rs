//! `probe`: teacher-forced scoring of traces under real, noise and absent
//! images, then per-step perplexities and binned delta curves.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::{info, warn};
use lookback_core::backend::{
    make_noise_context, Backend, ContextKind, ScoreRequest, ScoreResponse, TokenLogprob,
    VisualContext,
};
use lookback_core::probe::{aggregate_delta_curves, step_perplexities, write_curves_csv, GroupBy};
use lookback_core::ThinkingTrace;
use serde_json::json;

use super::{backend_error, is_fatal, resume_hint, sibling, Ctx};
use crate::data::{
    load_context, load_questions, thinking_prefix, write_meta, ProbeLine, ScoreLine, TraceLine,
};
use crate::error::{CliError, CliResult};
use crate::journal::{journal_path, JournaledBackend};
use crate::pool::{run_pool, Flow};
use crate::store::{read_jsonl, settled_keys, write_atomic, JsonlStore, UnitState};

/// Where the raw per-context scores of a probe run are kept.
pub fn scores_path(probes: &Path) -> PathBuf {
    sibling(probes, "scores.jsonl")
}

/// Curves indexed by raw step rather than normalized position.
pub fn raw_curves_path(curves: &Path) -> PathBuf {
    let stem = curves
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = curves
        .extension()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    curves.with_file_name(format!("{stem}_raw.{ext}"))
}

fn unit_key(trace_key: &str, kind: ContextKind) -> String {
    format!("{trace_key}/{}", kind.as_str())
}

struct Unit {
    key: String,
    trace: usize,
    kind: ContextKind,
}

pub fn run(ctx: &Ctx) -> CliResult<String> {
    let cfg = &ctx.cfg;
    let lines: Vec<TraceLine> = read_jsonl(&cfg.paths.traces)?;
    let questions: BTreeMap<String, _> = load_questions(&cfg.paths.questions)?
        .into_iter()
        .map(|q| (q.id.clone(), q))
        .collect();

    let mut seen = BTreeSet::new();
    let mut traces: Vec<ThinkingTrace> = Vec::with_capacity(lines.len());
    for l in &lines {
        l.trace
            .validate()
            .map_err(|e| CliError::Config(format!("{}: {e}", cfg.paths.traces.display())))?;
        if !seen.insert(l.trace.key()) {
            return Err(CliError::Config(format!(
                "{}: duplicate trace {}",
                cfg.paths.traces.display(),
                l.trace.key()
            )));
        }
        traces.push(thinking_prefix(&l.trace));
    }

    let out = scores_path(&cfg.paths.probes);
    if ctx.dry_run {
        let settled = settled_keys(&out, &ctx.hash)?;
        let pending = traces
            .iter()
            .filter(|t| !t.tokens.is_empty())
            .flat_map(|t| ContextKind::ALL.map(|k| unit_key(&t.key(), k)))
            .filter(|k| !settled.contains(k))
            .count();
        return Ok(format!(
            "probe (dry run): {} traces, {pending} score calls planned",
            traces.len()
        ));
    }

    let mut store = JsonlStore::open(&out, &ctx.hash, &cfg.to_json())?;
    let mut contexts: BTreeMap<&str, (VisualContext, VisualContext)> = BTreeMap::new();
    let mut units = Vec::new();
    for (ti, t) in traces.iter().enumerate() {
        let keys = ContextKind::ALL.map(|k| unit_key(&t.key(), k));
        if keys.iter().all(|k| store.is_settled(k)) {
            continue;
        }
        let reason = if t.tokens.is_empty() {
            Some("trace has no thinking tokens".to_string())
        } else if let Some(q) = questions.get(&t.question_id) {
            if contexts.contains_key(q.id.as_str()) {
                None
            } else {
                match load_context(q) {
                    Ok(real) => {
                        let noise = make_noise_context(&real, cfg.sampling.seed)
                            .map_err(|e| backend_error(&e))?;
                        contexts.insert(q.id.as_str(), (real, noise));
                        None
                    }
                    Err(r) => Some(r),
                }
            }
        } else {
            Some(format!(
                "question {} not in {}",
                t.question_id,
                cfg.paths.questions.display()
            ))
        };
        if let Some(reason) = reason {
            warn!("skipping trace {}: {reason}", t.key());
            for k in &keys {
                if !store.is_settled(k) {
                    store.skip(k, &reason)?;
                }
            }
            continue;
        }
        for (kind, key) in ContextKind::ALL.into_iter().zip(keys) {
            if !store.is_settled(&key) {
                units.push(Unit {
                    key,
                    trace: ti,
                    kind,
                });
            }
        }
    }

    let total = traces.len() * ContextKind::ALL.len();
    info!("probe: {} score calls pending", units.len());
    let (live, replayed) = ctx.with_backend(|backend| {
        let journal = JournaledBackend::open(backend, &journal_path(&out))?;
        let work = |u: &Unit| {
            let t = &traces[u.trace];
            let q = &questions[&t.question_id];
            let (real, noise) = &contexts[q.id.as_str()];
            let context = match u.kind {
                ContextKind::Real => real.clone(),
                ContextKind::Noise => noise.clone(),
                ContextKind::Absent => VisualContext::absent(),
            };
            let model_id = if t.model_id.is_empty() {
                cfg.backend.model_id.clone()
            } else {
                t.model_id.clone()
            };
            let req = ScoreRequest {
                model_id,
                question: q.text.clone(),
                context,
                continuation: t.texts().map(str::to_string).collect(),
            };
            journal
                .score(&req)
                .and_then(|resp| resp.check_against(&req).map(|_| resp))
        };
        let mut first_error: Option<CliError> = None;
        run_pool(&units, cfg.run.workers, work, |i, result| {
            let u = &units[i];
            let written = match result {
                Ok(resp) => store.append(
                    &u.key,
                    &ScoreLine {
                        config_hash: ctx.hash.clone(),
                        trace: traces[u.trace].key(),
                        context: u.kind,
                        logprobs: resp.logprobs().collect(),
                    },
                ),
                Err(e) => {
                    warn!("scoring {} failed: {e}", u.key);
                    let r = store.fail(&u.key, &e.to_string());
                    let fatal = is_fatal(&e);
                    first_error.get_or_insert(backend_error(&e));
                    if fatal {
                        return Flow::Stop;
                    }
                    r
                }
            };
            match written {
                Ok(()) => Flow::Continue,
                Err(e) => {
                    first_error = Some(e);
                    Flow::Stop
                }
            }
        });
        if let Some(e) = first_error {
            let settled = store.count(|s| !matches!(s, UnitState::Failed(_)));
            let hint = resume_hint(settled, total);
            return Err(match e {
                CliError::Backend(m) => CliError::Backend(format!("{m} ({hint})")),
                other => other,
            });
        }
        Ok((journal.live_calls(), journal.replayed_calls()))
    })?;
    drop(store);

    let written = assemble(ctx, &lines, &traces, &out)?;
    Ok(format!(
        "probe: {live} score calls this run ({replayed} replayed from journal); {} traces probed, \
         {written} probe records -> {}, curves -> {}",
        traces.len(),
        cfg.paths.probes.display(),
        cfg.paths.curves.display()
    ))
}

/// Turns complete score triples into probe records and curves.
fn assemble(
    ctx: &Ctx,
    lines: &[TraceLine],
    traces: &[ThinkingTrace],
    scores: &Path,
) -> CliResult<usize> {
    let cfg = &ctx.cfg;
    let mut by_key: BTreeMap<(String, ContextKind), Vec<f64>> = BTreeMap::new();
    for s in read_jsonl::<ScoreLine>(scores)? {
        by_key.insert((s.trace, s.context), s.logprobs);
    }
    // Key order, so the file does not depend on the order decoding finished.
    let mut ordered: Vec<&ThinkingTrace> = traces.iter().collect();
    ordered.sort_by(|a, b| (&a.question_id, a.pass_index).cmp(&(&b.question_id, b.pass_index)));
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for t in ordered {
        let key = t.key();
        let resp = |kind| {
            by_key
                .get(&(key.clone(), kind))
                .map(|lps: &Vec<f64>| ScoreResponse {
                    token_logprobs: t
                        .texts()
                        .zip(lps)
                        .map(|(text, &logprob)| TokenLogprob {
                            text: text.to_string(),
                            logprob,
                        })
                        .collect(),
                    model_echo: String::new(),
                })
        };
        let (Some(r), Some(n), Some(a)) = (
            resp(ContextKind::Real),
            resp(ContextKind::Noise),
            resp(ContextKind::Absent),
        ) else {
            skipped += 1;
            continue;
        };
        let recs = step_perplexities(t, &r, &n, &a)
            .map_err(|e| CliError::Other(anyhow::anyhow!("{key}: {e}")))?;
        records.extend(recs);
    }
    if skipped > 0 {
        warn!("{skipped} trace(s) lack a complete score triple and are left out");
    }

    let mut body = String::new();
    for r in &records {
        body.push_str(&serde_json::to_string(&ProbeLine {
            config_hash: ctx.hash.clone(),
            record: r.clone(),
        })?);
        body.push('\n');
    }
    write_atomic(&cfg.paths.probes, body.as_bytes())?;

    if records.is_empty() {
        warn!("no probe records; curves not written");
        return Ok(0);
    }
    let curves = aggregate_delta_curves(&records, GroupBy::BOTH, cfg.probe.bins)
        .map_err(|e| CliError::Other(anyhow::anyhow!("{e}")))?;
    let meta = |kind: &str| {
        json!({
            "kind": kind,
            "bins": cfg.probe.bins,
            "group_by": GroupBy::BOTH,
            "traces": lines.len(),
            "records": records.len(),
        })
    };
    for (path, rows, kind) in [
        (cfg.paths.curves.clone(), &curves.normalized, "normalized"),
        (raw_curves_path(&cfg.paths.curves), &curves.raw, "raw_step"),
    ] {
        let mut buf = Vec::new();
        write_curves_csv(rows, &mut buf)?;
        write_atomic(&path, &buf)?;
        write_meta(&path, &ctx.hash, meta(kind))?;
    }
    Ok(records.len())
}
