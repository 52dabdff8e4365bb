//! `decode`: multi-pass decoding with (or without) lookback injection.

use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use lookback_core::backend::{make_noise_context, BackendError, VisualContext};
use lookback_core::controller::{run_decode, BranchSearch, DecodeRequest};
use lookback_core::eval::AnswerJudge;
use lookback_core::{PhraseVocabulary, ThinkingTrace};
use sha2::{Digest, Sha256};

use super::{backend_error, is_fatal, resume_hint, Ctx};
use crate::data::{load_context, load_questions, Question, TraceLine};
use crate::error::{CliError, CliResult};
use crate::journal::{journal_path, JournaledBackend};
use crate::pool::{run_pool, Flow};
use crate::store::{settled_keys, JsonlStore};

/// Sampling seed of one pass: a hash of the run seed and question id, offset
/// by the pass index so passes of a question never share a seed.
pub fn pass_seed(run_seed: u64, question_id: &str, pass: u32) -> u64 {
    let d = Sha256::digest(format!("{run_seed}\n{question_id}").as_bytes());
    let base = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    base.wrapping_add(pass as u64)
}

fn unit_key(q: &Question, pass: u32) -> String {
    lookback_core::probe::trace_key(&q.id, pass)
}

fn load_vocab(ctx: &Ctx) -> CliResult<PhraseVocabulary> {
    if ctx.cfg.controller.max_injections == 0 {
        return Ok(PhraseVocabulary::new(Vec::new(), Vec::new(), Vec::new()));
    }
    let path = &ctx.cfg.paths.vocab;
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Config(format!(
            "cannot read vocabulary {}: {e}; run `mine` first or pass --no-lookback",
            path.display()
        ))
    })?;
    PhraseVocabulary::from_json(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn judge(ctx: &Ctx) -> CliResult<AnswerJudge> {
    let patterns = &ctx.cfg.eval.answer_patterns;
    if patterns.is_empty() {
        return Ok(AnswerJudge::default());
    }
    AnswerJudge::new(patterns).map_err(|e| CliError::Config(format!("eval.answer_patterns: {e}")))
}

struct Job<'q> {
    question: &'q Question,
    pass: u32,
    key: String,
}

enum Failure {
    Backend(BackendError),
    Config(String),
}

pub fn run(ctx: &Ctx) -> CliResult<String> {
    let cfg = &ctx.cfg;
    let out = &cfg.paths.traces;
    let questions = load_questions(&cfg.paths.questions)?;
    let vocab = load_vocab(ctx)?;
    let judge = judge(ctx)?;
    let total = questions.len() * cfg.sampling.n_passes as usize;

    if ctx.dry_run {
        let settled = settled_keys(out, &ctx.hash)?;
        let pending = questions
            .iter()
            .flat_map(|q| (0..cfg.sampling.n_passes).map(move |p| unit_key(q, p)))
            .filter(|k| !settled.contains(k))
            .count();
        return Ok(format!(
            "decode (dry run): {} questions x {} passes = {total} passes, {pending} pending, \
             method {:?}, lookback {}",
            questions.len(),
            cfg.sampling.n_passes,
            cfg.eval.method_id,
            if cfg.controller.max_injections == 0 {
                "off"
            } else {
                "on"
            },
        ));
    }

    let mut store = JsonlStore::open(out, &ctx.hash, &cfg.to_json())?;

    // Per-question contexts; a question without a usable image is skipped.
    let mut contexts: BTreeMap<&str, (VisualContext, VisualContext)> = BTreeMap::new();
    let mut jobs = Vec::new();
    for q in &questions {
        let keys: Vec<String> = (0..cfg.sampling.n_passes).map(|p| unit_key(q, p)).collect();
        if keys.iter().all(|k| store.is_settled(k)) {
            continue;
        }
        let real = match load_context(q) {
            Ok(c) => c,
            Err(reason) => {
                warn!("skipping question {}: {reason}", q.id);
                for k in &keys {
                    if !store.is_settled(k) {
                        store.skip(k, &reason)?;
                    }
                }
                continue;
            }
        };
        let noise = make_noise_context(&real, cfg.sampling.seed).map_err(|e| backend_error(&e))?;
        contexts.insert(q.id.as_str(), (real, noise));
        for (pass, key) in (0..cfg.sampling.n_passes).zip(keys) {
            if !store.is_settled(&key) {
                jobs.push(Job {
                    question: q,
                    pass,
                    key,
                });
            }
        }
    }

    let settled_before = total - jobs.len();
    info!("decode: {} pending of {total} passes", jobs.len());
    ctx.with_backend(|backend| {
        let journal = JournaledBackend::open(backend, &journal_path(out))?;
        let work = |job: &Job| -> Result<TraceLine, Failure> {
            let q = job.question;
            let (real, noise) = &contexts[q.id.as_str()];
            let seed = pass_seed(cfg.sampling.seed, &q.id, job.pass);
            let req = DecodeRequest {
                model_id: cfg.backend.model_id.clone(),
                question: q.text.clone(),
                context: real.clone(),
                temperature: cfg.sampling.temperature,
                top_p: cfg.sampling.top_p,
                seed,
                budget: cfg.budgets.active(),
            };
            let branch = cfg.branching.enabled.then_some(BranchSearch {
                config: cfg.branching,
                noise,
            });
            let outcome = run_decode(&journal, &req, &vocab, &cfg.controller, branch)
                .map_err(|e| Failure::Config(e.to_string()))?;
            if let Some(e) = outcome.error.clone() {
                return Err(Failure::Backend(e));
            }
            let mut trace = ThinkingTrace {
                question_id: q.id.clone(),
                pass_index: job.pass,
                tokens: outcome.tokens().to_vec(),
                correct: None,
                model_id: cfg.backend.model_id.clone(),
                category: q.category.clone(),
                difficulty: q.difficulty,
            };
            let answer_text = trace.answer_text();
            trace.correct = q
                .answer
                .as_deref()
                .map(|gold| judge.is_correct(&answer_text, gold));
            Ok(TraceLine {
                config_hash: ctx.hash.clone(),
                method_id: cfg.eval.method_id.clone(),
                seed: Some(seed),
                answer: judge.extract(&answer_text),
                trace,
                decode: Some(outcome.log()),
            })
        };

        let mut failures = 0usize;
        let mut first_error: Option<CliError> = None;
        run_pool(&jobs, cfg.run.workers, work, |i, result| {
            let key = &jobs[i].key;
            let written = match result {
                Ok(line) => store.append(key, &line),
                Err(f) => {
                    failures += 1;
                    let (msg, fatal, err) = match f {
                        Failure::Backend(e) => (e.to_string(), is_fatal(&e), backend_error(&e)),
                        Failure::Config(m) => (m.clone(), true, CliError::Config(m)),
                    };
                    warn!("pass {key} failed: {msg}");
                    first_error.get_or_insert(err);
                    let r = store.fail(key, &msg);
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

        let done = store.count(|s| matches!(s, crate::store::UnitState::Done));
        let skipped = store.count(|s| matches!(s, crate::store::UnitState::Skipped(_)));
        if let Some(e) = first_error {
            let hint = resume_hint(done + skipped, total);
            return Err(match e {
                CliError::Backend(m) => {
                    CliError::Backend(format!("{m} ({failures} pass(es) failed; {hint})"))
                }
                CliError::Config(m) => CliError::Config(m),
                other => other,
            });
        }
        Ok(format!(
            "decode: {} passes written this run ({settled_before} already settled), {done} done, \
             {skipped} skipped; {} backend calls ({} replayed from journal) -> {}",
            jobs.len(),
            journal.live_calls(),
            journal.replayed_calls(),
            display(out),
        ))
    })
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
