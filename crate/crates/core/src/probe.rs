//! Three-context perplexity probe.
//!
//! Every trace token is scored with the real image (R), a matched noise image
//! (N) and no image (∅). Per-step perplexity is `exp(-logprob)`; the content
//! contrast is `PPL_R - PPL_N` and the presence contrast `PPL_N - PPL_∅`.
//! A negative content contrast means the true image makes the token easier to
//! predict.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{ContextKind, ScoreResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Thinking,
    Answer,
}

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
    #[default]
    Unknown,
}

impl Difficulty {
    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
            Difficulty::Unknown => "unknown",
        }
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceToken {
    pub text: String,
    pub logprob: f64,
    pub phase: Phase,
    /// Forced text added by the controller rather than sampled.
    #[serde(default, skip_serializing_if = "is_false")]
    pub injected: bool,
}

/// A decoded reasoning trace with per-token log-probabilities and phase
/// labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThinkingTrace {
    pub question_id: String,
    pub pass_index: u32,
    pub tokens: Vec<TraceToken>,
    #[serde(default)]
    pub correct: Option<bool>,
    pub model_id: String,
    #[serde(default)]
    pub category: String,
    #[serde(default)]
    pub difficulty: Difficulty,
}

impl ThinkingTrace {
    /// Stable identity of a (question, pass) pair.
    pub fn key(&self) -> String {
        trace_key(&self.question_id, self.pass_index)
    }

    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.tokens.is_empty() {
            return Err(ProbeError::InvalidTrace(format!(
                "trace {} has no tokens",
                self.key()
            )));
        }
        let mut answering = false;
        for (i, t) in self.tokens.iter().enumerate() {
            match t.phase {
                Phase::Answer => answering = true,
                Phase::Thinking if answering => {
                    return Err(ProbeError::InvalidTrace(format!(
                        "trace {}: thinking token at step {} after answer began",
                        self.key(),
                        i + 1
                    )))
                }
                Phase::Thinking => {}
            }
        }
        Ok(())
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.text.as_str())
    }

    /// Sampled (non-injected) tokens.
    pub fn generated_tokens(&self) -> usize {
        self.tokens.iter().filter(|t| !t.injected).count()
    }

    /// Sampled tokens in the thinking phase.
    pub fn thinking_tokens(&self) -> usize {
        self.tokens
            .iter()
            .filter(|t| !t.injected && t.phase == Phase::Thinking)
            .count()
    }

    /// Text after the thinking phase, or the whole text when the trace never
    /// left it.
    pub fn answer_text(&self) -> String {
        let answer: String = self
            .tokens
            .iter()
            .filter(|t| t.phase == Phase::Answer)
            .map(|t| t.text.as_str())
            .collect();
        if answer.is_empty() {
            self.texts().collect()
        } else {
            answer
        }
    }
}

pub fn trace_key(question_id: &str, pass_index: u32) -> String {
    format!("{question_id}#{pass_index}")
}

/// Perplexities and contrasts for one trace step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub question_id: String,
    pub pass_index: u32,
    #[serde(default)]
    pub model_id: String,
    #[serde(default)]
    pub correct: Option<bool>,
    /// 1-based step index.
    pub step: usize,
    pub ppl_real: f64,
    pub ppl_noise: f64,
    pub ppl_absent: f64,
    pub delta_content: f64,
    pub delta_presence: f64,
    /// Percent position `100 * step / S`.
    pub norm_pos: f64,
}

impl ProbeRecord {
    pub fn trace_key(&self) -> String {
        trace_key(&self.question_id, self.pass_index)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProbeError {
    #[error("{context} scores cover {got} tokens but the trace has {expected}")]
    Alignment {
        context: ContextKind,
        expected: usize,
        got: usize,
    },
    #[error("no probe records to aggregate")]
    EmptyInput,
    #[error(
        "only {have} probe records; quantile thresholds need at least {need}. \
         Supply absolute thresholds instead"
    )]
    InsufficientData { have: usize, need: usize },
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

pub fn perplexity(logprob: f64) -> f64 {
    (-logprob).exp()
}

/// Per-step perplexities of `trace` under the three contexts.
pub fn step_perplexities(
    trace: &ThinkingTrace,
    real: &ScoreResponse,
    noise: &ScoreResponse,
    absent: &ScoreResponse,
) -> Result<Vec<ProbeRecord>, ProbeError> {
    let s_len = trace.tokens.len();
    for (context, resp) in [
        (ContextKind::Real, real),
        (ContextKind::Noise, noise),
        (ContextKind::Absent, absent),
    ] {
        if resp.token_logprobs.len() != s_len {
            return Err(ProbeError::Alignment {
                context,
                expected: s_len,
                got: resp.token_logprobs.len(),
            });
        }
    }
    let records = real
        .logprobs()
        .zip(noise.logprobs())
        .zip(absent.logprobs())
        .enumerate()
        .map(|(i, ((lr, ln), la))| {
            let (ppl_real, ppl_noise, ppl_absent) =
                (perplexity(lr), perplexity(ln), perplexity(la));
            let step = i + 1;
            ProbeRecord {
                question_id: trace.question_id.clone(),
                pass_index: trace.pass_index,
                model_id: trace.model_id.clone(),
                correct: trace.correct,
                step,
                ppl_real,
                ppl_noise,
                ppl_absent,
                delta_content: ppl_real - ppl_noise,
                delta_presence: ppl_noise - ppl_absent,
                norm_pos: 100.0 * step as f64 / s_len as f64,
            }
        })
        .collect();
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Series {
    #[serde(rename = "delta_content")]
    Content,
    #[serde(rename = "delta_presence")]
    Presence,
}

impl Series {
    fn value(self, r: &ProbeRecord) -> f64 {
        match self {
            Series::Content => r.delta_content,
            Series::Presence => r.delta_presence,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Series::Content => "delta_content",
            Series::Presence => "delta_presence",
        }
    }
}

/// Which record attributes split the curves.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupBy {
    pub correctness: bool,
    pub model_id: bool,
}

impl GroupBy {
    pub const BOTH: GroupBy = GroupBy {
        correctness: true,
        model_id: true,
    };

    fn label(&self, r: &ProbeRecord) -> String {
        let mut parts = Vec::new();
        if self.model_id {
            parts.push(r.model_id.clone());
        }
        if self.correctness {
            parts.push(
                match r.correct {
                    Some(true) => "correct",
                    Some(false) => "wrong",
                    None => "unlabeled",
                }
                .to_string(),
            );
        }
        if parts.is_empty() {
            "all".to_string()
        } else {
            parts.join("|")
        }
    }
}

/// One bin of an aggregate curve. `mean` is `None` for empty bins; `stderr`
/// needs at least two records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub group: String,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub series: Series,
    pub mean: Option<f64>,
    pub stderr: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DeltaCurves {
    /// Binned over normalized position.
    pub normalized: Vec<CurveRow>,
    /// One row per raw step index (`bin_lo == bin_hi == step`).
    pub raw: Vec<CurveRow>,
}

pub const DEFAULT_BINS: usize = 50;

#[derive(Default)]
struct Acc {
    n: usize,
    sum: f64,
    values: Vec<f64>,
}

impl Acc {
    fn push(&mut self, v: f64) {
        self.n += 1;
        self.sum += v;
        self.values.push(v);
    }

    fn stats(&self) -> (Option<f64>, Option<f64>) {
        if self.n == 0 {
            return (None, None);
        }
        let mean = self.sum / self.n as f64;
        let stderr = (self.n >= 2).then(|| {
            let ss: f64 = self.values.iter().map(|v| (v - mean).powi(2)).sum();
            (ss / (self.n - 1) as f64).sqrt() / (self.n as f64).sqrt()
        });
        (Some(mean), stderr)
    }
}

/// Bin of a normalized position. Positions are ratios `step / S`, so a value
/// within a tiny tolerance of a bin edge is on the edge; this keeps float
/// rounding (e.g. `100 * 7 / 15`) from pushing it into the lower bin.
pub fn bin_index(norm_pos: f64, bins: usize) -> usize {
    const EDGE_TOL: f64 = 1e-9;
    ((norm_pos * bins as f64 / 100.0 + EDGE_TOL).floor() as usize).min(bins - 1)
}

/// Binned mean / standard-error curves of both contrasts, per group.
pub fn aggregate_delta_curves(
    records: &[ProbeRecord],
    group_by: GroupBy,
    bins: usize,
) -> Result<DeltaCurves, ProbeError> {
    if bins < 2 {
        return Err(ProbeError::InvalidParam(format!(
            "bins must be >= 2, got {bins}"
        )));
    }
    if records.is_empty() {
        return Err(ProbeError::EmptyInput);
    }
    if let Some(r) = records
        .iter()
        .find(|r| !(0.0..=100.0).contains(&r.norm_pos))
    {
        return Err(ProbeError::InvalidParam(format!(
            "norm_pos {} outside [0, 100] for {} step {}",
            r.norm_pos,
            r.trace_key(),
            r.step
        )));
    }

    let mut norm: BTreeMap<(String, Series), Vec<Acc>> = BTreeMap::new();
    let mut raw: BTreeMap<(String, Series), BTreeMap<usize, Acc>> = BTreeMap::new();
    for r in records {
        let group = group_by.label(r);
        for series in [Series::Content, Series::Presence] {
            let v = series.value(r);
            norm.entry((group.clone(), series))
                .or_insert_with(|| (0..bins).map(|_| Acc::default()).collect())
                [bin_index(r.norm_pos, bins)]
            .push(v);
            raw.entry((group.clone(), series))
                .or_default()
                .entry(r.step)
                .or_default()
                .push(v);
        }
    }

    let width = 100.0 / bins as f64;
    let mut out = DeltaCurves::default();
    for ((group, series), accs) in &norm {
        for (i, acc) in accs.iter().enumerate() {
            let (mean, stderr) = acc.stats();
            out.normalized.push(CurveRow {
                group: group.clone(),
                bin_lo: i as f64 * width,
                bin_hi: if i + 1 == bins {
                    100.0
                } else {
                    (i + 1) as f64 * width
                },
                series: *series,
                mean,
                stderr,
                n: acc.n,
            });
        }
    }
    for ((group, series), steps) in &raw {
        let max_step = steps.keys().next_back().copied().unwrap_or(0);
        for s in 1..=max_step {
            let (mean, stderr, n) = match steps.get(&s) {
                Some(acc) => {
                    let (m, e) = acc.stats();
                    (m, e, acc.n)
                }
                None => (None, None, 0),
            };
            out.raw.push(CurveRow {
                group: group.clone(),
                bin_lo: s as f64,
                bin_hi: s as f64,
                series: *series,
                mean,
                stderr,
                n,
            });
        }
    }
    Ok(out)
}

/// Writes curve rows as CSV with columns
/// `group,bin_lo,bin_hi,series,mean,stderr,n`; nulls are empty fields.
pub fn write_curves_csv<W: Write>(rows: &[CurveRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["group", "bin_lo", "bin_hi", "series", "mean", "stderr", "n"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.group.clone(),
            r.bin_lo.to_string(),
            r.bin_hi.to_string(),
            r.series.as_str().to_string(),
            opt(r.mean),
            opt(r.stderr),
            r.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepFlag {
    /// Reacts to any image being present but not to its content.
    PresenceSensitive,
    /// The real image content makes the token markedly easier.
    ContentGrounded,
    Neutral,
}

/// How the flagging thresholds are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ThresholdSpec {
    /// Quantile levels in [0, 1] estimated from the records of this run.
    Quantiles {
        presence: f64,
        content: f64,
        grounded: f64,
    },
    /// Fixed thresholds: `|Δ_presence| >= presence_min`,
    /// `|Δ_content| <= content_max`, `Δ_content <= grounded_max`.
    Absolute {
        presence_min: f64,
        content_max: f64,
        grounded_max: f64,
    },
}

impl Default for ThresholdSpec {
    fn default() -> Self {
        ThresholdSpec::Quantiles {
            presence: 0.90,
            content: 0.50,
            grounded: 0.10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedThresholds {
    pub spec: ThresholdSpec,
    pub presence_min: f64,
    pub content_max: f64,
    pub grounded_max: f64,
}

pub const MIN_RECORDS_FOR_QUANTILES: usize = 100;

/// Linear-interpolation quantile of sorted data (the "type 7" rule).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v
}

impl ResolvedThresholds {
    pub fn resolve(records: &[ProbeRecord], spec: ThresholdSpec) -> Result<Self, ProbeError> {
        match spec {
            ThresholdSpec::Absolute {
                presence_min,
                content_max,
                grounded_max,
            } => Ok(ResolvedThresholds {
                spec,
                presence_min,
                content_max,
                grounded_max,
            }),
            ThresholdSpec::Quantiles {
                presence,
                content,
                grounded,
            } => {
                for q in [presence, content, grounded] {
                    if !(0.0..=1.0).contains(&q) {
                        return Err(ProbeError::InvalidParam(format!(
                            "quantile level {q} outside [0, 1]"
                        )));
                    }
                }
                if records.len() < MIN_RECORDS_FOR_QUANTILES {
                    return Err(ProbeError::InsufficientData {
                        have: records.len(),
                        need: MIN_RECORDS_FOR_QUANTILES,
                    });
                }
                let abs_p = sorted(records.iter().map(|r| r.delta_presence.abs()));
                let abs_c = sorted(records.iter().map(|r| r.delta_content.abs()));
                let dc = sorted(records.iter().map(|r| r.delta_content));
                Ok(ResolvedThresholds {
                    spec,
                    presence_min: quantile(&abs_p, presence),
                    content_max: quantile(&abs_c, content),
                    grounded_max: quantile(&dc, grounded),
                })
            }
        }
    }

    /// Classifies one record. A zero presence effect is never "large" and a
    /// non-negative content contrast is never "grounded", so degenerate
    /// all-zero data stays neutral.
    pub fn classify(&self, r: &ProbeRecord) -> StepFlag {
        let abs_p = r.delta_presence.abs();
        if abs_p > 0.0 && abs_p >= self.presence_min && r.delta_content.abs() <= self.content_max {
            StepFlag::PresenceSensitive
        } else if r.delta_content < 0.0 && r.delta_content <= self.grounded_max {
            StepFlag::ContentGrounded
        } else {
            StepFlag::Neutral
        }
    }
}

/// Flags every record; `flags[i]` belongs to `records[i]`.
pub fn flag_steps(
    records: &[ProbeRecord],
    spec: ThresholdSpec,
) -> Result<(Vec<StepFlag>, ResolvedThresholds), ProbeError> {
    if records.is_empty() {
        return Err(ProbeError::EmptyInput);
    }
    let thresholds = ResolvedThresholds::resolve(records, spec)?;
    Ok((
        records.iter().map(|r| thresholds.classify(r)).collect(),
        thresholds,
    ))
}
