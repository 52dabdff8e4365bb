//! Offline mining of pause phrases and lookback templates.
//!
//! Phrases are word n-grams of the detokenized thinking text. An n-gram
//! "occurs at" the step holding the last character of its final word, and its
//! enrichment is the rate at which those steps carry the target flag divided
//! by the background rate over all eligible word endpoints.

use std::collections::{BTreeMap, HashMap};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::probe::{Phase, ResolvedThresholds, StepFlag, ThinkingTrace};
use crate::text::{normalize_phrase, words_with_steps, WordSpan};

pub const VOCAB_FORMAT: &str = "lookback-vocab/v1";
pub const SEED_MARKERS: [&str; 2] = ["hmm", "wait"];
pub const DEFAULT_TEMPLATE: &str = "Looking back at the image, ";

#[derive(Debug, Error)]
pub enum MinerError {
    #[error("trace {key}: {flags} flags for {tokens} tokens")]
    FlagMismatch {
        key: String,
        flags: usize,
        tokens: usize,
    },
    #[error(
        "no traces labeled correct; lookback templates are mined from labeled \
         validation traces (run `eval` on a validation split first)"
    )]
    NoCorrectTraces,
    #[error("alignment rate is undefined: {0}")]
    UndefinedRate(String),
    #[error("invalid mining parameter: {0}")]
    InvalidParam(String),
    #[error("vocabulary file: {0}")]
    Format(String),
}

/// A trace paired with the per-token flags from the probe.
#[derive(Debug, Clone, Copy)]
pub struct FlaggedTrace<'a> {
    pub trace: &'a ThinkingTrace,
    pub flags: &'a [StepFlag],
}

impl<'a> FlaggedTrace<'a> {
    pub fn new(trace: &'a ThinkingTrace, flags: &'a [StepFlag]) -> Result<Self, MinerError> {
        if flags.len() != trace.tokens.len() {
            return Err(MinerError::FlagMismatch {
                key: trace.key(),
                flags: flags.len(),
                tokens: trace.tokens.len(),
            });
        }
        Ok(FlaggedTrace { trace, flags })
    }

    /// Maximal runs of consecutive words that end on sampled thinking tokens.
    fn eligible_runs(&self) -> Vec<Vec<WordSpan>> {
        let mut runs = vec![Vec::new()];
        for span in words_with_steps(self.trace.texts()) {
            let tok = &self.trace.tokens[span.end_step];
            if tok.phase == Phase::Thinking && !tok.injected {
                runs.last_mut().expect("non-empty").push(span);
            } else if !runs.last().expect("non-empty").is_empty() {
                runs.push(Vec::new());
            }
        }
        runs.retain(|r| !r.is_empty());
        runs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningParams {
    pub min_support: usize,
    pub min_enrichment: f64,
    /// Inclusive word-length range for pause phrases.
    pub pause_n: (usize, usize),
    /// Inclusive word-length range for lookback templates.
    pub template_n: (usize, usize),
    pub seed_markers: Vec<String>,
    /// Use [`DEFAULT_TEMPLATE`] when no template is mined.
    pub fallback_template: bool,
}

impl Default for MiningParams {
    fn default() -> Self {
        MiningParams {
            min_support: 5,
            min_enrichment: 4.0,
            pause_n: (1, 6),
            template_n: (3, 10),
            seed_markers: SEED_MARKERS.iter().map(|s| s.to_string()).collect(),
            fallback_template: true,
        }
    }
}

impl MiningParams {
    fn check_range(&self, (lo, hi): (usize, usize)) -> Result<(), MinerError> {
        if lo == 0 || hi < lo {
            return Err(MinerError::InvalidParam(format!(
                "bad n-gram range {lo}..={hi}"
            )));
        }
        if !self.min_enrichment.is_finite() || self.min_enrichment < 0.0 {
            return Err(MinerError::InvalidParam(format!(
                "min_enrichment must be finite and >= 0, got {}",
                self.min_enrichment
            )));
        }
        Ok(())
    }

    /// Configured seeds plus the mandatory ones, normalized and deduplicated.
    pub fn effective_seeds(&self) -> Vec<String> {
        let mut seeds: Vec<String> = Vec::new();
        for s in SEED_MARKERS
            .iter()
            .copied()
            .chain(self.seed_markers.iter().map(String::as_str))
        {
            let s = normalize_phrase(s);
            if !s.is_empty() && !seeds.contains(&s) {
                seeds.push(s);
            }
        }
        seeds
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PausePhrase {
    pub text: String,
    /// Length in words.
    pub n: usize,
    pub enrichment: f64,
    pub support: usize,
    /// Occurrences ending on a flagged step.
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookbackTemplate {
    /// Normalized phrase, used for matching and deduplication.
    pub text: String,
    /// Surface form that gets injected into the stream.
    pub injection_text: String,
    pub enrichment: f64,
    pub support: usize,
    pub flagged: usize,
}

impl LookbackTemplate {
    pub fn from_injection(injection_text: &str) -> Self {
        LookbackTemplate {
            text: normalize_phrase(injection_text),
            injection_text: injection_text.to_string(),
            enrichment: 0.0,
            support: 0,
            flagged: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default)]
    pub thresholds: Option<ResolvedThresholds>,
    #[serde(default)]
    pub corpus_id: String,
    /// Hash of the run configuration that produced the vocabulary.
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub run_seed: u64,
    #[serde(default)]
    pub params: Option<MiningParams>,
    /// Background flagged rates the enrichments were computed against.
    #[serde(default)]
    pub presence_background: Option<f64>,
    #[serde(default)]
    pub grounded_background: Option<f64>,
}

/// Mined pause phrases, lookback templates and seed markers, stored together
/// in one versioned JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseVocabulary {
    pub format: String,
    pub pause_phrases: Vec<PausePhrase>,
    pub lookback_templates: Vec<LookbackTemplate>,
    pub seed_markers: Vec<String>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl PhraseVocabulary {
    pub fn new(
        pause_phrases: Vec<PausePhrase>,
        lookback_templates: Vec<LookbackTemplate>,
        seed_markers: Vec<String>,
    ) -> Self {
        let mut seeds: Vec<String> = Vec::new();
        for s in SEED_MARKERS
            .iter()
            .map(|s| s.to_string())
            .chain(seed_markers)
        {
            let s = normalize_phrase(&s);
            if !s.is_empty() && !seeds.contains(&s) {
                seeds.push(s);
            }
        }
        PhraseVocabulary {
            format: VOCAB_FORMAT.to_string(),
            pause_phrases,
            lookback_templates,
            seed_markers: seeds,
            provenance: Provenance::default(),
        }
    }

    /// Every phrase the controller should trigger on: mined phrases first,
    /// then seed markers not already present.
    pub fn trigger_phrases(&self) -> Vec<String> {
        let mut out: Vec<String> = self.pause_phrases.iter().map(|p| p.text.clone()).collect();
        for s in &self.seed_markers {
            if !out.contains(s) {
                out.push(s.clone());
            }
        }
        out
    }

    /// Templates to inject: the mined set, or the built-in default when none
    /// were mined and `fallback` is on.
    pub fn effective_templates(&self, fallback: bool) -> Vec<LookbackTemplate> {
        if self.lookback_templates.is_empty() && fallback {
            vec![LookbackTemplate::from_injection(DEFAULT_TEMPLATE)]
        } else {
            self.lookback_templates.clone()
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("vocabulary serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, MinerError> {
        let v: PhraseVocabulary =
            serde_json::from_str(text).map_err(|e| MinerError::Format(e.to_string()))?;
        if v.format != VOCAB_FORMAT {
            return Err(MinerError::Format(format!(
                "unsupported format tag {:?} (expected {VOCAB_FORMAT:?})",
                v.format
            )));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct GramCount {
    support: usize,
    flagged: usize,
    surfaces: HashMap<String, usize>,
}

#[derive(Debug, Default)]
struct CountTable {
    grams: HashMap<String, GramCount>,
    endpoints: usize,
    flagged_endpoints: usize,
}

impl CountTable {
    fn merge(mut self, other: CountTable) -> CountTable {
        self.endpoints += other.endpoints;
        self.flagged_endpoints += other.flagged_endpoints;
        for (k, v) in other.grams {
            let e = self.grams.entry(k).or_default();
            e.support += v.support;
            e.flagged += v.flagged;
            for (s, c) in v.surfaces {
                *e.surfaces.entry(s).or_default() += c;
            }
        }
        self
    }

    fn background(&self) -> f64 {
        if self.endpoints == 0 {
            0.0
        } else {
            self.flagged_endpoints as f64 / self.endpoints as f64
        }
    }
}

fn count_trace(
    mut table: CountTable,
    ft: &FlaggedTrace<'_>,
    target: StepFlag,
    (lo, hi): (usize, usize),
    surfaces: bool,
) -> CountTable {
    for run in ft.eligible_runs() {
        for (j, end) in run.iter().enumerate() {
            let hit = ft.flags[end.end_step] == target;
            table.endpoints += 1;
            table.flagged_endpoints += hit as usize;
            // Grow the gram leftwards from its endpoint.
            let mut key = String::new();
            let mut surface = String::new();
            for n in 1..=hi.min(j + 1) {
                let w = &run[j + 1 - n];
                if n > 1 {
                    key.insert(0, ' ');
                    if surfaces {
                        surface.insert(0, ' ');
                    }
                }
                key.insert_str(0, &w.word);
                if surfaces {
                    surface.insert_str(0, &w.surface);
                }
                if n < lo {
                    continue;
                }
                let e = match table.grams.get_mut(key.as_str()) {
                    Some(e) => e,
                    None => table.grams.entry(key.clone()).or_default(),
                };
                e.support += 1;
                e.flagged += hit as usize;
                if surfaces {
                    match e.surfaces.get_mut(surface.as_str()) {
                        Some(c) => *c += 1,
                        None => {
                            e.surfaces.insert(surface.clone(), 1);
                        }
                    }
                }
            }
        }
    }
    table
}

fn count_all(
    traces: &[FlaggedTrace<'_>],
    target: StepFlag,
    range: (usize, usize),
    surfaces: bool,
) -> CountTable {
    traces
        .par_iter()
        .fold(CountTable::default, |t, ft| {
            count_trace(t, ft, target, range, surfaces)
        })
        .reduce(CountTable::default, CountTable::merge)
}

struct Selected {
    text: String,
    n: usize,
    enrichment: f64,
    count: GramCount,
}

fn select(table: CountTable, params: &MiningParams) -> Vec<Selected> {
    let bg = table.background();
    if bg == 0.0 {
        return Vec::new();
    }
    let passing: BTreeMap<String, (f64, GramCount)> = table
        .grams
        .into_iter()
        .filter_map(|(k, c)| {
            let enrichment = (c.flagged as f64 / c.support as f64) / bg;
            (c.support >= params.min_support
                && enrichment >= params.min_enrichment
                && enrichment > 0.0)
                .then_some((k, (enrichment, c)))
        })
        .collect();

    let mut out: Vec<Selected> = passing
        .iter()
        .filter(|(text, (enrichment, _))| {
            let words: Vec<&str> = text.split(' ').collect();
            let n = words.len();
            let dominated = (1..n).any(|len| {
                (0..=n - len).any(|start| {
                    let sub = words[start..start + len].join(" ");
                    passing.get(&sub).is_some_and(|(e, _)| e >= enrichment)
                })
            });
            !dominated
        })
        .map(|(text, (enrichment, c))| Selected {
            text: text.clone(),
            n: text.split(' ').count(),
            enrichment: *enrichment,
            count: c.clone(),
        })
        .collect();
    out.sort_by(|a, b| {
        b.enrichment
            .total_cmp(&a.enrichment)
            .then_with(|| a.text.cmp(&b.text))
    });
    out
}

fn background_of(traces: &[FlaggedTrace<'_>], target: StepFlag) -> f64 {
    count_all(traces, target, (1, 1), false).background()
}

/// Pause phrases: n-grams enriched at presence-sensitive steps.
pub fn mine_pause_phrases(
    traces: &[FlaggedTrace<'_>],
    params: &MiningParams,
) -> Result<Vec<PausePhrase>, MinerError> {
    params.check_range(params.pause_n)?;
    if traces.is_empty() {
        warn!("empty corpus: pause vocabulary will contain seed markers only");
        return Ok(Vec::new());
    }
    let table = count_all(traces, StepFlag::PresenceSensitive, params.pause_n, false);
    if table.flagged_endpoints == 0 {
        warn!("no presence-sensitive steps: pause vocabulary will contain seed markers only");
    }
    Ok(select(table, params)
        .into_iter()
        .map(|s| PausePhrase {
            text: s.text,
            n: s.n,
            enrichment: s.enrichment,
            support: s.count.support,
            flagged: s.count.flagged,
        })
        .collect())
}

fn injection_form(surface: &str) -> String {
    let trimmed = surface.trim_start_matches(|c: char| !c.is_alphanumeric());
    let mut chars = trimmed.chars();
    let mut out: String = match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    };
    out.push(' ');
    out
}

/// Lookback templates: n-grams enriched at content-grounded steps of traces
/// labeled correct.
pub fn mine_lookback_templates(
    traces: &[FlaggedTrace<'_>],
    params: &MiningParams,
) -> Result<Vec<LookbackTemplate>, MinerError> {
    params.check_range(params.template_n)?;
    let correct: Vec<FlaggedTrace<'_>> = traces
        .iter()
        .filter(|t| t.trace.correct == Some(true))
        .copied()
        .collect();
    if correct.is_empty() {
        return Err(MinerError::NoCorrectTraces);
    }
    let table = count_all(&correct, StepFlag::ContentGrounded, params.template_n, true);
    if table.flagged_endpoints == 0 {
        warn!("no content-grounded steps in correct traces: no templates mined");
    }
    Ok(select(table, params)
        .into_iter()
        .map(|s| {
            // Most frequent surface form; ties go to the lexicographically
            // smallest for determinism.
            let surface = s
                .count
                .surfaces
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
                .map(|(k, _)| k.clone())
                .unwrap_or_else(|| s.text.clone());
            LookbackTemplate {
                injection_text: injection_form(&surface),
                text: s.text,
                enrichment: s.enrichment,
                support: s.count.support,
                flagged: s.count.flagged,
            }
        })
        .collect())
}

/// Runs both miners and assembles a vocabulary with provenance.
pub fn mine_vocabulary(
    traces: &[FlaggedTrace<'_>],
    params: &MiningParams,
    mut provenance: Provenance,
) -> Result<PhraseVocabulary, MinerError> {
    let pause = mine_pause_phrases(traces, params)?;
    let templates = mine_lookback_templates(traces, params)?;
    provenance.params = Some(params.clone());
    provenance.presence_background = Some(background_of(traces, StepFlag::PresenceSensitive));
    let correct: Vec<_> = traces
        .iter()
        .filter(|t| t.trace.correct == Some(true))
        .copied()
        .collect();
    provenance.grounded_background = Some(background_of(&correct, StepFlag::ContentGrounded));
    let mut vocab = PhraseVocabulary::new(pause, templates, params.effective_seeds());
    vocab.provenance = provenance;
    Ok(vocab)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseAlignment {
    pub text: String,
    pub occurrences: usize,
    pub aligned: usize,
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub rate: f64,
    pub aligned: usize,
    pub occurrences: usize,
    pub per_phrase: Vec<PhraseAlignment>,
}

/// Fraction of mined pause-phrase occurrences whose endpoint lands on a
/// presence-sensitive step. Seed markers are not mined and are left out.
pub fn alignment_rate(
    vocab: &PhraseVocabulary,
    traces: &[FlaggedTrace<'_>],
) -> Result<AlignmentReport, MinerError> {
    if vocab.pause_phrases.is_empty() {
        return Err(MinerError::UndefinedRate(
            "vocabulary has no mined pause phrases".into(),
        ));
    }
    let mut per: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for p in &vocab.pause_phrases {
        per.entry(p.text.as_str()).or_default();
    }
    let max_n = vocab
        .pause_phrases
        .iter()
        .map(|p| p.text.split(' ').count())
        .max()
        .unwrap_or(1);
    for ft in traces {
        for run in ft.eligible_runs() {
            for (j, end) in run.iter().enumerate() {
                let hit = ft.flags[end.end_step] == StepFlag::PresenceSensitive;
                for n in 1..=max_n.min(j + 1) {
                    let key = run[j + 1 - n..=j]
                        .iter()
                        .map(|w| w.word.as_str())
                        .collect::<Vec<_>>()
                        .join(" ");
                    if let Some(e) = per.get_mut(key.as_str()) {
                        e.0 += 1;
                        e.1 += hit as usize;
                    }
                }
            }
        }
    }
    let mut per_phrase = Vec::new();
    let (mut occurrences, mut aligned) = (0, 0);
    for p in &vocab.pause_phrases {
        let (occ, al) = per[p.text.as_str()];
        if occ == 0 {
            warn!(
                "phrase {:?} never occurs; excluded from the alignment denominator",
                p.text
            );
        }
        occurrences += occ;
        aligned += al;
        per_phrase.push(PhraseAlignment {
            text: p.text.clone(),
            occurrences: occ,
            aligned: al,
            rate: (occ > 0).then(|| al as f64 / occ as f64),
        });
    }
    if occurrences == 0 {
        return Err(MinerError::UndefinedRate(
            "no vocabulary phrase occurs in the corpus".into(),
        ));
    }
    Ok(AlignmentReport {
        rate: aligned as f64 / occurrences as f64,
        aligned,
        occurrences,
        per_phrase,
    })
}
