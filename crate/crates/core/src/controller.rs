//! Lookback-when-uncertain streaming controller.
//!
//! The controller watches the generated stream word by word. When the recent
//! words end with a pause phrase, the model is still thinking, no lookback
//! fired within the cooldown window and the per-pass cap is not reached, it
//! appends a lookback template to the prefix and restarts generation from the
//! extended prefix. Plain decoding never calls the scoring endpoint.

use std::collections::HashSet;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    Backend, BackendError, GenerateRequest, Sampling, StreamEvent, VisualContext,
};
use crate::branching::{branch_seeds, select_branch, spawn_branches, BranchLog, BranchingConfig};
use crate::miner::{LookbackTemplate, PhraseVocabulary};
use crate::probe::{Phase, TraceToken};
use crate::text::{normalize_phrase, RollingWords};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplatePolicy {
    #[default]
    RoundRobin,
    TopEnrichment,
    SeededRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    /// Words of recent context searched for a pause phrase.
    pub suffix_len: usize,
    /// Thinking tokens that must pass after an injection before the next.
    pub cooldown_window: usize,
    pub max_injections: usize,
    pub template_policy: TemplatePolicy,
    pub answer_markers: Vec<String>,
    pub think_close_marker: String,
    /// Inject the built-in template when the vocabulary has none.
    pub fallback_template: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            suffix_len: 8,
            cooldown_window: 128,
            max_injections: 8,
            template_policy: TemplatePolicy::RoundRobin,
            answer_markers: vec!["Final Answer".into(), "\\boxed{".into()],
            think_close_marker: "</think>".into(),
            fallback_template: true,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.suffix_len == 0 {
            return Err(ControllerError::Config("suffix_len must be > 0".into()));
        }
        if self.cooldown_window == 0 {
            return Err(ControllerError::Config(
                "cooldown_window must be > 0".into(),
            ));
        }
        if self.cooldown_window < self.suffix_len {
            return Err(ControllerError::Config(format!(
                "cooldown_window ({}) must be >= suffix_len ({})",
                self.cooldown_window, self.suffix_len
            )));
        }
        if self.think_close_marker.is_empty() && self.answer_markers.iter().all(String::is_empty) {
            return Err(ControllerError::Config(
                "no answer-phase marker configured".into(),
            ));
        }
        Ok(())
    }

    fn markers(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.think_close_marker.as_str())
            .chain(self.answer_markers.iter().map(String::as_str))
            .filter(|m| !m.is_empty())
    }
}

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("controller configuration: {0}")]
    Config(String),
}

/// Longest-suffix matcher over a fixed phrase set.
#[derive(Debug, Clone)]
pub struct PauseMatcher {
    phrases: HashSet<String>,
    lengths: Vec<usize>,
}

impl PauseMatcher {
    pub fn new<S: AsRef<str>>(phrases: &[S], suffix_len: usize) -> Self {
        let mut set = HashSet::new();
        for p in phrases {
            let p = normalize_phrase(p.as_ref());
            if p.is_empty() {
                continue;
            }
            let n = p.split(' ').count();
            if n > suffix_len {
                warn!("pause phrase {p:?} has {n} words but suffix_len is {suffix_len}; it can never match");
            }
            set.insert(p);
        }
        let mut lengths: Vec<usize> = set.iter().map(|p| p.split(' ').count()).collect();
        lengths.sort_unstable_by(|a, b| b.cmp(a));
        lengths.dedup();
        PauseMatcher {
            phrases: set,
            lengths,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    /// The longest phrase that is a word-level suffix of `words`.
    pub fn longest_suffix_match(&self, words: &[String]) -> Option<String> {
        self.lengths
            .iter()
            .filter(|&&n| n <= words.len())
            .find_map(|&n| {
                let candidate = words[words.len() - n..].join(" ");
                self.phrases.contains(&candidate).then_some(candidate)
            })
    }
}

/// Chooses which template to inject.
#[derive(Debug, Clone)]
pub struct TemplateSelector {
    policy: TemplatePolicy,
    templates: Vec<LookbackTemplate>,
    next: usize,
    rng: ChaCha8Rng,
}

impl TemplateSelector {
    pub fn new(
        policy: TemplatePolicy,
        templates: Vec<LookbackTemplate>,
        seed: u64,
    ) -> Result<Self, ControllerError> {
        if templates.is_empty() {
            return Err(ControllerError::Config(
                "no lookback templates: mine some or enable the fallback template".into(),
            ));
        }
        Ok(TemplateSelector {
            policy,
            templates,
            next: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn choose(&mut self) -> &LookbackTemplate {
        let i = match self.policy {
            TemplatePolicy::RoundRobin => {
                let i = self.next % self.templates.len();
                self.next += 1;
                i
            }
            TemplatePolicy::TopEnrichment => {
                // First maximum in list order.
                let mut best = 0;
                for (i, t) in self.templates.iter().enumerate() {
                    if t.enrichment > self.templates[best].enrichment {
                        best = i;
                    }
                }
                best
            }
            TemplatePolicy::SeededRandom => self.rng.random_range(0..self.templates.len()),
        };
        &self.templates[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    /// Index of the injected element in the emitted sequence.
    pub position: usize,
    /// Sampled thinking tokens emitted before the injection.
    pub thinking_tokens_before: usize,
    pub template: String,
    pub trigger_phrase: String,
}

/// Serializable summary of a decode pass.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DecodeLog {
    pub injections: Vec<Injection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub branching: Vec<BranchLog>,
    pub budget_used: usize,
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Mutable state of one streaming pass.
#[derive(Debug, Clone)]
pub struct DecodeSession {
    pub emitted: Vec<TraceToken>,
    rolling: RollingWords,
    /// Thinking tokens since the last injection; `None` before the first.
    pub tokens_since_trigger: Option<usize>,
    pub in_answer_phase: bool,
    pub injections: Vec<Injection>,
    pub branching: Vec<BranchLog>,
    /// Sampled tokens billed to the budget, including discarded branches.
    pub budget_used: usize,
    pub truncated: bool,
    thinking_tokens: usize,
    tail: String,
    tail_keep: usize,
    markers: Vec<String>,
}

impl DecodeSession {
    pub fn new(config: &ControllerConfig) -> Self {
        let markers: Vec<String> = config.markers().map(str::to_string).collect();
        let tail_keep = markers.iter().map(|m| m.chars().count()).max().unwrap_or(1);
        let mut s = DecodeSession {
            emitted: Vec::new(),
            rolling: RollingWords::new(config.suffix_len),
            tokens_since_trigger: None,
            in_answer_phase: false,
            injections: Vec::new(),
            branching: Vec::new(),
            budget_used: 0,
            truncated: false,
            thinking_tokens: 0,
            tail: String::new(),
            tail_keep,
            markers,
        };
        s.in_answer_phase = s.markers.is_empty();
        s
    }

    /// The last `suffix_len` words, the word in progress included.
    pub fn rolling_suffix(&self) -> Vec<String> {
        self.rolling.words()
    }

    /// Sampled thinking tokens so far.
    pub fn thinking_tokens(&self) -> usize {
        self.thinking_tokens
    }

    /// Token texts to send as the next generation prefix.
    pub fn prefix(&self) -> Vec<String> {
        self.emitted.iter().map(|t| t.text.clone()).collect()
    }

    /// Appends a sampled token, updating phase, suffix and counters.
    /// `billed` is false for tokens already charged (winning branches).
    pub fn push_generated(&mut self, text: &str, logprob: f64, billed: bool) {
        if !self.in_answer_phase {
            self.tail.push_str(text);
            if self.markers.iter().any(|m| self.tail.contains(m.as_str())) {
                self.in_answer_phase = true;
            } else {
                let n = self.tail.chars().count();
                if n > self.tail_keep {
                    let cut = self
                        .tail
                        .char_indices()
                        .nth(n - self.tail_keep)
                        .map(|(i, _)| i)
                        .unwrap_or(0);
                    self.tail.drain(..cut);
                }
            }
        }
        let phase = if self.in_answer_phase {
            Phase::Answer
        } else {
            Phase::Thinking
        };
        if phase == Phase::Thinking {
            self.thinking_tokens += 1;
            if let Some(n) = self.tokens_since_trigger.as_mut() {
                *n += 1;
            }
        }
        self.rolling.push(text);
        if billed {
            self.budget_used += 1;
        }
        self.emitted.push(TraceToken {
            text: text.to_string(),
            logprob,
            phase,
            injected: false,
        });
    }

    /// Appends `template` as forced text right after the current token.
    pub fn inject(&mut self, template: &LookbackTemplate, trigger_phrase: &str) {
        let needs_space = self
            .emitted
            .last()
            .is_some_and(|t| !t.text.ends_with(char::is_whitespace))
            && !template.injection_text.starts_with(char::is_whitespace);
        let text = if needs_space {
            format!(" {}", template.injection_text)
        } else {
            template.injection_text.clone()
        };
        self.injections.push(Injection {
            position: self.emitted.len(),
            thinking_tokens_before: self.thinking_tokens,
            template: template.injection_text.clone(),
            trigger_phrase: trigger_phrase.to_string(),
        });
        // Forced text is not sampled, not billed and not matched against.
        self.rolling = RollingWords::new(self.rolling_capacity());
        self.tail.clear();
        self.tokens_since_trigger = Some(0);
        self.emitted.push(TraceToken {
            text,
            logprob: 0.0,
            phase: Phase::Thinking,
            injected: true,
        });
    }

    fn rolling_capacity(&self) -> usize {
        self.rolling.capacity()
    }

    pub fn log(&self) -> DecodeLog {
        DecodeLog {
            injections: self.injections.clone(),
            branching: self.branching.clone(),
            budget_used: self.budget_used,
            truncated: self.truncated,
            error: None,
        }
    }
}

/// The pause phrase to react to after the latest token, if a lookback is
/// allowed now.
pub fn should_trigger(
    session: &DecodeSession,
    matcher: &PauseMatcher,
    config: &ControllerConfig,
) -> Option<String> {
    if session.in_answer_phase || session.injections.len() >= config.max_injections {
        return None;
    }
    if session
        .tokens_since_trigger
        .is_some_and(|n| n <= config.cooldown_window)
    {
        return None;
    }
    matcher.longest_suffix_match(&session.rolling_suffix())
}

/// What to decode.
#[derive(Debug, Clone)]
pub struct DecodeRequest {
    pub model_id: String,
    pub question: String,
    pub context: VisualContext,
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    /// Token budget for the whole pass.
    pub budget: usize,
}

/// Optional branch search after each injection.
#[derive(Debug, Clone, Copy)]
pub struct BranchSearch<'a> {
    pub config: BranchingConfig,
    /// Noise image matched to the request context.
    pub noise: &'a VisualContext,
}

#[derive(Debug)]
pub struct DecodeOutcome {
    pub session: DecodeSession,
    /// Set when the backend failed mid-pass; `session` then holds the
    /// partial trace.
    pub error: Option<BackendError>,
}

impl DecodeOutcome {
    pub fn tokens(&self) -> &[TraceToken] {
        &self.session.emitted
    }

    pub fn log(&self) -> DecodeLog {
        let mut log = self.session.log();
        log.error = self.error.as_ref().map(|e| e.to_string());
        log
    }
}

enum StreamEnd {
    Finished,
    Restart,
    Failed(BackendError),
}

/// Streams one pass, injecting lookback templates on pause phrases.
pub fn run_decode<B: Backend + ?Sized>(
    backend: &B,
    request: &DecodeRequest,
    vocab: &PhraseVocabulary,
    config: &ControllerConfig,
    branch: Option<BranchSearch<'_>>,
) -> Result<DecodeOutcome, ControllerError> {
    config.validate()?;
    if let Some(b) = &branch {
        b.config
            .validate()
            .map_err(|e| ControllerError::Config(e.to_string()))?;
    }
    let matcher = PauseMatcher::new(&vocab.trigger_phrases(), config.suffix_len);
    let mut selector = TemplateSelector::new(
        config.template_policy,
        vocab.effective_templates(config.fallback_template),
        request.seed,
    )?;
    let mut session = DecodeSession::new(config);

    loop {
        let remaining = request.budget.saturating_sub(session.budget_used);
        if remaining == 0 {
            session.truncated = true;
            break;
        }
        let gen = GenerateRequest {
            model_id: request.model_id.clone(),
            question: request.question.clone(),
            context: request.context.clone(),
            prefix: session.prefix(),
            sampling: Sampling {
                temperature: request.temperature,
                top_p: request.top_p,
                seed: request.seed,
                max_new_tokens: remaining,
            },
        };
        let stream = match backend.generate_stream(&gen) {
            Ok(s) => s,
            Err(e) => {
                return Ok(DecodeOutcome {
                    session,
                    error: Some(e),
                })
            }
        };
        let mut end = StreamEnd::Failed(BackendError::Protocol(
            "stream ended without a terminal chunk".into(),
        ));
        for event in stream {
            match event {
                Ok(StreamEvent::Token(t)) => {
                    session.push_generated(&t.text, t.logprob, true);
                    if let Some(phrase) = should_trigger(&session, &matcher, config) {
                        let template = selector.choose().clone();
                        debug!(
                            "lookback after {phrase:?} at token {}",
                            session.emitted.len()
                        );
                        session.inject(&template, &phrase);
                        end = match branch {
                            Some(b) => match branch_step(backend, request, &mut session, b) {
                                Ok(true) => StreamEnd::Finished,
                                Ok(false) => StreamEnd::Restart,
                                Err(e) => StreamEnd::Failed(e),
                            },
                            None => StreamEnd::Restart,
                        };
                        break;
                    }
                }
                Ok(StreamEvent::Done { truncated }) => {
                    session.truncated = truncated;
                    end = StreamEnd::Finished;
                    break;
                }
                Err(e) => {
                    end = StreamEnd::Failed(e);
                    break;
                }
            }
        }
        match end {
            StreamEnd::Restart => continue,
            StreamEnd::Finished => break,
            StreamEnd::Failed(e) => {
                return Ok(DecodeOutcome {
                    session,
                    error: Some(e),
                })
            }
        }
    }
    Ok(DecodeOutcome {
        session,
        error: None,
    })
}

/// Samples branches after an injection and appends the winner. Returns true
/// when the winning branch ended the sequence.
fn branch_step<B: Backend + ?Sized>(
    backend: &B,
    request: &DecodeRequest,
    session: &mut DecodeSession,
    search: BranchSearch<'_>,
) -> Result<bool, BackendError> {
    let remaining = request.budget.saturating_sub(session.budget_used);
    if remaining == 0 {
        session.truncated = true;
        return Ok(true);
    }
    let horizon = search.config.h.min(remaining);
    let seeds = branch_seeds(request.seed, session.injections.len() - 1, search.config.m);
    let base = GenerateRequest {
        model_id: request.model_id.clone(),
        question: request.question.clone(),
        context: request.context.clone(),
        prefix: session.prefix(),
        sampling: Sampling {
            temperature: request.temperature,
            top_p: request.top_p,
            seed: request.seed,
            max_new_tokens: horizon,
        },
    };
    let set = match spawn_branches(backend, &base, &seeds, horizon, search.noise) {
        Ok(set) => set,
        Err(crate::branching::BranchError::AllFailed(e)) => return Err(e),
        Err(e) => return Err(BackendError::Precondition(e.to_string())),
    };
    let winner = select_branch(&set).expect("non-empty branch set");
    session.budget_used += set.billed_tokens();
    session.branching.push(BranchLog::new(&set, winner));
    let w = &set.branches[winner];
    for t in &w.tokens {
        session.push_generated(&t.text, t.logprob, false);
    }
    if w.stopped {
        return Ok(true);
    }
    if session.budget_used >= request.budget {
        session.truncated = true;
        return Ok(true);
    }
    Ok(false)
}
