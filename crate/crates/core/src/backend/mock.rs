//! Deterministic in-process backends.
//!
//! [`MockBackend`] wraps a [`MockModel`] and records every call, so tests can
//! assert exact call counts (for example that plain controller decoding never
//! scores). Responses depend only on the request, never on call order.
//!
//! Two models are provided: [`ScriptedModel`], a hand-written token script
//! with a log-prob table, and [`SyntheticModel`], a seeded text generator used
//! for dry runs of the whole pipeline.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    Backend, BackendError, ContextKind, GenerateRequest, ScoreRequest, ScoreResponse, StreamEvent,
    StreamToken, TokenLogprob, TokenStream, VisualContext,
};
use crate::text::normalize_word;

/// Behaviour behind a [`MockBackend`].
pub trait MockModel: Send + Sync {
    /// Everything the model would emit after `req.prefix`, ignoring the
    /// token budget.
    fn continuation(&self, req: &GenerateRequest) -> Vec<(String, f64)>;

    /// One log-prob per continuation element.
    fn score(&self, req: &ScoreRequest) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallKind {
    Score,
    Generate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CallRecord {
    pub kind: CallKind,
    pub context: ContextKind,
    pub question: String,
    pub seed: Option<u64>,
    /// Continuation length for scores, prefix length for generations.
    pub tokens: usize,
    /// Hash of the whole request, so equal requests can be told apart from
    /// requests that merely share the fields above.
    pub fingerprint: u64,
}

#[derive(Debug, Default)]
struct Faults {
    fail_after_calls: Option<usize>,
    disconnect_after_tokens: Option<usize>,
}

pub struct MockBackend {
    model: Arc<dyn MockModel>,
    model_id: String,
    calls: Mutex<Vec<CallRecord>>,
    served: AtomicUsize,
    faults: Mutex<Faults>,
}

impl MockBackend {
    pub fn new(model: impl MockModel + 'static) -> Self {
        MockBackend {
            model: Arc::new(model),
            model_id: "mock".to_string(),
            calls: Mutex::new(Vec::new()),
            served: AtomicUsize::new(0),
            faults: Mutex::new(Faults::default()),
        }
    }

    pub fn with_model_id(mut self, id: impl Into<String>) -> Self {
        self.model_id = id.into();
        self
    }

    /// After `n` successful calls every further call fails with a transport
    /// error. Used to simulate a backend dying mid-job.
    pub fn fail_after_calls(&self, n: usize) {
        self.faults.lock().unwrap().fail_after_calls = Some(n);
    }

    /// Streams break with a disconnect after `n` tokens.
    pub fn disconnect_after_tokens(&self, n: usize) {
        self.faults.lock().unwrap().disconnect_after_tokens = Some(n);
    }

    pub fn clear_faults(&self) {
        *self.faults.lock().unwrap() = Faults::default();
    }

    pub fn call_log(&self) -> Vec<CallRecord> {
        self.calls.lock().unwrap().clone()
    }

    pub fn score_calls(&self) -> usize {
        self.count(CallKind::Score)
    }

    pub fn generate_calls(&self) -> usize {
        self.count(CallKind::Generate)
    }

    pub fn reset_log(&self) {
        self.calls.lock().unwrap().clear();
    }

    fn count(&self, kind: CallKind) -> usize {
        self.calls
            .lock()
            .unwrap()
            .iter()
            .filter(|c| c.kind == kind)
            .count()
    }

    fn admit(&self, record: CallRecord) -> Result<(), BackendError> {
        if let Some(limit) = self.faults.lock().unwrap().fail_after_calls {
            if self.served.load(Ordering::SeqCst) >= limit {
                return Err(BackendError::Transport {
                    attempts: 1,
                    message: "mock backend is down".into(),
                });
            }
        }
        self.served.fetch_add(1, Ordering::SeqCst);
        self.calls.lock().unwrap().push(record);
        Ok(())
    }
}

impl Backend for MockBackend {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        req.validate()?;
        self.admit(CallRecord {
            kind: CallKind::Score,
            context: req.context.kind(),
            question: req.question.clone(),
            seed: None,
            tokens: req.continuation.len(),
            fingerprint: fingerprint(
                "score",
                req.model_id.as_str(),
                &req.question,
                &req.context,
                &req.continuation,
                &[],
            ),
        })?;
        let lps = self.model.score(req);
        let resp = ScoreResponse {
            token_logprobs: lps
                .iter()
                .enumerate()
                .map(|(i, &logprob)| TokenLogprob {
                    text: req.continuation.get(i).cloned().unwrap_or_default(),
                    logprob,
                })
                .collect(),
            model_echo: self.model_id.clone(),
        };
        resp.check_against(req)?;
        Ok(resp)
    }

    fn generate_stream(&self, req: &GenerateRequest) -> Result<TokenStream<'_>, BackendError> {
        req.validate()?;
        self.admit(CallRecord {
            kind: CallKind::Generate,
            context: req.context.kind(),
            question: req.question.clone(),
            seed: Some(req.sampling.seed),
            tokens: req.prefix.len(),
            fingerprint: fingerprint(
                "generate",
                &req.model_id,
                &req.question,
                &req.context,
                &req.prefix,
                &[
                    req.sampling.seed,
                    req.sampling.max_new_tokens as u64,
                    req.sampling.temperature.to_bits(),
                    req.sampling.top_p.to_bits(),
                ],
            ),
        })?;
        let tokens = self.model.continuation(req);
        let max = req.sampling.max_new_tokens;
        let truncated = tokens.len() > max;
        let disconnect = self.faults.lock().unwrap().disconnect_after_tokens;
        let mut received: Vec<StreamToken> = Vec::new();
        let mut events: Vec<Result<StreamEvent, BackendError>> = Vec::new();
        for (i, (text, logprob)) in tokens.into_iter().take(max).enumerate() {
            if disconnect == Some(i) {
                events.push(Err(BackendError::Stream {
                    received: received.clone(),
                    message: "mock disconnect".into(),
                }));
                return Ok(Box::new(events.into_iter()));
            }
            let t = StreamToken {
                text,
                logprob,
                index: i + 1,
            };
            received.push(t.clone());
            events.push(Ok(StreamEvent::Token(t)));
        }
        events.push(Ok(StreamEvent::Done { truncated }));
        Ok(Box::new(events.into_iter()))
    }
}

/// Number of leading script tokens already present in `prefix`, matched in
/// order while skipping prefix entries the script never produced (injected
/// text, tokens from sibling branches).
pub fn aligned_len(script: &[(String, f64)], prefix: &[String]) -> usize {
    let mut i = 0;
    for p in prefix {
        if i < script.len() && script[i].0 == *p {
            i += 1;
        }
    }
    i
}

/// Hand-written token script plus a log-prob table.
#[derive(Debug, Clone)]
pub struct ScriptedModel {
    script: Vec<(String, f64)>,
    by_seed: HashMap<u64, Vec<(String, f64)>>,
    context_tables: HashMap<ContextKind, HashMap<String, f64>>,
    table: HashMap<String, f64>,
    default_logprob: f64,
}

impl Default for ScriptedModel {
    fn default() -> Self {
        ScriptedModel {
            script: Vec::new(),
            by_seed: HashMap::new(),
            context_tables: HashMap::new(),
            table: HashMap::new(),
            default_logprob: 0.0,
        }
    }
}

impl ScriptedModel {
    pub fn new() -> Self {
        Self::default()
    }

    /// Token texts emitted for every seed without an explicit script.
    pub fn script<S: AsRef<str>>(mut self, tokens: &[S]) -> Self {
        self.script = tokens
            .iter()
            .map(|t| (t.as_ref().to_string(), -0.1))
            .collect();
        self
    }

    pub fn script_for_seed<S: AsRef<str>>(mut self, seed: u64, tokens: &[S]) -> Self {
        self.by_seed.insert(
            seed,
            tokens
                .iter()
                .map(|t| (t.as_ref().to_string(), -0.1))
                .collect(),
        );
        self
    }

    /// Log-prob returned for `text` under every context.
    pub fn logprob(mut self, text: &str, lp: f64) -> Self {
        self.table.insert(text.to_string(), lp);
        self
    }

    /// Log-prob returned for `text` under one context; overrides [`Self::logprob`].
    pub fn logprob_in(mut self, kind: ContextKind, text: &str, lp: f64) -> Self {
        self.context_tables
            .entry(kind)
            .or_default()
            .insert(text.to_string(), lp);
        self
    }

    pub fn default_logprob(mut self, lp: f64) -> Self {
        self.default_logprob = lp;
        self
    }

    fn lookup(&self, kind: ContextKind, text: &str) -> f64 {
        self.context_tables
            .get(&kind)
            .and_then(|t| t.get(text))
            .or_else(|| self.table.get(text))
            .copied()
            .unwrap_or(self.default_logprob)
    }
}

impl MockModel for ScriptedModel {
    fn continuation(&self, req: &GenerateRequest) -> Vec<(String, f64)> {
        let script = self.by_seed.get(&req.sampling.seed).unwrap_or(&self.script);
        let start = aligned_len(script, &req.prefix);
        script[start..].to_vec()
    }

    fn score(&self, req: &ScoreRequest) -> Vec<f64> {
        let kind = req.context.kind();
        req.continuation
            .iter()
            .map(|t| self.lookup(kind, t))
            .collect()
    }
}

fn fingerprint(
    kind: &str,
    model: &str,
    question: &str,
    context: &VisualContext,
    texts: &[String],
    nums: &[u64],
) -> u64 {
    let payload = context
        .payload()
        .map(|p| p.bytes.as_slice())
        .unwrap_or_default();
    let nums: Vec<u8> = nums.iter().flat_map(|n| n.to_le_bytes()).collect();
    let mut parts: Vec<&[u8]> = vec![
        kind.as_bytes(),
        model.as_bytes(),
        question.as_bytes(),
        context.kind().as_str().as_bytes(),
        payload,
        &nums,
    ];
    parts.extend(texts.iter().map(|t| t.as_bytes()));
    fnv1a(&parts)
}

/// FNV-1a, stable across platforms and releases.
pub(crate) fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

const FILLER: &[&str] = &[
    "the",
    "value",
    "of",
    "we",
    "need",
    "to",
    "compute",
    "so",
    "then",
    "this",
    "gives",
    "step",
    "check",
    "angle",
    "area",
    "total",
    "ratio",
    "first",
    "next",
    "therefore",
    "given",
    "which",
    "means",
    "is",
    "a",
    "and",
    "that",
    "it",
    "from",
    "label",
    "curve",
    "point",
    "line",
    "option",
    "table",
    "axis",
    "shows",
    "large",
    "small",
    "sum",
    "difference",
    "equal",
    "right",
    "left",
];

const LOOKBACK_PHRASE: [&str; 5] = ["looking", "back", "at", "the", "image"];

/// Seeded stand-in for a thinking-mode vision-language model.
///
/// Traces are filler reasoning sprinkled with hesitation cues ("hmm",
/// "wait", "let me reconsider") and occasional "looking back at the image"
/// sentences, followed by `</think>` and a `Final Answer: X` line. Scoring
/// makes the hesitation cues sensitive to image presence but not content,
/// and the word "image" closing a lookback sentence strongly content
/// dependent. When the prefix carries an injected lookback template the model
/// wraps up sooner and answers correctly more often.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticModel {
    pub seed: u64,
}

impl SyntheticModel {
    pub fn new(seed: u64) -> Self {
        SyntheticModel { seed }
    }

    /// The option letter this model treats as correct for `question`.
    pub fn answer_for(question: &str) -> char {
        b"ABCD"[(fnv1a(&[question.as_bytes()]) % 4) as usize] as char
    }

    fn thinking_script(&self, question: &str, seed: u64) -> Vec<(String, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&[
            question.as_bytes(),
            &seed.to_le_bytes(),
            &self.seed.to_le_bytes(),
        ]));
        let n_words = rng.random_range(40..=90);
        let mut words: Vec<&str> = Vec::new();
        while words.len() < n_words {
            let r: f64 = rng.random();
            let piece: &[&str] = if r < 0.03 {
                &["hmm"]
            } else if r < 0.055 {
                &["wait,"]
            } else if r < 0.075 {
                &["let", "me", "reconsider"]
            } else if r < 0.105 {
                &["looking", "back", "at", "the", "image,"]
            } else if r < 0.125 {
                &["glance", "back", "at", "the", "image"]
            } else if r < 0.14 {
                &["let", "me", "compute"]
            } else {
                std::slice::from_ref(&FILLER[rng.random_range(0..FILLER.len())])
            };
            words.extend_from_slice(piece);
        }
        words
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let text = if i == 0 {
                    w.to_string()
                } else {
                    format!(" {w}")
                };
                let lp = -0.2 - 0.8 * unit(fnv1a(&[w.as_bytes(), b"gen"]));
                (text, lp)
            })
            .collect()
    }

    fn answer_tokens(&self, question: &str, seed: u64, lookback: bool) -> Vec<(String, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&[
            question.as_bytes(),
            &seed.to_le_bytes(),
            &[lookback as u8],
            b"answer",
        ]));
        let p_correct = if lookback { 0.85 } else { 0.4 };
        let truth = Self::answer_for(question);
        let letter = if rng.random_bool(p_correct) {
            truth
        } else {
            let others: Vec<char> = "ABCD".chars().filter(|&c| c != truth).collect();
            others[rng.random_range(0..others.len())]
        };
        vec![
            ("</think>".to_string(), -0.05),
            (" Final".to_string(), -0.1),
            (" Answer:".to_string(), -0.05),
            (format!(" {letter}"), -0.3),
        ]
    }

    fn word_logprob(kind: ContextKind, word: Option<&str>, prev: &[String]) -> f64 {
        let Some(word) = word else {
            return -0.5;
        };
        let base = -(0.3 + 2.0 * unit(fnv1a(&[word.as_bytes()])));
        let ends_with = |tail: &[&str]| {
            prev.len() >= tail.len()
                && prev[prev.len() - tail.len()..]
                    .iter()
                    .zip(tail)
                    .all(|(a, b)| a == b)
        };
        let presence_cue =
            matches!(word, "hmm" | "wait") || (word == "reconsider" && ends_with(&["let", "me"]));
        let content_cue = word == "image" && ends_with(&LOOKBACK_PHRASE[..4]);
        match (kind, presence_cue, content_cue) {
            (ContextKind::Real, _, true) => -0.05,
            (_, _, true) => base - 3.0,
            (ContextKind::Absent, true, _) => base - 2.5,
            (_, true, _) => base,
            (ContextKind::Real, false, false) => base,
            (ContextKind::Noise, false, false) => {
                (base + 0.2 * (unit(fnv1a(&[word.as_bytes(), b"noise"])) - 0.5)).min(0.0)
            }
            (ContextKind::Absent, false, false) => {
                base - 0.2 * unit(fnv1a(&[word.as_bytes(), b"absent"]))
            }
        }
    }
}

fn carries_injected_lookback(prefix: &[String]) -> bool {
    prefix
        .iter()
        .any(|p| p.to_lowercase().contains("back at the image") && p.trim().contains(' '))
}

impl MockModel for SyntheticModel {
    fn continuation(&self, req: &GenerateRequest) -> Vec<(String, f64)> {
        let seed = req.sampling.seed;
        let mut script = self.thinking_script(&req.question, seed);
        let aligned = aligned_len(&script, &req.prefix);
        let lookback = carries_injected_lookback(&req.prefix);
        if lookback {
            script.truncate((aligned + 24).min(script.len()));
        }
        script.extend(self.answer_tokens(&req.question, seed, lookback));
        let start = aligned_len(&script, &req.prefix);
        script.split_off(start)
    }

    fn score(&self, req: &ScoreRequest) -> Vec<f64> {
        let kind = req.context.kind();
        let mut prev: Vec<String> = Vec::new();
        req.continuation
            .iter()
            .map(|elem| {
                let words: Vec<String> =
                    elem.split_whitespace().filter_map(normalize_word).collect();
                let last = words.last().map(String::as_str);
                let before = words.len().saturating_sub(1);
                let mut ctx = prev.clone();
                ctx.extend(words[..before].iter().cloned());
                let lp = Self::word_logprob(kind, last, &ctx);
                prev.extend(words);
                lp
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{collect_stream, Sampling, VisualContext};

    fn gen_req(prefix: &[&str], seed: u64, max: usize) -> GenerateRequest {
        GenerateRequest {
            model_id: "mock".into(),
            question: "q".into(),
            context: VisualContext::absent(),
            prefix: prefix.iter().map(|s| s.to_string()).collect(),
            sampling: Sampling {
                temperature: 0.7,
                top_p: 0.95,
                seed,
                max_new_tokens: max,
            },
        }
    }

    fn score_req(tokens: &[&str], kind: ContextKind) -> ScoreRequest {
        let context = match kind {
            ContextKind::Absent => VisualContext::absent(),
            _ => VisualContext::real_with_resolution(vec![0], "image/png", (1, 1)),
        };
        ScoreRequest {
            model_id: "mock".into(),
            question: "q".into(),
            context,
            continuation: tokens.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn texts(tokens: &[StreamToken]) -> Vec<&str> {
        tokens.iter().map(|t| t.text.as_str()).collect()
    }

    #[test]
    fn certainty_script_scores_zero() {
        let b = MockBackend::new(ScriptedModel::new());
        let r = b
            .score(&score_req(&["a", "b", "c"], ContextKind::Real))
            .unwrap();
        assert!(r.logprobs().all(|lp| lp == 0.0));
    }

    #[test]
    fn scripted_table_echo() {
        let b = MockBackend::new(ScriptedModel::new().logprob("cat", -2.302585));
        let r = b.score(&score_req(&["cat"], ContextKind::Real)).unwrap();
        assert_eq!(
            r.token_logprobs,
            vec![TokenLogprob {
                text: "cat".into(),
                logprob: -2.302585
            }]
        );
    }

    #[test]
    fn stream_yields_script_then_ends() {
        let b = MockBackend::new(ScriptedModel::new().script(&["A", "B", "C"]));
        let (toks, truncated) =
            collect_stream(b.generate_stream(&gen_req(&[], 1, 10)).unwrap()).unwrap();
        assert_eq!(texts(&toks), ["A", "B", "C"]);
        assert_eq!(toks.iter().map(|t| t.index).collect::<Vec<_>>(), [1, 2, 3]);
        assert!(!truncated);
    }

    #[test]
    fn stream_budget_cutoff_sets_truncation() {
        let b = MockBackend::new(ScriptedModel::new().script(&["A", "B", "C"]));
        let (toks, truncated) =
            collect_stream(b.generate_stream(&gen_req(&[], 1, 2)).unwrap()).unwrap();
        assert_eq!(texts(&toks), ["A", "B"]);
        assert!(truncated);
    }

    #[test]
    fn same_seed_same_stream() {
        let b = MockBackend::new(SyntheticModel::new(3));
        let run =
            |seed| collect_stream(b.generate_stream(&gen_req(&[], seed, 500)).unwrap()).unwrap();
        assert_eq!(run(9), run(9));
        assert_ne!(run(9).0, run(10).0);
    }

    #[test]
    fn prefix_alignment_skips_injected_text() {
        let b = MockBackend::new(ScriptedModel::new().script(&["A", "B", "C", "D"]));
        let (toks, _) = collect_stream(
            b.generate_stream(&gen_req(&["A", "B", "Look! "], 0, 10))
                .unwrap(),
        )
        .unwrap();
        assert_eq!(texts(&toks), ["C", "D"]);
    }

    #[test]
    fn call_log_and_fault_injection() {
        let b = MockBackend::new(ScriptedModel::new().script(&["A"]));
        b.score(&score_req(&["x"], ContextKind::Absent)).unwrap();
        let _ = b.generate_stream(&gen_req(&[], 0, 1)).unwrap();
        assert_eq!((b.score_calls(), b.generate_calls()), (1, 1));
        b.fail_after_calls(2);
        let err = b
            .score(&score_req(&["x"], ContextKind::Absent))
            .unwrap_err();
        assert!(err.is_retryable());
        assert_eq!(b.call_log().len(), 2);
    }

    #[test]
    fn disconnect_reports_received_tokens() {
        let b = MockBackend::new(ScriptedModel::new().script(&["A", "B", "C"]));
        b.disconnect_after_tokens(2);
        match collect_stream(b.generate_stream(&gen_req(&[], 0, 10)).unwrap()) {
            Err(BackendError::Stream { received, .. }) => assert_eq!(texts(&received), ["A", "B"]),
            other => panic!("{other:?}"),
        }
    }

    struct ShortModel;
    impl MockModel for ShortModel {
        fn continuation(&self, _: &GenerateRequest) -> Vec<(String, f64)> {
            vec![]
        }
        fn score(&self, _: &ScoreRequest) -> Vec<f64> {
            vec![-1.0]
        }
    }

    #[test]
    fn short_score_is_protocol_violation() {
        let b = MockBackend::new(ShortModel);
        let err = b
            .score(&score_req(&["a", "b"], ContextKind::Real))
            .unwrap_err();
        assert!(matches!(err, BackendError::Protocol(_)));
    }

    #[test]
    fn synthetic_cues_have_expected_signs() {
        let m = SyntheticModel::new(0);
        let toks = ["so", " hmm", " looking", " back", " at", " the", " image,"];
        let r = m.score(&score_req(&toks, ContextKind::Real));
        let n = {
            let mut req = score_req(&toks, ContextKind::Real);
            req.context = crate::backend::make_noise_context(&req.context, 0).unwrap();
            m.score(&req)
        };
        let a = m.score(&score_req(&toks, ContextKind::Absent));
        // "hmm": real == noise, absent far lower
        assert_eq!(r[1], n[1]);
        assert!(a[1] < n[1] - 2.0);
        // closing "image": real far above noise
        assert!(r[6] > n[6] + 2.5);
    }

    #[test]
    fn synthetic_lookback_shortens_and_answers() {
        let b = MockBackend::new(SyntheticModel::new(1));
        let (plain, _) =
            collect_stream(b.generate_stream(&gen_req(&[], 4, 10_000)).unwrap()).unwrap();
        assert_eq!(plain[plain.len() - 4].text, "</think>");
        let head: Vec<String> = plain[..5].iter().map(|t| t.text.clone()).collect();
        let mut prefix = head.clone();
        prefix.push("Looking back at the image, ".into());
        let mut req = gen_req(&[], 4, 10_000);
        req.prefix = prefix;
        let (rest, _) = collect_stream(b.generate_stream(&req).unwrap()).unwrap();
        assert!(rest.len() <= 24 + 4);
        assert_eq!(rest[rest.len() - 4].text, "</think>");
    }
}
