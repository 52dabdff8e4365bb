//! Seeded fixtures shared by the benchmarks.

use lookback_core::probe::StepFlag;
use lookback_core::{Phase, ProbeRecord, ScoreResponse, ThinkingTrace, TokenLogprob, TraceToken};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "the",
    "value",
    "of",
    "so",
    "then",
    "hmm",
    "wait",
    "let",
    "me",
    "reconsider",
    "area",
    "angle",
    "total",
    "looking",
    "back",
    "at",
    "image",
    "which",
    "means",
    "option",
];

/// Token texts of a thinking stream, one word per token.
pub fn token_stream(len: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| format!(" {}", WORDS[rng.random_range(0..WORDS.len())]))
        .collect()
}

pub fn trace(question: usize, texts: &[String], correct: bool) -> ThinkingTrace {
    ThinkingTrace {
        question_id: format!("q{question:04}"),
        pass_index: 0,
        tokens: texts
            .iter()
            .map(|t| TraceToken {
                text: t.clone(),
                logprob: -0.5,
                phase: Phase::Thinking,
                injected: false,
            })
            .collect(),
        correct: Some(correct),
        model_id: "bench".into(),
        category: "Math".into(),
        difficulty: Default::default(),
    }
}

/// `traces` traces of `len` tokens with about 2% of steps flagged.
pub fn flagged_corpus(
    traces: usize,
    len: usize,
    seed: u64,
) -> (Vec<ThinkingTrace>, Vec<Vec<StepFlag>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..traces)
        .map(|i| {
            let t = trace(i, &token_stream(len, seed ^ i as u64), i % 2 == 0);
            let f = (0..len)
                .map(|_| match rng.random_range(0..100) {
                    0 => StepFlag::PresenceSensitive,
                    1 => StepFlag::ContentGrounded,
                    _ => StepFlag::Neutral,
                })
                .collect();
            (t, f)
        })
        .unzip()
}

/// Random teacher-forced scores for `len` tokens.
pub fn scores(len: usize, rng: &mut ChaCha8Rng) -> ScoreResponse {
    ScoreResponse {
        token_logprobs: (0..len)
            .map(|i| TokenLogprob {
                text: format!(" t{i}"),
                logprob: rng.random_range(-8.0..0.0),
            })
            .collect(),
        model_echo: "bench".into(),
    }
}

/// Probe records for `traces` traces of `len` steps.
pub fn probe_records(traces: usize, len: usize, seed: u64) -> Vec<ProbeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texts = token_stream(len, seed);
    (0..traces)
        .flat_map(|i| {
            let t = trace(i, &texts, i % 3 != 0);
            let (r, n, a) = (
                scores(len, &mut rng),
                scores(len, &mut rng),
                scores(len, &mut rng),
            );
            lookback_core::probe::step_perplexities(&t, &r, &n, &a).expect("aligned scores")
        })
        .collect()
}
