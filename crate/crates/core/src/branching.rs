//! Parallel lookback sampling.
//!
//! After a lookback injection the decoder can sample `M` short continuations
//! of horizon `H`, score each by how much the real image lowers perplexity
//! relative to a noise image, and continue from the best one. Unlike the
//! plain controller this mode does issue score calls online: two per branch.

use std::thread;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    collect_stream, Backend, BackendError, GenerateRequest, ScoreRequest, StreamToken,
    VisualContext,
};
use crate::probe::perplexity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BranchingConfig {
    pub enabled: bool,
    /// Number of branches per trigger.
    #[serde(rename = "M", alias = "m")]
    pub m: usize,
    /// Horizon in tokens.
    #[serde(rename = "H", alias = "h")]
    pub h: usize,
}

impl Default for BranchingConfig {
    fn default() -> Self {
        BranchingConfig {
            enabled: false,
            m: 4,
            h: 64,
        }
    }
}

impl BranchingConfig {
    pub fn validate(&self) -> Result<(), BranchError> {
        if self.m < 2 {
            return Err(BranchError::Precondition(format!(
                "M must be >= 2, got {}",
                self.m
            )));
        }
        if self.h == 0 {
            return Err(BranchError::Precondition("H must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum BranchError {
    #[error("branching precondition: {0}")]
    Precondition(String),
    #[error("every branch failed; last error: {0}")]
    AllFailed(#[source] BackendError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub seed: u64,
    pub tokens: Vec<StreamToken>,
    /// `PPL_R - PPL_N` per branch token.
    pub delta_content: Vec<f64>,
    /// Visual helpfulness: negated mean content contrast.
    pub score: f64,
    /// The model ended the sequence before the horizon.
    pub stopped: bool,
}

impl Branch {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSet {
    /// Emitted-token index the branches start from.
    pub origin_step: usize,
    pub horizon: usize,
    pub branches: Vec<Branch>,
    /// Tokens received by branches that were later dropped.
    #[serde(default)]
    pub dropped_tokens: usize,
}

impl BranchSet {
    /// Every generated token is billed, winners and losers alike.
    pub fn billed_tokens(&self) -> usize {
        self.branches.iter().map(Branch::len).sum::<usize>() + self.dropped_tokens
    }
}

/// Negated mean of the content contrasts; averages over the actual branch
/// length so early natural stops are not penalized. Empty branches score 0.
pub fn branch_score(delta_content: &[f64]) -> f64 {
    if delta_content.is_empty() {
        return 0.0;
    }
    -delta_content.iter().sum::<f64>() / delta_content.len() as f64
}

/// Index of the highest-scoring branch; ties go to the lowest seed.
pub fn select_branch(set: &BranchSet) -> Result<usize, BranchError> {
    // Adding +0.0 maps -0.0 to +0.0 so signed zeros tie.
    set.branches
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| {
            (a.score + 0.0)
                .total_cmp(&(b.score + 0.0))
                .then_with(|| b.seed.cmp(&a.seed))
        })
        .map(|(i, _)| i)
        .ok_or_else(|| BranchError::Precondition("empty branch set".into()))
}

fn run_branch<B: Backend + ?Sized>(
    backend: &B,
    base: &GenerateRequest,
    seed: u64,
    horizon: usize,
    noise: &VisualContext,
) -> Result<Branch, (BackendError, usize)> {
    let mut req = base.clone();
    req.sampling.seed = seed;
    req.sampling.max_new_tokens = horizon;
    let stream = backend.generate_stream(&req).map_err(|e| (e, 0))?;
    let (tokens, truncated) = collect_stream(stream).map_err(|e| {
        let got = match &e {
            BackendError::Stream { received, .. } => received.len(),
            _ => 0,
        };
        (e, got)
    })?;
    if tokens.is_empty() {
        return Ok(Branch {
            seed,
            tokens,
            delta_content: Vec::new(),
            score: 0.0,
            stopped: !truncated,
        });
    }

    // Score the branch in the context of the full prefix and keep its tail.
    let mut continuation = base.prefix.clone();
    continuation.extend(tokens.iter().map(|t| t.text.clone()));
    let score_with = |context: &VisualContext| {
        backend.score(&ScoreRequest {
            model_id: base.model_id.clone(),
            question: base.question.clone(),
            context: context.clone(),
            continuation: continuation.clone(),
        })
    };
    let (real, noisy) = thread::scope(|s| {
        let n = s.spawn(|| score_with(noise));
        let r = score_with(&base.context);
        (r, n.join().expect("noise scoring thread panicked"))
    });
    let n_tok = tokens.len();
    let (real, noisy) = (
        real.map_err(|e| (e, n_tok))?,
        noisy.map_err(|e| (e, n_tok))?,
    );
    let skip = continuation.len() - n_tok;
    let delta_content: Vec<f64> = real
        .logprobs()
        .skip(skip)
        .zip(noisy.logprobs().skip(skip))
        .map(|(lr, ln)| perplexity(lr) - perplexity(ln))
        .collect();
    Ok(Branch {
        seed,
        score: branch_score(&delta_content),
        tokens,
        delta_content,
        stopped: !truncated,
    })
}

/// Samples one branch per seed from `base` (whose prefix already ends with
/// the injected template), concurrently, and scores each under the real
/// context of `base` and the `noise` context. Failed branches are dropped;
/// the call fails only when none survive.
pub fn spawn_branches<B: Backend + ?Sized>(
    backend: &B,
    base: &GenerateRequest,
    seeds: &[u64],
    horizon: usize,
    noise: &VisualContext,
) -> Result<BranchSet, BranchError> {
    if seeds.len() < 2 {
        return Err(BranchError::Precondition(format!(
            "M must be >= 2, got {}",
            seeds.len()
        )));
    }
    if horizon == 0 {
        return Err(BranchError::Precondition("H must be > 0".into()));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(BranchError::Precondition(
            "branch seeds must be distinct".into(),
        ));
    }

    let results: Vec<Result<Branch, (BackendError, usize)>> = thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| s.spawn(move || run_branch(backend, base, seed, horizon, noise)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("branch thread panicked"))
            .collect()
    });

    let mut set = BranchSet {
        origin_step: base.prefix.len(),
        horizon,
        branches: Vec::new(),
        dropped_tokens: 0,
    };
    let mut last_err = None;
    for (seed, r) in seeds.iter().zip(results) {
        match r {
            Ok(b) => set.branches.push(b),
            Err((e, received)) => {
                warn!("branch with seed {seed} dropped: {e}");
                set.dropped_tokens += received;
                last_err = Some(e);
            }
        }
    }
    if set.branches.is_empty() {
        return Err(BranchError::AllFailed(
            last_err.expect("at least one failure"),
        ));
    }
    Ok(set)
}

/// Per-trigger summary embedded in decode logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchLog {
    pub origin_step: usize,
    pub seeds: Vec<u64>,
    pub scores: Vec<f64>,
    pub lengths: Vec<usize>,
    pub winner_seed: u64,
    /// Tokens billed beyond the winning branch.
    pub overhead_tokens: usize,
}

impl BranchLog {
    pub fn new(set: &BranchSet, winner: usize) -> Self {
        let w = &set.branches[winner];
        BranchLog {
            origin_step: set.origin_step,
            seeds: set.branches.iter().map(|b| b.seed).collect(),
            scores: set.branches.iter().map(|b| b.score).collect(),
            lengths: set.branches.iter().map(Branch::len).collect(),
            winner_seed: w.seed,
            overhead_tokens: set.billed_tokens() - w.len(),
        }
    }
}

/// `count` distinct seeds derived from a pass seed and a trigger ordinal.
pub fn branch_seeds(pass_seed: u64, trigger: usize, count: usize) -> Vec<u64> {
    let base = splitmix64(pass_seed ^ splitmix64(trigger as u64 + 1));
    (0..count as u64).map(|m| base.wrapping_add(m)).collect()
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}
