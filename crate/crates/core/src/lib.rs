//! Uncertainty-guided lookback decoding for vision-language models.
//!
//! The crate is organised along the pipeline it implements:
//!
//! * [`backend`] talks to a log-prob capable generation server (or the
//!   in-process [`backend::mock`] used by tests and dry runs).
//! * [`probe`] scores traces under a real image, a matched noise image and no
//!   image, and derives the content / presence perplexity contrasts.
//! * [`miner`] turns flagged probe steps into a pause-phrase vocabulary and a
//!   set of lookback templates.
//! * [`controller`] is the online streaming decoder that injects lookback
//!   templates after pause phrases.
//! * [`branching`] samples several short continuations after an injection and
//!   keeps the most visually grounded one.
//! * [`eval`] holds the multi-pass metrics: pass@k, category z-scores, token
//!   footprints and the comparison report.

pub mod backend;
pub mod branching;
pub mod controller;
pub mod eval;
pub mod miner;
pub mod probe;
pub mod text;

pub use backend::{
    Backend, BackendError, ContextKind, GenerateRequest, ImagePayload, Sampling, ScoreRequest,
    ScoreResponse, StreamEvent, StreamToken, TokenLogprob, VisualContext,
};
pub use branching::{Branch, BranchSet, BranchingConfig};
pub use controller::{ControllerConfig, DecodeSession, TemplatePolicy};
pub use eval::EvalRecord;
pub use miner::PhraseVocabulary;
pub use probe::{Difficulty, Phase, ProbeRecord, ThinkingTrace, TraceToken};
