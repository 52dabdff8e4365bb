//! Multi-pass evaluation: pass@k, category z-scores, token footprints, the
//! method comparison report and answer judging.

mod footprint;
mod judge;
mod passk;
mod report;
mod zscore;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::probe::Difficulty;

pub use footprint::{
    five_number_summary, token_footprint, FiveNumber, FootprintGroup, FootprintReport, TokenMetric,
};
pub use judge::{normalize_answer, AnswerJudge};
pub use passk::{mean_pass_at_k, pass_at_k};
pub use report::{
    comparison_report, render_cell, ComparisonCell, ComparisonReport, MinusStyle, Pass1Mode,
    ReportRow, OVERALL,
};
pub use zscore::{category_zscores, mean_accuracy_matrix, AccuracyMatrix, ZScores};

/// Outcome of one decoding pass on one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    #[serde(default)]
    pub category: String,
    #[serde(default)]
    pub difficulty: Difficulty,
    pub pass_index: u32,
    pub correct: bool,
    pub total_tokens: u64,
    pub thinking_tokens: u64,
    pub method_id: String,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.thinking_tokens > self.total_tokens {
            return Err(EvalError::Invalid(format!(
                "{}#{}: thinking_tokens {} exceeds total_tokens {}",
                self.question_id, self.pass_index, self.thinking_tokens, self.total_tokens
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error(
        "question coverage differs: {} only in ours {:?}, {} only in original {:?}",
        only_ours.len(), only_ours, only_original.len(), only_original
    )]
    Coverage {
        only_ours: Vec<String>,
        only_original: Vec<String>,
    },
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error("no records")]
    Empty,
}
