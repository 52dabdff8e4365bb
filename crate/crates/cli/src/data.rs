//! On-disk record shapes shared by the subcommands.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use lookback_core::backend::{ContextKind, VisualContext};
use lookback_core::controller::DecodeLog;
use lookback_core::{Difficulty, EvalRecord, ProbeRecord, ThinkingTrace};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::store::{read_jsonl, write_atomic};

/// One benchmark item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    /// Image path, relative to the questions file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default)]
    pub category: String,
    #[serde(default)]
    pub difficulty: Difficulty,
}

pub fn load_questions(path: &Path) -> CliResult<Vec<Question>> {
    let mut qs: Vec<Question> = read_jsonl(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = BTreeSet::new();
    for q in &mut qs {
        if !seen.insert(q.id.clone()) {
            return Err(CliError::Config(format!(
                "duplicate question id {:?} in {}",
                q.id,
                path.display()
            )));
        }
        if let Some(img) = &mut q.image {
            if img.is_relative() {
                *img = base.join(&*img);
            }
        }
    }
    Ok(qs)
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        _ => "image/png",
    }
}

/// The real-image context of a question, or why it is unavailable.
pub fn load_context(q: &Question) -> Result<VisualContext, String> {
    let path = q
        .image
        .as_ref()
        .ok_or_else(|| "question has no image".to_string())?;
    let bytes =
        std::fs::read(path).map_err(|e| format!("cannot read image {}: {e}", path.display()))?;
    VisualContext::real(bytes, mime_for(path)).map_err(|e| e.to_string())
}

/// A decoded (or externally supplied) trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub method_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub trace: ThinkingTrace,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode: Option<DecodeLog>,
}

/// Teacher-forced log-probs of one trace under one context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub config_hash: String,
    pub trace: String,
    pub context: ContextKind,
    pub logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeLine {
    pub config_hash: String,
    #[serde(flatten)]
    pub record: ProbeRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLine {
    /// Hash of the configuration that produced the underlying trace.
    pub config_hash: String,
    #[serde(flatten)]
    pub record: EvalRecord,
}

/// Path of the metadata file written next to a CSV output.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes the provenance sidecar of a CSV output.
pub fn write_meta(path: &Path, config_hash: &str, extra: serde_json::Value) -> CliResult<()> {
    let mut meta = serde_json::json!({
        "config_hash": config_hash,
        "file": path.file_name().map(|f| f.to_string_lossy().into_owned()),
    });
    if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
        m.extend(e);
    }
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    write_atomic(&meta_path(path), text.as_bytes())
}

/// Trace reduced to its thinking segment, which is what the probe scores.
pub fn thinking_prefix(trace: &ThinkingTrace) -> ThinkingTrace {
    let mut t = trace.clone();
    let n = t
        .tokens
        .iter()
        .position(|tok| tok.phase == lookback_core::Phase::Answer)
        .unwrap_or(t.tokens.len());
    t.tokens.truncate(n);
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use lookback_core::{Phase, TraceToken};

    #[test]
    fn trace_line_round_trips_flattened() {
        let line = TraceLine {
            config_hash: "h".into(),
            method_id: "ours".into(),
            seed: Some(3),
            trace: ThinkingTrace {
                question_id: "q1".into(),
                pass_index: 2,
                tokens: vec![TraceToken {
                    text: " x".into(),
                    logprob: -0.1,
                    phase: Phase::Thinking,
                    injected: false,
                }],
                correct: Some(true),
                model_id: "m".into(),
                category: "Art".into(),
                difficulty: Difficulty::Hard,
            },
            answer: Some("B".into()),
            decode: Some(DecodeLog::default()),
        };
        let json = serde_json::to_string(&line).unwrap();
        assert!(json.contains("\"question_id\":\"q1\""));
        assert!(!json.contains("branching"));
        let back: TraceLine = serde_json::from_str(&json).unwrap();
        assert_eq!(back, line);
    }

    #[test]
    fn external_traces_need_only_trace_fields() {
        let t: TraceLine = serde_json::from_str(
            r#"{"question_id":"q","pass_index":0,"model_id":"m","tokens":[{"text":"a","logprob":-1.0,"phase":"thinking"}]}"#,
        )
        .unwrap();
        assert!(t.config_hash.is_empty() && t.decode.is_none());
    }
}
