//! JSON wire messages for `POST /v1/score` and `POST /v1/generate`.
//!
//! Images travel as base64 PNG/JPEG bytes so that real and noise contexts are
//! bit-stable across runs. The generate endpoint answers with newline-delimited
//! JSON chunks over a chunked response: one `{text, logprob}` object per token,
//! terminated by `{done: true, truncated: bool}`.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::{
    BackendError, ContextKind, GenerateRequest, ImagePayload, Sampling, ScoreRequest,
    ScoreResponse, TokenLogprob, VisualContext,
};

pub const SCORE_PATH: &str = "/v1/score";
pub const GENERATE_PATH: &str = "/v1/generate";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireImage {
    pub kind: ContextKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mime: Option<String>,
}

impl From<&VisualContext> for WireImage {
    fn from(ctx: &VisualContext) -> Self {
        WireImage {
            kind: ctx.kind(),
            data: ctx.payload().map(|p| STANDARD.encode(&p.bytes)),
            mime: ctx.payload().map(|p| p.mime.clone()),
        }
    }
}

impl WireImage {
    pub fn into_context(self) -> Result<VisualContext, BackendError> {
        let payload = match self.data {
            Some(data) => Some(ImagePayload {
                bytes: STANDARD
                    .decode(data.as_bytes())
                    .map_err(|e| BackendError::Protocol(format!("bad base64 image: {e}")))?,
                mime: self.mime.unwrap_or_else(|| "image/png".to_string()),
            }),
            None => None,
        };
        VisualContext::from_parts(self.kind, payload, None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireScoreRequest {
    pub model: String,
    pub question: String,
    pub image: WireImage,
    pub continuation: Vec<String>,
}

impl From<&ScoreRequest> for WireScoreRequest {
    fn from(req: &ScoreRequest) -> Self {
        WireScoreRequest {
            model: req.model_id.clone(),
            question: req.question.clone(),
            image: WireImage::from(&req.context),
            continuation: req.continuation.clone(),
        }
    }
}

impl WireScoreRequest {
    pub fn into_domain(self) -> Result<ScoreRequest, BackendError> {
        let req = ScoreRequest {
            model_id: self.model,
            question: self.question,
            context: self.image.into_context()?,
            continuation: self.continuation,
        };
        req.validate()?;
        Ok(req)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireScoreResponse {
    pub tokens: Vec<TokenLogprob>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

impl WireScoreResponse {
    pub fn into_domain(self, requested_model: &str) -> ScoreResponse {
        ScoreResponse {
            token_logprobs: self.tokens,
            model_echo: self.model.unwrap_or_else(|| requested_model.to_string()),
        }
    }
}

impl From<&ScoreResponse> for WireScoreResponse {
    fn from(resp: &ScoreResponse) -> Self {
        WireScoreResponse {
            tokens: resp.token_logprobs.clone(),
            model: Some(resp.model_echo.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireGenerateRequest {
    pub model: String,
    pub question: String,
    pub image: WireImage,
    pub prefix: Vec<String>,
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    pub max_new_tokens: usize,
}

impl From<&GenerateRequest> for WireGenerateRequest {
    fn from(req: &GenerateRequest) -> Self {
        WireGenerateRequest {
            model: req.model_id.clone(),
            question: req.question.clone(),
            image: WireImage::from(&req.context),
            prefix: req.prefix.clone(),
            temperature: req.sampling.temperature,
            top_p: req.sampling.top_p,
            seed: req.sampling.seed,
            max_new_tokens: req.sampling.max_new_tokens,
        }
    }
}

impl WireGenerateRequest {
    pub fn into_domain(self) -> Result<GenerateRequest, BackendError> {
        let req = GenerateRequest {
            model_id: self.model,
            question: self.question,
            context: self.image.into_context()?,
            prefix: self.prefix,
            sampling: Sampling {
                temperature: self.temperature,
                top_p: self.top_p,
                seed: self.seed,
                max_new_tokens: self.max_new_tokens,
            },
        };
        req.validate()?;
        Ok(req)
    }
}

/// One line of the generate stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireChunk {
    Done {
        done: bool,
        truncated: bool,
    },
    Token {
        text: String,
        #[serde(deserialize_with = "logprob")]
        logprob: f64,
    },
}

impl WireChunk {
    pub fn parse_line(line: &str) -> Result<WireChunk, BackendError> {
        let chunk: WireChunk = serde_json::from_str(line)
            .map_err(|e| decode_error(line.as_bytes(), &e, &format!("stream chunk {line:?}")))?;
        if let WireChunk::Done { done: false, .. } = chunk {
            return Err(BackendError::Protocol(
                "terminal chunk must carry done: true".into(),
            ));
        }
        Ok(chunk)
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("wire chunk serializes");
        s.push('\n');
        s
    }
}

/// Reads a logprob that may arrive as a number, `null` (how most JSON encoders
/// write NaN) or a string such as `"-Infinity"`. Non-finite values are let
/// through here so the response check can reject them as integrity errors.
pub fn logprob<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
        Null(()),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Null(()) => Ok(f64::NAN),
        Raw::Text(s) => match s.trim().to_ascii_lowercase().as_str() {
            "nan" | "-nan" => Ok(f64::NAN),
            "inf" | "+inf" | "infinity" | "+infinity" => Ok(f64::INFINITY),
            "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
            _ => Err(serde::de::Error::custom(format!(
                "logprob must be a number, got {s:?}"
            ))),
        },
    }
}

/// Maps a response parse failure to an error. Bodies that only fail because
/// they carry non-finite numbers (bare `NaN`/`Infinity` literals or exponents
/// out of `f64` range) are integrity errors; anything else is a protocol error.
pub fn decode_error(raw: &[u8], err: &serde_json::Error, what: &str) -> BackendError {
    static NON_FINITE: std::sync::OnceLock<regex::bytes::Regex> = std::sync::OnceLock::new();
    let re = NON_FINITE.get_or_init(|| {
        regex::bytes::Regex::new(r"[:\[,]\s*[-+]?(NaN|Infinity)\s*[,}\]]").expect("valid pattern")
    });
    if err.to_string().contains("out of range") || re.is_match(raw) {
        BackendError::DataIntegrity(format!("non-finite number in {what}: {err}"))
    } else {
        BackendError::Protocol(format!("malformed {what}: {err}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_request_shape() {
        let req = ScoreRequest {
            model_id: "qwen".into(),
            question: "What?".into(),
            context: VisualContext::absent(),
            continuation: vec!["a".into(), "b".into()],
        };
        let json = serde_json::to_value(WireScoreRequest::from(&req)).unwrap();
        assert_eq!(
            json,
            serde_json::json!({
                "model": "qwen",
                "question": "What?",
                "image": {"kind": "absent"},
                "continuation": ["a", "b"],
            })
        );
    }

    #[test]
    fn image_payload_is_base64() {
        let ctx = VisualContext::real_with_resolution(vec![0, 1, 2, 255], "image/png", (1, 1));
        let wire = WireImage::from(&ctx);
        assert_eq!(wire.data.as_deref(), Some("AAEC/w=="));
        let back = wire.into_context().unwrap();
        assert_eq!(back.payload(), ctx.payload());
        assert_eq!(back.kind(), ContextKind::Real);
    }

    #[test]
    fn chunk_lines_parse() {
        assert_eq!(
            WireChunk::parse_line(r#"{"text":"A","logprob":-0.5}"#).unwrap(),
            WireChunk::Token {
                text: "A".into(),
                logprob: -0.5
            }
        );
        assert_eq!(
            WireChunk::parse_line(r#"{"done":true,"truncated":false}"#).unwrap(),
            WireChunk::Done {
                done: true,
                truncated: false
            }
        );
        assert!(WireChunk::parse_line(r#"{"done":false,"truncated":false}"#).is_err());
        assert!(WireChunk::parse_line(r#"{"text":"A"}"#).is_err());
        assert!(WireChunk::parse_line("not json").is_err());
    }

    #[test]
    fn non_finite_encodings_are_integrity_errors() {
        for body in [
            r#"{"tokens":[{"text":"a","logprob":null}]}"#,
            r#"{"tokens":[{"text":"a","logprob":"-Infinity"}]}"#,
        ] {
            let wire: WireScoreResponse = serde_json::from_str(body).unwrap();
            assert!(!wire.tokens[0].logprob.is_finite(), "{body}");
        }
        for body in [
            r#"{"tokens":[{"text":"a","logprob":NaN}]}"#,
            r#"{"tokens":[{"text":"a","logprob":-Infinity}]}"#,
            r#"{"tokens":[{"text":"a","logprob":-1e400}]}"#,
        ] {
            let err = serde_json::from_str::<WireScoreResponse>(body).unwrap_err();
            let err = decode_error(body.as_bytes(), &err, "score response");
            assert!(
                matches!(err, BackendError::DataIntegrity(_)),
                "{body}: {err:?}"
            );
        }
        let body = r#"{"tokens":[{"text":"NaN","logprob":"x"}]}"#;
        let err = serde_json::from_str::<WireScoreResponse>(body).unwrap_err();
        assert!(matches!(
            decode_error(body.as_bytes(), &err, "x"),
            BackendError::Protocol(_)
        ));
        assert!(matches!(
            WireChunk::parse_line(r#"{"text":"a","logprob":NaN}"#),
            Err(BackendError::DataIntegrity(_))
        ));
    }
}
