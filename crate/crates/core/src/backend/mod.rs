//! Uniform access to a log-prob capable generation model.
//!
//! Every other module depends only on the [`Backend`] trait. Two
//! implementations ship with the crate: [`http::HttpBackend`], which speaks the
//! JSON wire protocol in [`wire`], and [`mock::MockBackend`], a deterministic
//! scripted backend that records every call it receives.

pub mod http;
pub mod mock;
pub mod noise;
pub mod wire;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use noise::make_noise_context;

/// Which image accompanies a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextKind {
    Real,
    Noise,
    Absent,
}

impl ContextKind {
    pub const ALL: [ContextKind; 3] = [ContextKind::Real, ContextKind::Noise, ContextKind::Absent];

    pub fn as_str(self) -> &'static str {
        match self {
            ContextKind::Real => "real",
            ContextKind::Noise => "noise",
            ContextKind::Absent => "absent",
        }
    }
}

impl fmt::Display for ContextKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Encoded image bytes plus their media type.
#[derive(Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub bytes: Vec<u8>,
    pub mime: String,
}

impl fmt::Debug for ImagePayload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImagePayload")
            .field("bytes", &format_args!("<{} bytes>", self.bytes.len()))
            .field("mime", &self.mime)
            .finish()
    }
}

/// The visual conditioning of a request: the real image, a matched noise
/// image, or no image at all.
///
/// Constructors keep the payload/resolution invariants: `Absent` never carries
/// a payload, `Real` and `Noise` always carry one together with its resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisualContext {
    kind: ContextKind,
    payload: Option<ImagePayload>,
    resolution: Option<(u32, u32)>,
}

impl VisualContext {
    /// Wraps an encoded image, reading its resolution from the header.
    pub fn real(bytes: Vec<u8>, mime: impl Into<String>) -> Result<Self, BackendError> {
        let reader = image::ImageReader::new(std::io::Cursor::new(&bytes))
            .with_guessed_format()
            .map_err(|e| BackendError::Precondition(format!("unreadable image: {e}")))?;
        let dims = reader
            .into_dimensions()
            .map_err(|e| BackendError::Precondition(format!("unreadable image: {e}")))?;
        Ok(Self::real_with_resolution(bytes, mime, dims))
    }

    /// Wraps an encoded image whose resolution is already known.
    pub fn real_with_resolution(
        bytes: Vec<u8>,
        mime: impl Into<String>,
        resolution: (u32, u32),
    ) -> Self {
        VisualContext {
            kind: ContextKind::Real,
            payload: Some(ImagePayload {
                bytes,
                mime: mime.into(),
            }),
            resolution: Some(resolution),
        }
    }

    pub fn absent() -> Self {
        VisualContext {
            kind: ContextKind::Absent,
            payload: None,
            resolution: None,
        }
    }

    pub(crate) fn noise(bytes: Vec<u8>, resolution: (u32, u32)) -> Self {
        VisualContext {
            kind: ContextKind::Noise,
            payload: Some(ImagePayload {
                bytes,
                mime: "image/png".to_string(),
            }),
            resolution: Some(resolution),
        }
    }

    /// Builds a context from wire parts; used when decoding requests.
    pub(crate) fn from_parts(
        kind: ContextKind,
        payload: Option<ImagePayload>,
        resolution: Option<(u32, u32)>,
    ) -> Result<Self, BackendError> {
        match (kind, &payload) {
            (ContextKind::Absent, Some(_)) => Err(BackendError::Protocol(
                "absent image context must not carry data".into(),
            )),
            (ContextKind::Real | ContextKind::Noise, None) => Err(BackendError::Protocol(format!(
                "{kind} image context requires data"
            ))),
            _ => Ok(VisualContext {
                kind,
                payload,
                resolution: if kind == ContextKind::Absent {
                    None
                } else {
                    resolution
                },
            }),
        }
    }

    pub fn kind(&self) -> ContextKind {
        self.kind
    }

    pub fn payload(&self) -> Option<&ImagePayload> {
        self.payload.as_ref()
    }

    pub fn resolution(&self) -> Option<(u32, u32)> {
        self.resolution
    }
}

/// Teacher-forced scoring request: log-probabilities of `continuation` after
/// the (question, image) prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRequest {
    pub model_id: String,
    pub question: String,
    pub context: VisualContext,
    pub continuation: Vec<String>,
}

impl ScoreRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.continuation.is_empty() {
            return Err(BackendError::Precondition(
                "forced continuation must not be empty".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub text: String,
    #[serde(deserialize_with = "wire::logprob")]
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreResponse {
    pub token_logprobs: Vec<TokenLogprob>,
    pub model_echo: String,
}

impl ScoreResponse {
    pub fn logprobs(&self) -> impl Iterator<Item = f64> + '_ {
        self.token_logprobs.iter().map(|t| t.logprob)
    }

    /// Enforces the length law and finiteness against the request that
    /// produced this response.
    pub fn check_against(&self, req: &ScoreRequest) -> Result<(), BackendError> {
        if self.token_logprobs.len() != req.continuation.len() {
            return Err(BackendError::Protocol(format!(
                "score length mismatch: sent {} continuation tokens, received {} logprobs",
                req.continuation.len(),
                self.token_logprobs.len()
            )));
        }
        for (i, t) in self.token_logprobs.iter().enumerate() {
            if !t.logprob.is_finite() {
                return Err(BackendError::DataIntegrity(format!(
                    "non-finite logprob {} at position {i}",
                    t.logprob
                )));
            }
            if t.logprob > 0.0 {
                return Err(BackendError::DataIntegrity(format!(
                    "positive logprob {} at position {i}",
                    t.logprob
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateRequest {
    pub model_id: String,
    pub question: String,
    pub context: VisualContext,
    /// Text already in the trace, including any injected templates.
    pub prefix: Vec<String>,
    pub sampling: Sampling,
}

impl GenerateRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        let s = &self.sampling;
        if s.max_new_tokens == 0 {
            return Err(BackendError::Precondition(
                "max_new_tokens must be > 0".into(),
            ));
        }
        if !(s.top_p > 0.0 && s.top_p <= 1.0) {
            return Err(BackendError::Precondition(format!(
                "top_p must lie in (0, 1], got {}",
                s.top_p
            )));
        }
        if !(s.temperature >= 0.0) {
            return Err(BackendError::Precondition(format!(
                "temperature must be >= 0, got {}",
                s.temperature
            )));
        }
        Ok(())
    }
}

/// One streamed token. `index` is the 1-based cumulative count within the
/// stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamToken {
    pub text: String,
    pub logprob: f64,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamEvent {
    Token(StreamToken),
    /// End of stream. `truncated` is set when `max_new_tokens` cut the
    /// generation short.
    Done {
        truncated: bool,
    },
}

/// Incremental token stream. Dropping it abandons the generation.
pub type TokenStream<'a> = Box<dyn Iterator<Item = Result<StreamEvent, BackendError>> + Send + 'a>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("data integrity violation: {0}")]
    DataIntegrity(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("stream interrupted after {} token(s): {message}", received.len())]
    Stream {
        received: Vec<StreamToken>,
        message: String,
    },
    #[error("backend configuration error: {0}")]
    Config(String),
}

impl BackendError {
    /// Only transport failures are worth retrying; everything else points at
    /// a misconfigured server or bad input.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport { .. })
    }
}

pub trait Backend: Send + Sync {
    /// Teacher-forced log-probabilities, one per continuation token.
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError>;

    fn generate_stream(&self, req: &GenerateRequest) -> Result<TokenStream<'_>, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        (**self).score(req)
    }

    fn generate_stream(&self, req: &GenerateRequest) -> Result<TokenStream<'_>, BackendError> {
        (**self).generate_stream(req)
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        (**self).score(req)
    }

    fn generate_stream(&self, req: &GenerateRequest) -> Result<TokenStream<'_>, BackendError> {
        (**self).generate_stream(req)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        (**self).score(req)
    }

    fn generate_stream(&self, req: &GenerateRequest) -> Result<TokenStream<'_>, BackendError> {
        (**self).generate_stream(req)
    }
}

/// Drains a stream, returning the tokens and the truncation flag.
pub fn collect_stream(stream: TokenStream<'_>) -> Result<(Vec<StreamToken>, bool), BackendError> {
    let mut tokens = Vec::new();
    for event in stream {
        match event? {
            StreamEvent::Token(t) => tokens.push(t),
            StreamEvent::Done { truncated } => return Ok((tokens, truncated)),
        }
    }
    Ok((tokens, false))
}
