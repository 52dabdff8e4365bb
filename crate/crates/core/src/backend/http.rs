//! Blocking HTTP client for the JSON wire protocol.

use std::io::{BufRead, BufReader, Read};
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use serde::Serialize;

use super::wire::{decode_error, GENERATE_PATH, SCORE_PATH};
use super::wire::{WireChunk, WireGenerateRequest, WireScoreRequest, WireScoreResponse};
use super::{
    Backend, BackendError, GenerateRequest, ScoreRequest, ScoreResponse, StreamEvent, StreamToken,
    TokenStream,
};

/// Environment variable consulted for the server base URL when the config
/// leaves it empty.
pub const BASE_URL_ENV: &str = "LOOKBACK_BASE_URL";

/// Exponential backoff for transport failures. Protocol violations are never
/// retried.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32
            .checked_shl(attempt.saturating_sub(1))
            .unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub auth_token: Option<String>,
    pub connect_timeout: Duration,
    /// Time allowed until response headers arrive. Streaming bodies are not
    /// bounded; the consumer drops the stream instead.
    pub response_timeout: Duration,
    pub retry: RetryPolicy,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        HttpConfig {
            base_url: base_url.into(),
            auth_token: None,
            connect_timeout: Duration::from_secs(10),
            response_timeout: Duration::from_secs(600),
            retry: RetryPolicy::default(),
        }
    }

    /// Resolves the base URL from `base_url` or `LOOKBACK_BASE_URL`, and the
    /// bearer token from the environment variable named by `auth_env_var`.
    pub fn resolve(
        base_url: Option<&str>,
        auth_env_var: Option<&str>,
    ) -> Result<Self, BackendError> {
        let url = match base_url.filter(|s| !s.is_empty()) {
            Some(u) => u.to_string(),
            None => std::env::var(BASE_URL_ENV).map_err(|_| {
                BackendError::Config(format!(
                    "no backend base_url configured and {BASE_URL_ENV} is unset"
                ))
            })?,
        };
        let mut cfg = HttpConfig::new(url);
        if let Some(var) = auth_env_var.filter(|s| !s.is_empty()) {
            match std::env::var(var) {
                Ok(token) => cfg.auth_token = Some(token),
                Err(_) => warn!("auth env var {var} is unset; sending unauthenticated requests"),
            }
        }
        Ok(cfg)
    }
}

pub struct HttpBackend {
    agent: ureq::Agent,
    config: HttpConfig,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent_config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_connect(Some(config.connect_timeout))
            .timeout_recv_response(Some(config.response_timeout))
            .build();
        HttpBackend {
            agent: ureq::Agent::new_with_config(agent_config),
            config,
        }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    /// One POST attempt; returns the response only for 2xx.
    fn post_once(
        &self,
        path: &str,
        body: &impl Serialize,
    ) -> Result<ureq::http::Response<ureq::Body>, BackendError> {
        let mut builder = self.agent.post(self.url(path));
        if let Some(token) = &self.config.auth_token {
            builder = builder.header("Authorization", format!("Bearer {token}"));
        }
        let resp = builder.send_json(body).map_err(classify_ureq_error)?;
        let status = resp.status().as_u16();
        match status {
            200..=299 => Ok(resp),
            408 | 429 | 500..=599 => Err(BackendError::Transport {
                attempts: 1,
                message: format!("server returned HTTP {status}"),
            }),
            _ => Err(BackendError::Protocol(format!(
                "server returned HTTP {status}"
            ))),
        }
    }

    fn with_retry<T>(
        &self,
        what: &str,
        mut op: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let policy = self.config.retry;
        let mut attempt = 1;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(BackendError::Transport { message, .. }) => {
                    if attempt > policy.max_retries {
                        return Err(BackendError::Transport {
                            attempts: attempt,
                            message,
                        });
                    }
                    let delay = policy.delay(attempt);
                    debug!("{what}: attempt {attempt} failed ({message}); retrying in {delay:?}");
                    thread::sleep(delay);
                    attempt += 1;
                }
                Err(other) => return Err(other),
            }
        }
    }
}

fn classify_ureq_error(err: ureq::Error) -> BackendError {
    match err {
        ureq::Error::BadUri(_) | ureq::Error::Http(_) | ureq::Error::InvalidProxyUrl => {
            BackendError::Config(err.to_string())
        }
        other => BackendError::Transport {
            attempts: 1,
            message: other.to_string(),
        },
    }
}

fn read_body(resp: &mut ureq::http::Response<ureq::Body>) -> Result<Vec<u8>, BackendError> {
    let mut buf = Vec::new();
    resp.body_mut()
        .as_reader()
        .read_to_end(&mut buf)
        .map_err(|e| BackendError::Transport {
            attempts: 1,
            message: format!("reading response body: {e}"),
        })?;
    Ok(buf)
}

impl Backend for HttpBackend {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        req.validate()?;
        let body = WireScoreRequest::from(req);
        let raw = self.with_retry("score", || {
            let mut resp = self.post_once(SCORE_PATH, &body)?;
            read_body(&mut resp)
        })?;
        let wire: WireScoreResponse =
            serde_json::from_slice(&raw).map_err(|e| decode_error(&raw, &e, "score response"))?;
        let out = wire.into_domain(&req.model_id);
        out.check_against(req)?;
        Ok(out)
    }

    fn generate_stream(&self, req: &GenerateRequest) -> Result<TokenStream<'_>, BackendError> {
        req.validate()?;
        let body = WireGenerateRequest::from(req);
        let resp = self.with_retry("generate", || self.post_once(GENERATE_PATH, &body))?;
        let reader = BufReader::new(resp.into_body().into_reader());
        Ok(Box::new(HttpTokenStream {
            lines: reader,
            received: Vec::new(),
            max_new_tokens: req.sampling.max_new_tokens,
            finished: false,
        }))
    }
}

struct HttpTokenStream<R> {
    lines: R,
    received: Vec<StreamToken>,
    max_new_tokens: usize,
    finished: bool,
}

impl<R: BufRead> HttpTokenStream<R> {
    fn fail(&mut self, err: BackendError) -> Option<Result<StreamEvent, BackendError>> {
        self.finished = true;
        Some(Err(err))
    }

    fn interrupted(&mut self, message: String) -> Option<Result<StreamEvent, BackendError>> {
        let received = std::mem::take(&mut self.received);
        self.fail(BackendError::Stream { received, message })
    }
}

impl<R: BufRead + Send> Iterator for HttpTokenStream<R> {
    type Item = Result<StreamEvent, BackendError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        let mut line = String::new();
        loop {
            line.clear();
            match self.lines.read_line(&mut line) {
                Ok(0) => return self.interrupted("connection closed before terminal chunk".into()),
                Ok(_) if line.trim().is_empty() => continue,
                Ok(_) => break,
                Err(e) => return self.interrupted(format!("reading stream: {e}")),
            }
        }
        let chunk = match WireChunk::parse_line(line.trim()) {
            Ok(c) => c,
            Err(e) => return self.fail(e),
        };
        match chunk {
            WireChunk::Done { truncated, .. } => {
                self.finished = true;
                Some(Ok(StreamEvent::Done { truncated }))
            }
            WireChunk::Token { .. } if self.received.len() >= self.max_new_tokens => {
                // Server ignored the budget; stop here and report the cutoff.
                self.finished = true;
                Some(Ok(StreamEvent::Done { truncated: true }))
            }
            WireChunk::Token { text, logprob } => {
                if !logprob.is_finite() || logprob > 0.0 {
                    return self.fail(BackendError::DataIntegrity(format!(
                        "invalid streamed logprob {logprob} for token {text:?}"
                    )));
                }
                let token = StreamToken {
                    text,
                    logprob,
                    index: self.received.len() + 1,
                };
                self.received.push(token.clone());
                Some(Ok(StreamEvent::Token(token)))
            }
        }
    }
}
