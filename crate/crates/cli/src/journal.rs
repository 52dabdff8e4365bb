//! Record/replay journal of backend calls.
//!
//! A resumed job re-runs units that were in flight when the previous run
//! died. Those units repeat requests whose answers already arrived; the
//! journal serves them from disk so each backend call happens once across
//! runs. Requests are keyed by the SHA-256 of their wire JSON, which is
//! deterministic given the seed.
//!
//! Streams are journaled when the consumer is done with them, whether it read
//! to the end or stopped early (the controller drops a stream at a trigger).
//! A replayed prefix that the consumer reads past falls back to a live call
//! that skips the tokens already served.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::anyhow;
use log::warn;
use lookback_core::backend::wire::{WireGenerateRequest, WireScoreRequest};
use lookback_core::backend::{
    Backend, BackendError, GenerateRequest, ScoreRequest, ScoreResponse, StreamEvent, StreamToken,
    TokenLogprob, TokenStream,
};
use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Recorded {
    Score {
        key: String,
        tokens: Vec<TokenLogprob>,
        model_echo: String,
    },
    Generate {
        key: String,
        tokens: Vec<StreamToken>,
        /// `Some` when the stream was read to its end.
        done: Option<bool>,
    },
}

impl Recorded {
    fn key(&self) -> &str {
        match self {
            Recorded::Score { key, .. } | Recorded::Generate { key, .. } => key,
        }
    }
}

pub fn journal_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".calls");
    PathBuf::from(s)
}

fn score_key(req: &ScoreRequest) -> String {
    let json =
        serde_json::to_string(&WireScoreRequest::from(req)).expect("wire request serializes");
    sha256_hex(format!("score\n{json}").as_bytes())
}

fn generate_key(req: &GenerateRequest) -> String {
    let json =
        serde_json::to_string(&WireGenerateRequest::from(req)).expect("wire request serializes");
    sha256_hex(format!("generate\n{json}").as_bytes())
}

/// Backend wrapper that records completed calls and replays them.
pub struct JournaledBackend<'b> {
    inner: &'b dyn Backend,
    cache: Mutex<HashMap<String, Recorded>>,
    writer: Mutex<BufWriter<File>>,
    live: AtomicUsize,
    replayed: AtomicUsize,
}

impl<'b> JournaledBackend<'b> {
    /// Loads the journal at `path` (creating it if needed). Lines failing
    /// their checksum make the journal untrustworthy and abort.
    pub fn open(inner: &'b dyn Backend, path: &Path) -> CliResult<Self> {
        let mut cache = HashMap::new();
        if path.exists() {
            let text = fs::read_to_string(path)?;
            let covered = text.rfind('\n').map_or(0, |i| i + 1);
            if covered < text.len() {
                warn!("{}: dropping torn final line", path.display());
                OpenOptions::new()
                    .write(true)
                    .open(path)?
                    .set_len(covered as u64)?;
            }
            for (i, line) in text[..covered].lines().enumerate() {
                let bad = |what: &str| {
                    CliError::Other(anyhow!("{} line {}: {what}", path.display(), i + 1))
                };
                let (sum, json) = line
                    .split_once('\t')
                    .ok_or_else(|| bad("missing checksum"))?;
                if sha256_hex(json.as_bytes()) != sum {
                    return Err(bad("checksum mismatch"));
                }
                let rec: Recorded = serde_json::from_str(json).map_err(|e| bad(&e.to_string()))?;
                // Later, longer recordings of the same stream supersede earlier ones.
                cache.insert(rec.key().to_string(), rec);
            }
        } else if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(JournaledBackend {
            inner,
            cache: Mutex::new(cache),
            writer: Mutex::new(BufWriter::new(file)),
            live: AtomicUsize::new(0),
            replayed: AtomicUsize::new(0),
        })
    }

    pub fn recorded_calls(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    /// Calls forwarded to the backend during this session.
    pub fn live_calls(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    /// Calls answered from the journal during this session.
    pub fn replayed_calls(&self) -> usize {
        self.replayed.load(Ordering::SeqCst)
    }

    fn persist(&self, rec: Recorded) {
        let json = serde_json::to_string(&rec).expect("journal entry serializes");
        let line = format!("{}\t{json}\n", sha256_hex(json.as_bytes()));
        let mut w = self.writer.lock().unwrap();
        if let Err(e) = w.write_all(line.as_bytes()).and_then(|_| w.flush()) {
            warn!("call journal write failed: {e}");
        }
        drop(w);
        self.cache
            .lock()
            .unwrap()
            .insert(rec.key().to_string(), rec);
    }
}

impl Backend for JournaledBackend<'_> {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        let key = score_key(req);
        if let Some(Recorded::Score {
            tokens, model_echo, ..
        }) = self.cache.lock().unwrap().get(&key)
        {
            self.replayed.fetch_add(1, Ordering::SeqCst);
            return Ok(ScoreResponse {
                token_logprobs: tokens.clone(),
                model_echo: model_echo.clone(),
            });
        }
        self.live.fetch_add(1, Ordering::SeqCst);
        let resp = self.inner.score(req)?;
        self.persist(Recorded::Score {
            key,
            tokens: resp.token_logprobs.clone(),
            model_echo: resp.model_echo.clone(),
        });
        Ok(resp)
    }

    fn generate_stream(&self, req: &GenerateRequest) -> Result<TokenStream<'_>, BackendError> {
        let key = generate_key(req);
        let cached = match self.cache.lock().unwrap().get(&key) {
            Some(Recorded::Generate { tokens, done, .. }) => Some((tokens.clone(), *done)),
            _ => None,
        };
        match cached {
            Some((tokens, done)) => {
                self.replayed.fetch_add(1, Ordering::SeqCst);
                Ok(Box::new(Replay {
                    backend: self,
                    req: req.clone(),
                    key,
                    tokens,
                    done,
                    pos: 0,
                    live: None,
                    finished: false,
                }))
            }
            None => {
                self.live.fetch_add(1, Ordering::SeqCst);
                let live = self.inner.generate_stream(req)?;
                Ok(Box::new(Recorder {
                    backend: self,
                    key,
                    stream: live,
                    tokens: Vec::new(),
                    done: None,
                    failed: false,
                    recorded_len: None,
                }))
            }
        }
    }
}

/// Passes a live stream through and journals what the consumer saw.
struct Recorder<'j, 'b> {
    backend: &'j JournaledBackend<'b>,
    key: String,
    stream: TokenStream<'j>,
    tokens: Vec<StreamToken>,
    done: Option<bool>,
    failed: bool,
    /// Length of an existing recording this one extends.
    recorded_len: Option<usize>,
}

impl Iterator for Recorder<'_, '_> {
    type Item = Result<StreamEvent, BackendError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done.is_some() || self.failed {
            return None;
        }
        let ev = self.stream.next()?;
        match &ev {
            Ok(StreamEvent::Token(t)) => self.tokens.push(t.clone()),
            Ok(StreamEvent::Done { truncated }) => self.done = Some(*truncated),
            Err(_) => self.failed = true,
        }
        Some(ev)
    }
}

impl Drop for Recorder<'_, '_> {
    fn drop(&mut self) {
        // A failed stream is not a completed call; it is retried live.
        let grew = self
            .recorded_len
            .is_none_or(|n| self.tokens.len() > n || self.done.is_some());
        if !self.failed && grew {
            self.backend.persist(Recorded::Generate {
                key: std::mem::take(&mut self.key),
                tokens: std::mem::take(&mut self.tokens),
                done: self.done,
            });
        }
    }
}

/// Serves a recorded stream; continues live past an incomplete recording.
struct Replay<'j, 'b> {
    backend: &'j JournaledBackend<'b>,
    req: GenerateRequest,
    key: String,
    tokens: Vec<StreamToken>,
    done: Option<bool>,
    pos: usize,
    live: Option<Recorder<'j, 'b>>,
    finished: bool,
}

impl Iterator for Replay<'_, '_> {
    type Item = Result<StreamEvent, BackendError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        if let Some(live) = &mut self.live {
            return live.next();
        }
        if self.pos < self.tokens.len() {
            self.pos += 1;
            return Some(Ok(StreamEvent::Token(self.tokens[self.pos - 1].clone())));
        }
        if let Some(truncated) = self.done {
            self.finished = true;
            return Some(Ok(StreamEvent::Done { truncated }));
        }
        // The recording stopped where an earlier consumer stopped; fetch the
        // rest live, skipping what was already served.
        self.backend.live.fetch_add(1, Ordering::SeqCst);
        let stream = match self.backend.inner.generate_stream(&self.req) {
            Ok(s) => s,
            Err(e) => {
                self.finished = true;
                return Some(Err(e));
            }
        };
        let mut rec = Recorder {
            backend: self.backend,
            key: std::mem::take(&mut self.key),
            stream,
            tokens: Vec::new(),
            done: None,
            failed: false,
            recorded_len: Some(self.tokens.len()),
        };
        for _ in 0..self.tokens.len() {
            match rec.next() {
                Some(Ok(StreamEvent::Token(_))) => {}
                Some(Ok(StreamEvent::Done { truncated })) => {
                    self.finished = true;
                    return Some(Ok(StreamEvent::Done { truncated }));
                }
                Some(Err(e)) => {
                    self.finished = true;
                    return Some(Err(e));
                }
                None => {
                    self.finished = true;
                    return None;
                }
            }
        }
        self.live = Some(rec);
        self.live.as_mut().expect("just set").next()
    }
}
