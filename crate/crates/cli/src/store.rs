//! Append-only JSONL outputs with a checksummed manifest for crash-safe
//! resumption.
//!
//! Every output `X` has a manifest `X.manifest`. Each manifest line is
//! `<sha256 of json>\t<json>`; the first is a header naming the config hash,
//! the rest are per-unit entries. A `done` entry carries the SHA-256 of the
//! output line it accounts for, in output order. On reopen:
//!
//! * a torn final line (no newline) in either file is dropped;
//! * output lines past the last `done` entry are orphans of a crash between
//!   the two writes and are truncated away;
//! * any checksum mismatch refuses to resume.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use log::warn;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FORMAT: &str = "lookback-manifest/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    config_hash: String,
    config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Entry {
    Done {
        key: String,
        sha256: String,
    },
    /// Unit intentionally not produced (e.g. missing image).
    Skipped {
        key: String,
        reason: String,
    },
    /// Unit attempted and failed; retried on the next run.
    Failed {
        key: String,
        error: String,
    },
}

impl Entry {
    fn key(&self) -> &str {
        match self {
            Entry::Done { key, .. } | Entry::Skipped { key, .. } | Entry::Failed { key, .. } => key,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UnitState {
    Done,
    Skipped(String),
    Failed(String),
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn checked_line<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("manifest entries serialize");
    format!("{}\t{json}\n", sha256_hex(json.as_bytes()))
}

fn corrupt(path: &Path, line: usize, what: &str) -> CliError {
    CliError::Other(anyhow!(
        "{} line {line}: {what}; refusing to resume. Remove the output and its manifest to start over",
        path.display()
    ))
}

/// Complete lines of `text` and the byte length they cover; a trailing
/// fragment without newline is reported separately.
fn complete_lines(text: &str) -> (Vec<&str>, usize, bool) {
    let covered = text.rfind('\n').map_or(0, |i| i + 1);
    let lines = text[..covered].lines().collect();
    (lines, covered, covered < text.len())
}

fn parse_checked<T: DeserializeOwned>(path: &Path, n: usize, line: &str) -> CliResult<T> {
    let (sum, json) = line
        .split_once('\t')
        .ok_or_else(|| corrupt(path, n, "missing checksum"))?;
    if sha256_hex(json.as_bytes()) != sum {
        return Err(corrupt(path, n, "checksum mismatch"));
    }
    serde_json::from_str(json).map_err(|e| corrupt(path, n, &format!("unparseable entry ({e})")))
}

/// Reads a manifest, dropping a torn tail. Returns entries and the byte
/// length of the valid prefix.
fn read_manifest(path: &Path, config_hash: Option<&str>) -> CliResult<(Vec<Entry>, usize)> {
    let text = fs::read_to_string(path)?;
    let (lines, covered, torn) = complete_lines(&text);
    if torn {
        warn!("{}: dropping torn final line", path.display());
    }
    let Some((first, rest)) = lines.split_first() else {
        return Err(corrupt(path, 1, "empty manifest"));
    };
    let header: Header = parse_checked(path, 1, first)?;
    if header.format != MANIFEST_FORMAT {
        return Err(corrupt(
            path,
            1,
            &format!("unknown format {:?}", header.format),
        ));
    }
    if let Some(expected) = config_hash {
        if header.config_hash != expected {
            return Err(CliError::Config(format!(
                "{} was produced by config {} but the current config hashes to {expected}; \
                 use a different output path or restore the original config",
                path.display(),
                header.config_hash
            )));
        }
    }
    let entries = rest
        .iter()
        .enumerate()
        .map(|(i, l)| parse_checked(path, i + 2, l))
        .collect::<CliResult<Vec<Entry>>>()?;
    Ok((entries, covered))
}

/// Checks output lines against the `done` digests. Returns the verified
/// lines and the byte length they cover.
fn verify_output<'t>(
    out: &Path,
    text: &'t str,
    entries: &[Entry],
) -> CliResult<(Vec<&'t str>, usize)> {
    let digests: Vec<&str> = entries
        .iter()
        .filter_map(|e| match e {
            Entry::Done { sha256, .. } => Some(sha256.as_str()),
            _ => None,
        })
        .collect();
    let (lines, _, _) = complete_lines(text);
    if lines.len() < digests.len() {
        return Err(corrupt(
            out,
            lines.len() + 1,
            &format!(
                "manifest records {} lines but only {} exist",
                digests.len(),
                lines.len()
            ),
        ));
    }
    let mut covered = 0;
    for (i, (line, digest)) in lines.iter().zip(&digests).enumerate() {
        if sha256_hex(line.as_bytes()) != *digest {
            return Err(corrupt(
                out,
                i + 1,
                "output line does not match its manifest checksum",
            ));
        }
        covered += line.len() + 1;
    }
    if lines.len() > digests.len() {
        warn!(
            "{}: dropping {} orphan line(s) written after the last manifest entry",
            out.display(),
            lines.len() - digests.len()
        );
    }
    Ok((lines[..digests.len()].to_vec(), covered))
}

/// Writer for one resumable JSONL output. Owned by a single thread.
pub struct JsonlStore {
    out_path: PathBuf,
    manifest_path: PathBuf,
    out: BufWriter<File>,
    manifest: BufWriter<File>,
    states: BTreeMap<String, UnitState>,
}

impl JsonlStore {
    /// Opens `out` for appending, resuming from its manifest when present.
    pub fn open(out: &Path, config_hash: &str, config: &serde_json::Value) -> CliResult<Self> {
        let mpath = manifest_path(out);
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut states = BTreeMap::new();
        if mpath.exists() {
            let (entries, m_len) = read_manifest(&mpath, Some(config_hash))?;
            let text = if out.exists() {
                fs::read_to_string(out)?
            } else {
                String::new()
            };
            let (_, o_len) = verify_output(out, &text, &entries)?;
            truncate(&mpath, m_len)?;
            truncate(out, o_len)?;
            for e in entries {
                let state = match &e {
                    Entry::Done { .. } => UnitState::Done,
                    Entry::Skipped { reason, .. } => UnitState::Skipped(reason.clone()),
                    Entry::Failed { error, .. } => UnitState::Failed(error.clone()),
                };
                states.insert(e.key().to_string(), state);
            }
        } else {
            if out.exists() && fs::metadata(out)?.len() > 0 {
                return Err(CliError::Other(anyhow!(
                    "{} exists without a manifest; refusing to append to unverifiable output",
                    out.display()
                )));
            }
            let header = Header {
                format: MANIFEST_FORMAT.into(),
                config_hash: config_hash.into(),
                config: config.clone(),
            };
            fs::write(&mpath, checked_line(&header))?;
            File::create(out)?;
        }
        let append = |p: &Path| -> CliResult<BufWriter<File>> {
            Ok(BufWriter::new(OpenOptions::new().append(true).open(p)?))
        };
        Ok(JsonlStore {
            out: append(out)?,
            manifest: append(&mpath)?,
            out_path: out.to_path_buf(),
            manifest_path: mpath,
            states,
        })
    }

    pub fn path(&self) -> &Path {
        &self.out_path
    }

    pub fn state(&self, key: &str) -> Option<&UnitState> {
        self.states.get(key)
    }

    /// Done or deliberately skipped; failed units are retried.
    pub fn is_settled(&self, key: &str) -> bool {
        matches!(
            self.states.get(key),
            Some(UnitState::Done | UnitState::Skipped(_))
        )
    }

    pub fn count(&self, pred: impl Fn(&UnitState) -> bool) -> usize {
        self.states.values().filter(|s| pred(s)).count()
    }

    fn record(&mut self, entry: Entry) -> CliResult<()> {
        self.manifest.write_all(checked_line(&entry).as_bytes())?;
        self.manifest.flush()?;
        Ok(())
    }

    /// Appends one output line, then its manifest entry.
    pub fn append<T: Serialize>(&mut self, key: &str, value: &T) -> CliResult<()> {
        let line = serde_json::to_string(value)?;
        debug_assert!(!line.contains('\n'));
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        self.record(Entry::Done {
            key: key.into(),
            sha256: sha256_hex(line.as_bytes()),
        })?;
        self.states.insert(key.into(), UnitState::Done);
        Ok(())
    }

    pub fn skip(&mut self, key: &str, reason: &str) -> CliResult<()> {
        self.record(Entry::Skipped {
            key: key.into(),
            reason: reason.into(),
        })?;
        self.states
            .insert(key.into(), UnitState::Skipped(reason.into()));
        Ok(())
    }

    pub fn fail(&mut self, key: &str, error: &str) -> CliResult<()> {
        self.record(Entry::Failed {
            key: key.into(),
            error: error.into(),
        })?;
        self.states
            .insert(key.into(), UnitState::Failed(error.into()));
        Ok(())
    }

    pub fn manifest_path(&self) -> &Path {
        &self.manifest_path
    }
}

/// Keys already done or skipped in `out`, without modifying anything.
/// Used by dry runs to size the pending work.
pub fn settled_keys(out: &Path, config_hash: &str) -> CliResult<BTreeSet<String>> {
    let mpath = manifest_path(out);
    if !mpath.exists() {
        return Ok(BTreeSet::new());
    }
    let (entries, _) = read_manifest(&mpath, Some(config_hash))?;
    let mut settled = BTreeSet::new();
    for e in entries {
        match e {
            Entry::Done { key, .. } | Entry::Skipped { key, .. } => {
                settled.insert(key);
            }
            Entry::Failed { key, .. } => {
                settled.remove(&key);
            }
        }
    }
    Ok(settled)
}

fn truncate(path: &Path, len: usize) -> CliResult<()> {
    let f = OpenOptions::new().write(true).open(path)?;
    if f.metadata()?.len() != len as u64 {
        f.set_len(len as u64)?;
    }
    Ok(())
}

/// Parses every record of a JSONL file. When a manifest sits next to it,
/// only manifest-verified lines are returned.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mpath = manifest_path(path);
    let lines: Vec<&str> = if mpath.exists() {
        let (entries, _) = read_manifest(&mpath, None)?;
        verify_output(path, &text, &entries)?.0
    } else {
        text.lines().filter(|l| !l.trim().is_empty()).collect()
    };
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Other(anyhow!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Writes `bytes` to `path` via a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
