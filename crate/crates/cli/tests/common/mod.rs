#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;
use lookback_cli::data::TraceLine;
use lookback_cli::{Cli, CliResult};
use lookback_core::backend::mock::{CallKind, CallRecord, MockBackend, SyntheticModel};
use lookback_core::backend::{Backend, ContextKind};

pub const SEED: u64 = 7;

pub fn parse(args: &[&str]) -> Cli {
    let mut full = vec!["lookback"];
    full.extend_from_slice(args);
    Cli::try_parse_from(full).expect("arguments parse")
}

pub fn run(args: &[&str], backend: &dyn Backend) -> CliResult<String> {
    lookback_cli::run_with_backend(&parse(args), backend)
}

/// Writes a synthetic benchmark into `dir` and returns its config path.
pub fn synth(dir: &Path, questions: usize, passes: u32) -> PathBuf {
    let cli = parse(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--questions",
        &questions.to_string(),
        "--seed",
        &SEED.to_string(),
        "--passes",
        &passes.to_string(),
    ]);
    lookback_cli::run(&cli).expect("synth succeeds");
    dir.join("run.toml")
}

pub fn mock() -> MockBackend {
    MockBackend::new(SyntheticModel::new(SEED)).with_model_id("synthetic")
}

pub fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .map(str::to_string)
        .collect()
}

pub fn traces(path: &Path) -> Vec<TraceLine> {
    lines(path)
        .iter()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Identity of a backend call as far as duplicate work is concerned.
pub fn call_identity(c: &CallRecord) -> (bool, ContextKind, String, Option<u64>, usize, u64) {
    (
        c.kind == CallKind::Score,
        c.context,
        c.question.clone(),
        c.seed,
        c.tokens,
        c.fingerprint,
    )
}

/// Calls that appear more than once in `log`.
pub fn duplicate_calls(log: &[CallRecord]) -> Vec<String> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for c in log {
        *seen.entry(format!("{:?}", call_identity(c))).or_default() += 1;
    }
    seen.into_iter()
        .filter(|(_, n)| *n > 1)
        .map(|(k, _)| k)
        .collect()
}
