//! Declarative run configuration loaded from TOML.

use std::path::{Path, PathBuf};

use lookback_core::eval::{MinusStyle, Pass1Mode};
use lookback_core::miner::MiningParams;
use lookback_core::probe::{ThresholdSpec, DEFAULT_BINS};
use lookback_core::{BranchingConfig, ControllerConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Http,
    /// In-process synthetic model; for dry runs and tests.
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub base_url: Option<String>,
    pub model_id: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_env_var: Option<String>,
    /// Seed of the synthetic model behind `kind = "mock"`.
    pub mock_seed: u64,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            kind: BackendKind::Http,
            base_url: None,
            model_id: "model".into(),
            auth_env_var: None,
            mock_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub temperature: f64,
    pub top_p: f64,
    pub n_passes: u32,
    /// Run seed: per-pass seeds and the noise image derive from it.
    pub seed: u64,
}

impl Default for SamplingSection {
    fn default() -> Self {
        SamplingSection {
            temperature: 0.6,
            top_p: 0.95,
            n_passes: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    #[default]
    Thinking,
    Instruct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    pub instruct_max: usize,
    pub thinking_max: usize,
    /// Which of the two budgets applies to this run.
    pub mode: ModelMode,
}

impl Default for BudgetSection {
    fn default() -> Self {
        BudgetSection {
            instruct_max: 16_384,
            thinking_max: 32_768,
            mode: ModelMode::Thinking,
        }
    }
}

impl BudgetSection {
    pub fn active(&self) -> usize {
        match self.mode {
            ModelMode::Thinking => self.thinking_max,
            ModelMode::Instruct => self.instruct_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub thresholds: ThresholdSpec,
    pub bins: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            thresholds: ThresholdSpec::default(),
            bins: DEFAULT_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Method id stamped on decoded traces.
    pub method_id: String,
    /// Method the report compares against.
    pub baseline_method: String,
    pub pass1_mode: Pass1Mode,
    pub minus: MinusStyle,
    /// Answer-extraction regexes; empty means the built-in set.
    pub answer_patterns: Vec<String>,
    /// Report categories; empty means all present.
    pub categories: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            method_id: "ours".into(),
            baseline_method: "original".into(),
            pass1_mode: Pass1Mode::default(),
            minus: MinusStyle::default(),
            answer_patterns: Vec::new(),
            categories: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub questions: PathBuf,
    pub traces: PathBuf,
    pub probes: PathBuf,
    pub curves: PathBuf,
    pub vocab: PathBuf,
    pub eval: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            questions: "questions.jsonl".into(),
            traces: "traces.jsonl".into(),
            probes: "probes.jsonl".into(),
            curves: "curves.csv".into(),
            vocab: "vocab.json".into(),
            eval: "eval.jsonl".into(),
            reports: "reports".into(),
        }
    }
}

impl PathsSection {
    fn resolve_against(&mut self, base: &Path) {
        for p in [
            &mut self.questions,
            &mut self.traces,
            &mut self.probes,
            &mut self.curves,
            &mut self.vocab,
            &mut self.eval,
            &mut self.reports,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// In-flight backend requests.
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { workers: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendSection,
    pub sampling: SamplingSection,
    pub budgets: BudgetSection,
    pub controller: ControllerConfig,
    pub branching: BranchingConfig,
    pub probe: ProbeSection,
    pub mining: MiningParams,
    pub eval: EvalSection,
    pub paths: PathsSection,
    pub run: RunSection,
}

/// Sets `dotted.key = value` in a TOML table. The value is parsed as TOML
/// and falls back to a bare string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        CliError::Config(format!(
            "override {assignment:?} is not of the form key=value"
        ))
    })?;
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {p:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides and validates.
    /// Relative paths resolve against `base_dir`.
    pub fn from_toml(text: &str, overrides: &[String], base_dir: &Path) -> CliResult<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| CliError::Config(format!("invalid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.paths.resolve_against(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, overrides, base)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.budgets.instruct_max == 0 || self.budgets.thinking_max == 0 {
            return bad("budgets must be > 0".into());
        }
        if self.sampling.n_passes == 0 {
            return bad("sampling.n_passes must be >= 1".into());
        }
        if !(self.sampling.top_p > 0.0 && self.sampling.top_p <= 1.0) {
            return bad(format!(
                "sampling.top_p must lie in (0, 1], got {}",
                self.sampling.top_p
            ));
        }
        if !(self.sampling.temperature >= 0.0) {
            return bad(format!(
                "sampling.temperature must be >= 0, got {}",
                self.sampling.temperature
            ));
        }
        if self.run.workers == 0 {
            return bad("run.workers must be >= 1".into());
        }
        if self.probe.bins < 2 {
            return bad(format!("probe.bins must be >= 2, got {}", self.probe.bins));
        }
        if let ThresholdSpec::Quantiles {
            presence,
            content,
            grounded,
        } = self.probe.thresholds
        {
            if [presence, content, grounded]
                .iter()
                .any(|q| !(0.0..=1.0).contains(q))
            {
                return bad("probe threshold quantiles must lie in [0, 1]".into());
            }
        }
        self.controller
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if self.branching.enabled {
            self.branching
                .validate()
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        if self.backend.kind == BackendKind::Http && self.backend.model_id.is_empty() {
            return bad("backend.model_id must be set".into());
        }
        Ok(())
    }

    /// Effective configuration as JSON, echoed into output manifests.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON of every setting that can change the
    /// content of an output unit. File locations, worker count and the pass
    /// count are excluded: moving a run, changing parallelism or adding
    /// passes keeps its identity, since each pass's seed is independent of
    /// how many passes there are.
    pub fn hash(&self) -> String {
        let mut v = self.to_json();
        let obj = v.as_object_mut().expect("config is an object");
        obj.remove("paths");
        obj.remove("run");
        if let Some(s) = obj.get_mut("sampling").and_then(|s| s.as_object_mut()) {
            s.remove("n_passes");
        }
        // serde_json maps are key-sorted, so this serialization is canonical.
        sha256_hex(serde_json::to_string(&v).expect("json").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, overrides: &[&str]) -> CliResult<RunConfig> {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        RunConfig::from_toml(text, &o, Path::new("/base"))
    }

    #[test]
    fn defaults_follow_the_protocol() {
        let c = parse("", &[]).unwrap();
        assert_eq!(c.sampling.n_passes, 10);
        assert_eq!(c.budgets.thinking_max, 32_768);
        assert_eq!(c.budgets.instruct_max, 16_384);
        assert_eq!(c.budgets.active(), 32_768);
        assert_eq!(c.run.workers, 8);
        assert_eq!(c.branching.m, 4);
        assert_eq!(c.paths.traces, PathBuf::from("/base/traces.jsonl"));
    }

    #[test]
    fn overrides_win_over_file_values() {
        let c = parse(
            "[sampling]\nn_passes = 3\n",
            &["sampling.n_passes=5", "backend.model_id=m-4b"],
        )
        .unwrap();
        assert_eq!(c.sampling.n_passes, 5);
        assert_eq!(c.backend.model_id, "m-4b");
        let c = parse("", &["branching.M=2", "branching.enabled=true"]).unwrap();
        assert_eq!(c.branching.m, 2);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for (text, o) in [
            ("[sampling]\nn_passes = 0\n", vec![]),
            ("", vec!["budgets.thinking_max=0"]),
            ("", vec!["controller.cooldown_window=2"]),
            ("[nonsense]\nx = 1\n", vec![]),
            ("not toml [", vec![]),
            ("", vec!["no_equals_sign"]),
        ] {
            let err = parse(text, &o).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{err}");
        }
    }

    #[test]
    fn hash_ignores_location_parallelism_and_pass_count() {
        let a = parse("", &[]).unwrap();
        let b = parse(
            "",
            &[
                "paths.traces=elsewhere.jsonl",
                "run.workers=2",
                "sampling.n_passes=3",
            ],
        )
        .unwrap();
        assert_eq!(a.hash(), b.hash());
        for o in [
            "sampling.seed=1",
            "sampling.top_p=0.9",
            "controller.max_injections=0",
            "eval.method_id=x",
        ] {
            assert_ne!(a.hash(), parse("", &[o]).unwrap().hash(), "{o}");
        }
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn thresholds_accept_absolute_mode() {
        let c = parse(
            "[probe.thresholds]\nmode = \"absolute\"\npresence_min = 0.5\ncontent_max = 0.1\ngrounded_max = -0.2\n",
            &[],
        )
        .unwrap();
        assert!(matches!(c.probe.thresholds, ThresholdSpec::Absolute { .. }));
    }
}
