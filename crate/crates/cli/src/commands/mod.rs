//! Subcommand implementations. Each returns a human-readable summary.

pub mod decode;
pub mod eval;
pub mod mine;
pub mod probe;
pub mod report;
pub mod synth;

use std::path::{Path, PathBuf};

use lookback_core::backend::http::{HttpBackend, HttpConfig};
use lookback_core::backend::mock::{MockBackend, SyntheticModel};
use lookback_core::backend::{Backend, BackendError};

use crate::config::{BackendKind, RunConfig};
use crate::error::{CliError, CliResult};

/// Everything a subcommand needs besides its own flags.
pub struct Ctx<'a> {
    pub cfg: RunConfig,
    /// Hash of `cfg`, stamped on every output.
    pub hash: String,
    /// Backend to use; built from the config when `None`.
    pub backend: Option<&'a dyn Backend>,
    pub dry_run: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(cfg: RunConfig, backend: Option<&'a dyn Backend>, dry_run: bool) -> Self {
        let hash = cfg.hash();
        Ctx {
            cfg,
            hash,
            backend,
            dry_run,
        }
    }

    /// Runs `f` against the injected backend or one built from the config.
    pub fn with_backend<T>(&self, f: impl FnOnce(&dyn Backend) -> CliResult<T>) -> CliResult<T> {
        match self.backend {
            Some(b) => f(b),
            None => {
                let owned = build_backend(&self.cfg)?;
                f(owned.as_ref())
            }
        }
    }
}

pub fn build_backend(cfg: &RunConfig) -> CliResult<Box<dyn Backend>> {
    let b = &cfg.backend;
    Ok(match b.kind {
        BackendKind::Mock => Box::new(
            MockBackend::new(SyntheticModel::new(b.mock_seed)).with_model_id(b.model_id.clone()),
        ),
        BackendKind::Http => {
            let http = HttpConfig::resolve(b.base_url.as_deref(), b.auth_env_var.as_deref())
                .map_err(|e| CliError::Config(e.to_string()))?;
            Box::new(HttpBackend::new(http))
        }
    })
}

/// Maps a backend failure onto the exit-code classes.
pub fn backend_error(e: &BackendError) -> CliError {
    match e {
        BackendError::Config(m) => CliError::Config(m.clone()),
        other => CliError::Backend(other.to_string()),
    }
}

/// Whether a unit failure should stop scheduling further units.
pub fn is_fatal(e: &BackendError) -> bool {
    matches!(
        e,
        BackendError::Transport { .. } | BackendError::Config(_) | BackendError::Stream { .. }
    )
}

/// `dir/name.ext` → `dir/name.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub(crate) fn resume_hint(done: usize, total: usize) -> String {
    format!("{done} of {total} units complete; rerun the same command to resume")
}
