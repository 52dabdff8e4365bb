//! Command-line pipeline for lookback decoding.
//!
//! `probe` scores traces under three visual contexts, `mine` turns the
//! contrasts into a phrase vocabulary, `decode` runs multi-pass decoding with
//! lookback injection, `eval` and `report` summarize the results. Long
//! running subcommands write resumable outputs; see [`store`] and
//! [`journal`].

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod journal;
pub mod pool;
pub mod store;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use lookback_core::backend::Backend;

pub use config::RunConfig;
pub use error::{CliError, CliResult};

use commands::report::ReportOpts;
use commands::synth::SynthOpts;
use commands::Ctx;

#[derive(Debug, Parser)]
#[command(name = "lookback", version, about = "Lookback decoding pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(short, long)]
    pub config: PathBuf,
    /// Override a config value, e.g. `--set sampling.n_passes=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Report planned work without calling the backend or writing outputs.
    #[arg(long)]
    pub dry_run: bool,
    /// In-flight backend requests.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score traces under real, noise and absent images.
    Probe {
        #[command(flatten)]
        common: Common,
        /// Trace file (default: paths.traces).
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Probe record file (default: paths.probes).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mine pause phrases and lookback templates from probe records.
    Mine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        probes: Option<PathBuf>,
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Vocabulary file (default: paths.vocab).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multi-pass decoding with lookback injection.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Trace file (default: paths.traces).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Method id stamped on the traces.
        #[arg(long)]
        method: Option<String>,
        /// Plain decoding: no injections, no vocabulary needed.
        #[arg(long)]
        no_lookback: bool,
        #[arg(long)]
        n_passes: Option<u32>,
    },
    /// Evaluation records from decoded traces.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Evaluation file (default: paths.eval).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Method id for traces that carry none.
        #[arg(long)]
        method: Option<String>,
    },
    /// Comparison, pass@k, z-score and footprint reports.
    Report {
        #[command(flatten)]
        common: Common,
        /// Evaluation files to combine (default: paths.eval).
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
        /// Output directory (default: paths.reports).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Combine records of a method produced under different configs.
        #[arg(long)]
        force: bool,
        /// Pass@1 from each question's first pass only.
        #[arg(long)]
        first_pass: bool,
        /// Render negative deltas with U+2212.
        #[arg(long)]
        unicode_minus: bool,
    },
    /// Write a synthetic benchmark and a mock-backend config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        questions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        passes: u32,
    },
}

fn load(common: &Common, mut extra: Vec<String>) -> CliResult<RunConfig> {
    let mut overrides = common.set.clone();
    overrides.append(&mut extra);
    let mut cfg = RunConfig::load(&common.config, &overrides)?;
    if let Some(w) = common.workers {
        cfg.run.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

/// Runs a parsed command, building the backend from the config.
pub fn run(cli: &Cli) -> CliResult<String> {
    execute(cli, None)
}

/// Runs a parsed command against `backend` instead of the configured one.
pub fn run_with_backend(cli: &Cli, backend: &dyn Backend) -> CliResult<String> {
    execute(cli, Some(backend))
}

fn execute(cli: &Cli, backend: Option<&dyn Backend>) -> CliResult<String> {
    let set = |p: &Option<PathBuf>, slot: &mut PathBuf| {
        if let Some(p) = p {
            *slot = p.clone();
        }
    };
    match &cli.command {
        Command::Probe {
            common,
            traces,
            out,
        } => {
            let mut cfg = load(common, Vec::new())?;
            set(traces, &mut cfg.paths.traces);
            set(out, &mut cfg.paths.probes);
            commands::probe::run(&Ctx::new(cfg, backend, common.dry_run))
        }
        Command::Mine {
            common,
            probes,
            traces,
            out,
        } => {
            let mut cfg = load(common, Vec::new())?;
            set(probes, &mut cfg.paths.probes);
            set(traces, &mut cfg.paths.traces);
            set(out, &mut cfg.paths.vocab);
            commands::mine::run(&Ctx::new(cfg, backend, common.dry_run))
        }
        Command::Decode {
            common,
            questions,
            vocab,
            out,
            method,
            no_lookback,
            n_passes,
        } => {
            let mut extra = Vec::new();
            if *no_lookback {
                extra.push("controller.max_injections=0".to_string());
            }
            if let Some(m) = method {
                extra.push(format!("eval.method_id={}", quoted(m)));
            }
            if let Some(n) = n_passes {
                extra.push(format!("sampling.n_passes={n}"));
            }
            let mut cfg = load(common, extra)?;
            set(questions, &mut cfg.paths.questions);
            set(vocab, &mut cfg.paths.vocab);
            set(out, &mut cfg.paths.traces);
            commands::decode::run(&Ctx::new(cfg, backend, common.dry_run))
        }
        Command::Eval {
            common,
            traces,
            out,
            method,
        } => {
            let extra = method
                .iter()
                .map(|m| format!("eval.method_id={}", quoted(m)))
                .collect();
            let mut cfg = load(common, extra)?;
            set(traces, &mut cfg.paths.traces);
            set(out, &mut cfg.paths.eval);
            commands::eval::run(&Ctx::new(cfg, backend, common.dry_run))
        }
        Command::Report {
            common,
            inputs,
            out_dir,
            force,
            first_pass,
            unicode_minus,
        } => {
            let mut extra = Vec::new();
            if *first_pass {
                extra.push("eval.pass1_mode=\"first_pass\"".to_string());
            }
            if *unicode_minus {
                extra.push("eval.minus=\"unicode\"".to_string());
            }
            let mut cfg = load(common, extra)?;
            set(out_dir, &mut cfg.paths.reports);
            let opts = ReportOpts {
                inputs: inputs.clone(),
                force: *force,
            };
            commands::report::run(&Ctx::new(cfg, backend, common.dry_run), &opts)
        }
        Command::Synth {
            out,
            questions,
            seed,
            passes,
        } => commands::synth::run(
            out,
            &SynthOpts {
                questions: *questions,
                seed: *seed,
                passes: *passes,
            },
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn decode_flags_parse() {
        let cli = Cli::try_parse_from([
            "lookback",
            "decode",
            "-c",
            "run.toml",
            "--no-lookback",
            "--method",
            "original",
            "--dry-run",
        ])
        .unwrap();
        let Command::Decode {
            no_lookback,
            method,
            common,
            ..
        } = cli.command
        else {
            panic!("wrong subcommand");
        };
        assert!(no_lookback && common.dry_run);
        assert_eq!(method.as_deref(), Some("original"));
    }
}
