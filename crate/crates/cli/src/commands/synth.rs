//! `synth`: a small self-contained benchmark for exercising the pipeline
//! against the mock backend.

use std::path::Path;

use lookback_core::backend::mock::SyntheticModel;
use lookback_core::backend::noise::noise_png;
use lookback_core::Difficulty;

use crate::data::Question;
use crate::error::{CliError, CliResult};
use crate::store::write_atomic;

pub const CATEGORIES: [&str; 5] = ["Art", "Biology", "Chemistry", "Math", "Physics"];
const DIFFICULTIES: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

pub struct SynthOpts {
    pub questions: usize,
    pub seed: u64,
    pub passes: u32,
}

pub fn questions(n: usize) -> Vec<Question> {
    (0..n)
        .map(|i| {
            let category = CATEGORIES[i % CATEGORIES.len()];
            let text = format!(
                "Question {i}: Which option best matches the {} figure? (A) first (B) second (C) third (D) fourth",
                category.to_lowercase()
            );
            Question {
                id: format!("q{i:04}"),
                answer: Some(SyntheticModel::answer_for(&text).to_string()),
                text,
                image: Some(format!("images/q{i:04}.png").into()),
                category: category.to_string(),
                difficulty: DIFFICULTIES[i % DIFFICULTIES.len()],
            }
        })
        .collect()
}

fn run_toml(opts: &SynthOpts) -> String {
    format!(
        r#"# Pipeline run against the in-process synthetic backend.
[backend]
kind = "mock"
model_id = "synthetic"
mock_seed = {seed}

[sampling]
n_passes = {passes}
seed = {seed}

[run]
workers = 4

[paths]
questions = "questions.jsonl"
traces = "traces.jsonl"
probes = "probes.jsonl"
curves = "curves.csv"
vocab = "vocab.json"
eval = "eval.jsonl"
reports = "reports"
"#,
        seed = opts.seed,
        passes = opts.passes
    )
}

pub fn run(out: &Path, opts: &SynthOpts) -> CliResult<String> {
    if opts.questions == 0 || opts.passes == 0 {
        return Err(CliError::Config(
            "--questions and --passes must be >= 1".into(),
        ));
    }
    let qs = questions(opts.questions);
    let mut body = String::new();
    for (i, q) in qs.iter().enumerate() {
        let (w, h) = (24 + 8 * (i % 3) as u32, 16 + 8 * (i % 2) as u32);
        let png = noise_png(opts.seed.wrapping_add(1 + i as u64), w, h)
            .map_err(|e| CliError::Other(anyhow::anyhow!("{e}")))?;
        write_atomic(
            &out.join(q.image.as_ref().expect("synthetic questions have images")),
            &png,
        )?;
        body.push_str(&serde_json::to_string(q)?);
        body.push('\n');
    }
    write_atomic(&out.join("questions.jsonl"), body.as_bytes())?;
    write_atomic(&out.join("run.toml"), run_toml(opts).as_bytes())?;
    Ok(format!(
        "synth: {} questions, images and run.toml -> {}",
        qs.len(),
        out.display()
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    #[test]
    fn generated_config_parses() {
        let opts = SynthOpts {
            questions: 3,
            seed: 5,
            passes: 2,
        };
        let cfg = RunConfig::from_toml(&run_toml(&opts), &[], Path::new("/x")).unwrap();
        assert_eq!(cfg.sampling.n_passes, 2);
        assert_eq!(cfg.paths.traces, Path::new("/x/traces.jsonl"));
    }

    #[test]
    fn categories_and_difficulties_cycle() {
        let qs = questions(7);
        assert_eq!(qs[5].category, "Art");
        assert_eq!(qs[4].difficulty, Difficulty::Medium);
        assert!(qs
            .iter()
            .all(|q| q.answer.as_deref().is_some_and(|a| "ABCD".contains(a))));
    }
}
