mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::*;
use lookback_cli::data::{EvalLine, Question, TraceLine};
use lookback_cli::CliError;
use lookback_core::backend::mock::{MockBackend, ScriptedModel};
use lookback_core::{Difficulty, EvalRecord, Phase, PhraseVocabulary, ThinkingTrace, TraceToken};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lookback"))
}

#[test]
fn probe_makes_one_call_per_trace_and_context_and_resumes_for_free() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 2, 1);
    let m = mock();
    run(&["decode", "-c", s(&cfg), "--no-lookback"], &m).unwrap();
    assert_eq!(lines(&dir.path().join("traces.jsonl")).len(), 2);

    let m = mock();
    let out = run(&["probe", "-c", s(&cfg)], &m).unwrap();
    assert_eq!(m.score_calls(), 6, "{out}");
    assert_eq!(m.generate_calls(), 0);
    let thinking: usize = traces(&dir.path().join("traces.jsonl"))
        .iter()
        .map(|t| {
            t.trace
                .tokens
                .iter()
                .filter(|k| k.phase == Phase::Thinking)
                .count()
        })
        .sum();
    assert_eq!(lines(&dir.path().join("probes.jsonl")).len(), thinking);
    assert!(dir.path().join("curves.csv").exists());
    assert!(dir.path().join("curves_raw.csv").exists());
    assert!(dir.path().join("curves.csv.meta.json").exists());

    let m = mock();
    run(&["probe", "-c", s(&cfg)], &m).unwrap();
    assert_eq!(m.score_calls(), 0);
}

#[test]
fn corrupted_output_refuses_to_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 2, 2);
    run(&["decode", "-c", s(&cfg), "--no-lookback"], &mock()).unwrap();
    let path = dir.path().join("traces.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    fs::write(
        &path,
        text.replacen("\"pass_index\":0", "\"pass_index\":9", 1),
    )
    .unwrap();
    let err = run(&["decode", "-c", s(&cfg), "--no-lookback"], &mock()).unwrap_err();
    assert!(err.to_string().contains("refusing to resume"), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn changed_config_refuses_to_append() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 1, 1);
    run(&["decode", "-c", s(&cfg), "--no-lookback"], &mock()).unwrap();
    let err = run(
        &[
            "decode",
            "-c",
            s(&cfg),
            "--no-lookback",
            "--set",
            "sampling.temperature=0.9",
        ],
        &mock(),
    )
    .unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err}");
}

#[test]
fn decode_writes_every_pass_and_omits_branching_when_disabled() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 3, 10);
    run(&["decode", "-c", s(&cfg), "--no-lookback"], &mock()).unwrap();
    let path = dir.path().join("traces.jsonl");
    let raw = lines(&path);
    assert_eq!(raw.len(), 30);
    assert!(raw.iter().all(|l| !l.contains("\"branching\"")));
    let ts = traces(&path);
    let mut keys: Vec<String> = ts.iter().map(|t| t.trace.key()).collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), 30);
    let mut seeds: Vec<u64> = ts.iter().map(|t| t.seed.unwrap()).collect();
    seeds.sort();
    seeds.dedup();
    assert_eq!(seeds.len(), 30, "pass seeds are distinct");
    assert!(ts
        .iter()
        .all(|t| t.trace.correct.is_some() && t.decode.as_ref().unwrap().injections.is_empty()));
}

#[test]
fn decode_with_branching_logs_branches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 2, 1);
    let vocab = PhraseVocabulary::new(Vec::new(), Vec::new(), vec!["hmm".into(), "wait".into()]);
    fs::write(dir.path().join("vocab.json"), vocab.to_json()).unwrap();
    let m = mock();
    run(
        &[
            "decode",
            "-c",
            s(&cfg),
            "--set",
            "branching.enabled=true",
            "--set",
            "branching.H=8",
        ],
        &m,
    )
    .unwrap();
    let ts = traces(&dir.path().join("traces.jsonl"));
    let injected: usize = ts
        .iter()
        .map(|t| t.decode.as_ref().unwrap().injections.len())
        .sum();
    let branched: usize = ts
        .iter()
        .map(|t| t.decode.as_ref().unwrap().branching.len())
        .sum();
    assert!(injected > 0);
    assert_eq!(injected, branched);
    assert!(
        m.score_calls() > 0,
        "branch scoring uses the score endpoint"
    );
}

#[test]
fn mining_is_byte_deterministic() {
    let mut vocabs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let cfg = synth(dir.path(), 10, 2);
        run(&["decode", "-c", s(&cfg), "--no-lookback"], &mock()).unwrap();
        run(&["probe", "-c", s(&cfg), "--workers", "3"], &mock()).unwrap();
        run(&["mine", "-c", s(&cfg)], &mock()).unwrap();
        vocabs.push(fs::read_to_string(dir.path().join("vocab.json")).unwrap());
    }
    assert!(
        vocabs[0] == vocabs[1],
        "vocabularies differ:\n{}\n---\n{}",
        vocabs[0],
        vocabs[1]
    );
    let v = PhraseVocabulary::from_json(&vocabs[0]).unwrap();
    assert!(
        v.seed_markers.contains(&"hmm".to_string()) && v.seed_markers.contains(&"wait".to_string())
    );
}

fn token(text: &str, phase: Phase) -> TraceToken {
    TraceToken {
        text: text.into(),
        logprob: -0.5,
        phase,
        injected: false,
    }
}

#[test]
fn no_flagged_steps_yield_a_seed_only_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 2, 1);
    let qs: Vec<Question> = lines(&dir.path().join("questions.jsonl"))
        .iter()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let mut body = String::new();
    for q in &qs {
        let trace = ThinkingTrace {
            question_id: q.id.clone(),
            pass_index: 0,
            tokens: vec![
                token("hmm", Phase::Thinking),
                token(" the", Phase::Thinking),
                token(" area", Phase::Thinking),
                token("</think>", Phase::Answer),
                token(" A", Phase::Answer),
            ],
            correct: Some(true),
            model_id: "m".into(),
            category: q.category.clone(),
            difficulty: q.difficulty,
        };
        let line = TraceLine {
            config_hash: String::new(),
            method_id: String::new(),
            seed: None,
            trace,
            answer: None,
            decode: None,
        };
        body.push_str(&serde_json::to_string(&line).unwrap());
        body.push('\n');
    }
    fs::write(dir.path().join("traces.jsonl"), body).unwrap();

    let flat = MockBackend::new(ScriptedModel::new().default_logprob(-1.0));
    let absolute =
        "probe.thresholds={mode=\"absolute\",presence_min=0.5,content_max=0.1,grounded_max=-0.2}";
    run(&["probe", "-c", s(&cfg), "--set", absolute], &flat).unwrap();
    assert_eq!(flat.score_calls(), 6);
    let summary = run(&["mine", "-c", s(&cfg), "--set", absolute], &flat).unwrap();
    assert!(summary.contains("0 presence-sensitive"), "{summary}");
    let v =
        PhraseVocabulary::from_json(&fs::read_to_string(dir.path().join("vocab.json")).unwrap())
            .unwrap();
    assert!(v.pause_phrases.is_empty() && v.lookback_templates.is_empty());
    assert_eq!(v.seed_markers, vec!["hmm".to_string(), "wait".to_string()]);
}

#[test]
fn quantile_thresholds_need_enough_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 1, 1);
    let qs = lines(&dir.path().join("questions.jsonl"));
    let q: Question = serde_json::from_str(&qs[0]).unwrap();
    let line = TraceLine {
        config_hash: String::new(),
        method_id: String::new(),
        seed: None,
        trace: ThinkingTrace {
            question_id: q.id,
            pass_index: 0,
            tokens: vec![token("hmm", Phase::Thinking), token(" x", Phase::Thinking)],
            correct: Some(true),
            model_id: "m".into(),
            category: String::new(),
            difficulty: Difficulty::Easy,
        },
        answer: None,
        decode: None,
    };
    fs::write(
        dir.path().join("traces.jsonl"),
        serde_json::to_string(&line).unwrap() + "\n",
    )
    .unwrap();
    let m = MockBackend::new(ScriptedModel::new().default_logprob(-1.0));
    run(&["probe", "-c", s(&cfg)], &m).unwrap();
    let err = run(&["mine", "-c", s(&cfg)], &m).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
    assert!(err.to_string().contains("absolute"), "{err}");
}

fn eval_line(method: &str, hash: &str, q: usize, pass: u32, correct: bool, total: u64) -> EvalLine {
    EvalLine {
        config_hash: hash.into(),
        record: EvalRecord {
            question_id: format!("q{q}"),
            category: ["Art", "Math"][q % 2].into(),
            difficulty: Difficulty::Easy,
            pass_index: pass,
            correct,
            total_tokens: total,
            thinking_tokens: total / 2,
            method_id: method.into(),
        },
    }
}

fn write_eval(path: &Path, lines: &[EvalLine]) {
    let body: String = lines
        .iter()
        .map(|l| serde_json::to_string(l).unwrap() + "\n")
        .collect();
    fs::write(path, body).unwrap();
}

#[test]
fn self_comparison_has_zero_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 1, 1);
    let mut ls = Vec::new();
    for q in 0..6 {
        for p in 0..3 {
            let correct = (q + p as usize) % 3 != 0;
            ls.push(eval_line("ours", "h1", q, p, correct, 100 + q as u64));
            ls.push(eval_line("original", "h2", q, p, correct, 100 + q as u64));
        }
    }
    write_eval(&dir.path().join("eval.jsonl"), &ls);
    let out = run(&["report", "-c", s(&cfg)], &mock()).unwrap();
    let table = fs::read_to_string(dir.path().join("reports/comparison.txt")).unwrap();
    assert!(out.contains("Overall"));
    for row in table.lines().skip(2) {
        assert!(row.contains("(+0.0)"), "{row}");
        assert!(row.contains("100.0(+0.0)"), "{row}");
    }
    for name in [
        "passk.csv",
        "zscores.csv",
        "footprint_total.csv",
        "footprint_thinking.csv",
        "manifest.json",
    ] {
        assert!(dir.path().join("reports").join(name).exists(), "{name}");
    }
    let z = fs::read_to_string(dir.path().join("reports/zscores.csv")).unwrap();
    assert!(
        z.lines().skip(1).all(|l| l.ends_with("true")),
        "equal methods give degenerate rows:\n{z}"
    );
}

#[test]
fn mixed_config_hashes_need_force() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 1, 1);
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    write_eval(
        &a,
        &[
            eval_line("ours", "h1", 0, 0, true, 10),
            eval_line("original", "h0", 0, 0, true, 20),
        ],
    );
    write_eval(
        &b,
        &[
            eval_line("ours", "h2", 1, 0, false, 10),
            eval_line("original", "h0", 1, 0, true, 20),
        ],
    );
    let args = ["report", "-c", s(&cfg), "--input", s(&a), "--input", s(&b)];
    let err = run(&args, &mock()).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
    assert!(err.to_string().contains("--force"));
    let mut forced = args.to_vec();
    forced.push("--force");
    run(&forced, &mock()).unwrap();
}

#[test]
fn question_coverage_mismatch_is_a_coverage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 1, 1);
    write_eval(
        &dir.path().join("eval.jsonl"),
        &[
            eval_line("ours", "h", 0, 0, true, 1),
            eval_line("original", "g", 1, 0, true, 1),
        ],
    );
    let err = run(&["report", "-c", s(&cfg)], &mock()).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn dry_run_counts_pending_work_without_calls() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 3, 2);
    let m = mock();
    let out = run(&["decode", "-c", s(&cfg), "--no-lookback", "--dry-run"], &m).unwrap();
    assert!(out.contains("6 pending"), "{out}");
    assert_eq!(m.call_log().len(), 0);
    assert!(!dir.path().join("traces.jsonl").exists());

    run(&["decode", "-c", s(&cfg), "--no-lookback"], &m).unwrap();
    let out = run(
        &[
            "decode",
            "-c",
            s(&cfg),
            "--no-lookback",
            "--dry-run",
            "--n-passes",
            "3",
        ],
        &m,
    )
    .unwrap();
    assert!(out.contains("3 pending"), "{out}");
    let out = run(&["probe", "-c", s(&cfg), "--dry-run"], &m).unwrap();
    assert!(out.contains("18 score calls planned"), "{out}");
    assert_eq!(m.score_calls(), 0);
}

#[test]
fn adding_passes_resumes_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 2, 2);
    run(&["decode", "-c", s(&cfg), "--no-lookback"], &mock()).unwrap();
    let before = lines(&dir.path().join("traces.jsonl"));
    let m = mock();
    run(
        &["decode", "-c", s(&cfg), "--no-lookback", "--n-passes", "3"],
        &m,
    )
    .unwrap();
    let after = lines(&dir.path().join("traces.jsonl"));
    assert_eq!(after.len(), 6);
    assert_eq!(&after[..4], &before[..]);
    assert_eq!(m.generate_calls(), 2);
}

#[test]
fn missing_image_skips_the_question() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 2, 2);
    fs::remove_file(dir.path().join("images/q0000.png")).unwrap();
    let out = run(&["decode", "-c", s(&cfg), "--no-lookback"], &mock()).unwrap();
    assert!(out.contains("2 skipped"), "{out}");
    assert_eq!(lines(&dir.path().join("traces.jsonl")).len(), 2);
}

#[test]
fn backend_failure_exits_3_and_resume_completes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 4, 2);
    let m = mock();
    m.fail_after_calls(3);
    let err = run(
        &["decode", "-c", s(&cfg), "--no-lookback", "--workers", "1"],
        &m,
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    assert!(err.to_string().contains("resume"), "{err}");
    m.clear_faults();
    run(
        &["decode", "-c", s(&cfg), "--no-lookback", "--workers", "1"],
        &m,
    )
    .unwrap();
    assert_eq!(lines(&dir.path().join("traces.jsonl")).len(), 8);
    assert!(duplicate_calls(&m.call_log()).is_empty());
}

#[test]
fn eval_derives_records_from_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 2, 3);
    run(
        &[
            "decode",
            "-c",
            s(&cfg),
            "--no-lookback",
            "--method",
            "original",
        ],
        &mock(),
    )
    .unwrap();
    run(&["eval", "-c", s(&cfg)], &mock()).unwrap();
    let ts = traces(&dir.path().join("traces.jsonl"));
    let evs: Vec<EvalLine> = lines(&dir.path().join("eval.jsonl"))
        .iter()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(evs.len(), ts.len());
    for e in &evs {
        let t = ts
            .iter()
            .find(|t| {
                t.trace.question_id == e.record.question_id
                    && t.trace.pass_index == e.record.pass_index
            })
            .unwrap();
        assert_eq!(e.config_hash, t.config_hash);
        assert_eq!(e.record.method_id, "original");
        assert_eq!(Some(e.record.correct), t.trace.correct);
        assert_eq!(e.record.thinking_tokens as usize, t.trace.thinking_tokens());
        assert!(e.record.thinking_tokens <= e.record.total_tokens);
    }
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth(dir.path(), 1, 1);

    let st = bin()
        .args(["decode", "-c", "/nonexistent/run.toml"])
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(2));

    let st = bin()
        .args(["decode", "-c", s(&cfg), "--set", "sampling.n_passes=0"])
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(2));

    let st = bin()
        .args(["decode", "-c", s(&cfg), "--set", "bogus.key=1"])
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(2));

    let st = bin()
        .args([
            "decode",
            "-c",
            s(&cfg),
            "--no-lookback",
            "--set",
            "backend.kind=\"http\"",
        ])
        .args([
            "--set",
            "backend.base_url=\"http://127.0.0.1:9\"",
            "--workers",
            "1",
        ])
        .args(["--out", s(&dir.path().join("http.jsonl"))])
        .output()
        .unwrap();
    assert_eq!(
        st.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&st.stderr)
    );

    let a = dir.path().join("mixed.jsonl");
    write_eval(
        &a,
        &[
            eval_line("ours", "h1", 0, 0, true, 1),
            eval_line("ours", "h2", 0, 1, true, 1),
        ],
    );
    let st = bin()
        .args(["report", "-c", s(&cfg), "--input", s(&a)])
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(4));

    let st = bin()
        .args(["decode", "-c", s(&cfg), "--no-lookback", "--dry-run"])
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&st.stdout).contains("1 pending"));
}
