//! End-to-end tests of the `hvt` binary: file formats, exit codes, output
//! schemas, and reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hvt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hvt"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    hvt()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is utf-8")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr is utf-8")
}

/// Write a point-mass chain model 0 -> 1 -> 0 -> ... (EOS = 2, unreachable).
fn write_chain_model(path: &Path) {
    let json = r#"{
  "type": "table",
  "vocab_size": 3,
  "eos": 2,
  "order": 1,
  "fallback": [1.0, 0.0, 0.0],
  "rows": [
    { "context": [0], "probs": [0.0, 1.0, 0.0] },
    { "context": [1], "probs": [1.0, 0.0, 0.0] }
  ]
}"#;
    std::fs::write(path, json).unwrap();
}

fn write_v3_model(path: &Path, probs: [f64; 3]) {
    let json = format!(
        r#"{{ "type": "table", "vocab_size": 3, "eos": 2, "order": 0,
             "fallback": [{}, {}, {}] }}"#,
        probs[0], probs[1], probs[2]
    );
    std::fs::write(path, json).unwrap();
}

#[test]
fn decode_point_mass_chain_emits_forced_beam() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("m.json");
    write_chain_model(&model);
    let out = run(
        &[
            "decode",
            "--p-model",
            "m.json",
            "--q-model",
            "m.json",
            "--gamma",
            "1",
            "--k",
            "1",
            "--w",
            "1",
            "--max-new-tokens",
            "4",
            "--prompt",
            "0",
            "--seed",
            "1",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let parsed: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(parsed["decoder"], "hvt");
    assert_eq!(
        parsed["beams"][0]["tokens"],
        serde_json::json!([0, 1, 0, 1, 0])
    );
    assert_eq!(parsed["report"]["tokens_emitted"], 4);
}

#[test]
fn every_subcommand_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("p.json");

    let gen_model = [
        "gen-model",
        "--kind",
        "table",
        "--vocab-size",
        "5",
        "--eos",
        "4",
        "--order",
        "1",
        "--seed",
        "3",
        "--eos-prob",
        "0.05",
        "--out",
        "p.json",
    ];
    let first = run(&gen_model, dir.path());
    assert!(first.status.success(), "{}", stderr(&first));
    let model_bytes = std::fs::read(&model).unwrap();
    let second = run(&gen_model, dir.path());
    assert_eq!(stdout(&first), stdout(&second));
    assert_eq!(model_bytes, std::fs::read(&model).unwrap(), "gen-model");

    let gen_corpus = [
        "gen-corpus",
        "--model",
        "p.json",
        "--sequences",
        "4",
        "--max-len",
        "6",
        "--seed",
        "9",
        "--out",
        "c.txt",
    ];
    run(&gen_corpus, dir.path());
    let corpus_bytes = std::fs::read(dir.path().join("c.txt")).unwrap();
    run(&gen_corpus, dir.path());
    assert_eq!(corpus_bytes, std::fs::read(dir.path().join("c.txt")).unwrap(), "gen-corpus");

    let decode = [
        "decode",
        "--p-model",
        "p.json",
        "--q-divergence",
        "0.2",
        "--prompt",
        "0 1",
        "--gamma",
        "2",
        "--k",
        "2",
        "--w",
        "2",
        "--max-new-tokens",
        "6",
        "--seed",
        "11",
    ];
    let a = run(&decode, dir.path());
    let b = run(&decode, dir.path());
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b), "decode");

    let bench_cfg = r#"{
  "p_model": { "path": "p.json" },
  "q_divergence": 0.2,
  "decoders": [ { "kind": "greedy" }, { "kind": "hvt", "config": {} } ],
  "prompts": [[0]],
  "max_new_tokens": 4,
  "trials": 2,
  "seed": 5
}"#;
    std::fs::write(dir.path().join("bench.json"), bench_cfg).unwrap();
    let bench = [
        "bench",
        "--config",
        "bench.json",
        "--out",
        "report.csv",
    ];
    run(&bench, dir.path());
    let report_bytes = std::fs::read(dir.path().join("report.csv")).unwrap();
    run(&bench, dir.path());
    assert_eq!(
        report_bytes,
        std::fs::read(dir.path().join("report.csv")).unwrap(),
        "bench"
    );

    let dist = [
        "dist-test",
        "--decoder",
        "multinomial",
        "--p-model",
        "p.json",
        "--prompt",
        "0",
        "--horizon",
        "2",
        "--samples",
        "10000",
        "--seed",
        "13",
        "--out",
        "dist.json",
    ];
    run(&dist, dir.path());
    let dist_bytes = std::fs::read(dir.path().join("dist.json")).unwrap();
    run(&dist, dir.path());
    assert_eq!(dist_bytes, std::fs::read(dir.path().join("dist.json")).unwrap(), "dist-test");
}

#[test]
fn dist_test_flat_spec_exact_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    write_v3_model(&dir.path().join("p.json"), [0.7, 0.3, 0.0]);
    write_v3_model(&dir.path().join("q.json"), [0.5, 0.5, 0.0]);
    let out = run(
        &[
            "dist-test",
            "--decoder",
            "flat-spec",
            "--p-model",
            "p.json",
            "--q-model",
            "q.json",
            "--prompt",
            "0",
            "--horizon",
            "1",
            "--exact",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let parsed: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(parsed["method"], "exact_enum");
    assert!(parsed["total_variation"].as_f64().unwrap() < 1e-9);
}

#[test]
fn stochastic_commands_require_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    write_v3_model(&dir.path().join("p.json"), [0.5, 0.5, 0.0]);
    let out = run(
        &[
            "decode",
            "--p-model",
            "p.json",
            "--decoder",
            "multinomial",
            "--prompt",
            "0",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("--seed"));

    // Greedy is deterministic and exempt.
    let out = run(
        &["decode", "--p-model", "p.json", "--decoder", "greedy", "--prompt", "0"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));

    // Generation commands are seeded too.
    let out = run(
        &["gen-model", "--kind", "table", "--vocab-size", "4", "--eos", "3", "--out", "m.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let out = run(
        &["gen-corpus", "--model", "p.json", "--sequences", "2", "--out", "c.txt"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["decode", "--bogus-flag"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["not-a-subcommand"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_errors_exit_two_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    write_v3_model(&dir.path().join("p.json"), [0.5, 0.5, 0.0]);
    std::fs::write(
        dir.path().join("bench.json"),
        r#"{ "p_model": { "path": "p.json" }, "q_divergence": 0.1, "decoders": [],
            "prompts": [[0]], "max_new_tokens": 4, "trials": 1, "seed": 1 }"#,
    )
    .unwrap();
    let out = run(&["bench", "--config", "bench.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("decoders"), "{}", stderr(&out));
}

#[test]
fn invalid_model_rows_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.json"),
        r#"{ "type": "table", "vocab_size": 2, "eos": 1, "order": 0,
            "fallback": [0.5, 0.3] }"#,
    )
    .unwrap();
    let out = run(
        &["decode", "--p-model", "bad.json", "--decoder", "greedy", "--prompt", "0"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("0.8"), "{}", stderr(&out));
}

#[test]
fn decode_config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    write_chain_model(&dir.path().join("m.json"));
    std::fs::write(
        dir.path().join("run.json"),
        r#"{ "p_model": "m.json", "q_model": "m.json", "decoder": "hvt",
            "prompt": [0], "gamma": 1, "k": 1, "w": 1,
            "max_new_tokens": 2, "seed": 1 }"#,
    )
    .unwrap();
    // The flag overrides the file's max_new_tokens.
    let out = run(
        &["decode", "--config", "run.json", "--max-new-tokens", "4"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let parsed: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(parsed["report"]["tokens_emitted"], 4);
}

#[test]
fn trace_and_dump_tree_emit_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    write_chain_model(&dir.path().join("m.json"));
    let out = run(
        &[
            "decode",
            "--p-model",
            "m.json",
            "--q-model",
            "m.json",
            "--prompt",
            "0",
            "--gamma",
            "1",
            "--k",
            "1",
            "--w",
            "1",
            "--max-new-tokens",
            "2",
            "--seed",
            "1",
            "--trace",
            "--dump-tree",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let err = stderr(&out);
    let mut saw_verify = false;
    let mut saw_tree = false;
    for line in err.lines() {
        let ev: serde_json::Value = serde_json::from_str(line).expect("each line is JSON");
        match ev["event"].as_str().unwrap() {
            "verify" => saw_verify = true,
            "tree_dump" => saw_tree = true,
            _ => {}
        }
    }
    assert!(saw_verify, "trace must include verify events: {err}");
    assert!(saw_tree, "dump must include tree_dump events: {err}");
}

#[test]
fn bench_writes_json_format_too() {
    let dir = tempfile::tempdir().unwrap();
    write_v3_model(&dir.path().join("p.json"), [0.6, 0.4, 0.0]);
    std::fs::write(
        dir.path().join("bench.json"),
        r#"{ "p_model": { "path": "p.json" }, "q_divergence": 0.0,
            "decoders": [ { "kind": "greedy" } ],
            "prompts": [[0]], "max_new_tokens": 3, "trials": 1, "seed": 2 }"#,
    )
    .unwrap();
    let out = run(
        &["bench", "--config", "bench.json", "--format", "json"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let parsed: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(parsed["rows"][0]["decoder"], "greedy");
    assert_eq!(parsed["rows"][0]["speedup_proxy"]["mean"], 1.0);
}

#[test]
fn gen_model_softmax_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &[
            "gen-model",
            "--kind",
            "softmax",
            "--vocab-size",
            "6",
            "--eos",
            "5",
            "--embed-dim",
            "4",
            "--temperature",
            "0.9",
            "--seed",
            "42",
            "--out",
            "s.json",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(dir.path().join("s.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed["type"], "softmax");
    assert_eq!(parsed["seed"], 42);

    // The generated model file decodes without error.
    let out = run(
        &[
            "decode",
            "--p-model",
            "s.json",
            "--q-divergence",
            "0.1",
            "--prompt",
            "0",
            "--max-new-tokens",
            "4",
            "--seed",
            "1",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn unwritable_output_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    write_v3_model(&dir.path().join("p.json"), [0.5, 0.5, 0.0]);
    let out = run(
        &[
            "gen-corpus",
            "--model",
            "p.json",
            "--sequences",
            "1",
            "--max-len",
            "3",
            "--seed",
            "1",
            "--out",
            "/nonexistent-dir/c.txt",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn workspace_binary_path_exists() {
    assert!(PathBuf::from(env!("CARGO_BIN_EXE_hvt")).exists());
}
