use std::path::Path;
use std::process::{Command, Output};

fn gdec(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gdec"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn unreachable_bridge_exits_with_protocol_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = gdec(
        &[
            "decode",
            "--source",
            "bridge",
            "--endpoint",
            "tcp:127.0.0.1:1",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let out = gdec(
        &[
            "decode",
            "--source",
            "bridge",
            "--endpoint",
            "stdio:/nonexistent/bridge",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn bridge_subprocess_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_gdec");
    let endpoint = format!("stdio:{bin} serve-mock --seed 4 --set source.vocab_size=16");
    let out = gdec(
        &[
            "decode",
            "--source",
            "bridge",
            "--endpoint",
            &endpoint,
            "--seed",
            "4",
            "--set",
            "source.vocab_size=16",
            "--max-tokens",
            "10",
            "--out",
            "b",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = gdec(
        &[
            "decode",
            "--seed",
            "4",
            "--set",
            "source.vocab_size=16",
            "--max-tokens",
            "10",
            "--out",
            "m",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let steps = |p: &str| {
        let text = std::fs::read_to_string(dir.path().join(p)).unwrap();
        text.lines().skip(1).map(String::from).collect::<Vec<_>>()
    };
    assert_eq!(steps("b/0.trace.jsonl"), steps("m/0.trace.jsonl"));
    assert_eq!(steps("m/0.trace.jsonl").len(), 10);
}

#[test]
fn missing_annotation_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("lex.json"), r#"{"dog": []}"#).unwrap();
    std::fs::write(d.join("ann.json"), r#"{"1": ["dog"]}"#).unwrap();
    std::fs::write(
        d.join("caps.jsonl"),
        "{\"image_id\": 2, \"text\": \"a dog\"}\n",
    )
    .unwrap();
    let out = gdec(
        &[
            "eval-chair",
            "--set",
            "chair.lexicon=lex.json",
            "--set",
            "chair.annotations=ann.json",
            "--set",
            "chair.captions=caps.jsonl",
        ],
        d,
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));

    // an empty captions file is not an error
    std::fs::write(d.join("caps.jsonl"), "").unwrap();
    let out = gdec(
        &[
            "eval-chair",
            "--set",
            "chair.lexicon=lex.json",
            "--set",
            "chair.annotations=ann.json",
            "--set",
            "chair.captions=caps.jsonl",
        ],
        d,
    );
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["report"]["chair"]["captions"], 0);
    assert_eq!(report["report"]["chair"]["chair_i"], 0.0);
}

#[test]
fn malformed_input_line_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("q.jsonl"),
        "{\"id\":1,\"split\":\"random\",\"object\":\"dog\",\"gold\":true}\n{oops\n",
    )
    .unwrap();
    std::fs::write(d.join("a.jsonl"), "{\"id\":1,\"text\":\"yes\"}\n").unwrap();
    let out = gdec(
        &[
            "eval-pope",
            "--set",
            "pope.questions=q.jsonl",
            "--set",
            "pope.answers=a.jsonl",
        ],
        d,
    );
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("q.jsonl:2"));
}

#[test]
fn all_zero_series_is_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    // uniform mock: conditioned and unconditioned frames coincide, so PDM is 0
    let out = gdec(&["decode", "--max-tokens", "20", "--out", "t"], dir.path());
    assert!(out.status.success());
    let out = gdec(&["estimate-lambda", "t/0.trace.jsonl"], dir.path());
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = gdec(&["decode", "--alpha", "2"], dir.path());
    assert_eq!(code(&out), 1);
    let out = gdec(&["decode", "--set", "decoder.alhpa=0.2"], dir.path());
    assert_eq!(code(&out), 1);
    let out = gdec(&["gen-prefs"], dir.path());
    assert_eq!(
        code(&out),
        1,
        "gen-prefs requires an m3id preferred decoder"
    );
}

#[test]
fn simulate_writes_report_and_position_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = gdec(
        &[
            "simulate",
            "--set",
            "simulate.n_runs=2",
            "--set",
            "simulate.spec.horizon=30",
            "--out",
            "sim.json",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sim.json")).unwrap())
            .unwrap();
    let arms = report["report"]["arms"].as_array().unwrap();
    assert_eq!(arms.len(), 2);
    assert_eq!(arms[0]["label"], "greedy");
    assert_eq!(arms[1]["label"], "m3id");
    let csv = std::fs::read_to_string(dir.path().join("sim.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 30);
}
