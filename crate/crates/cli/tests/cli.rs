//! Black-box tests of the binary: flags, stdout contract, exit codes,
//! deterministic outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lineage"))
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn write_forge_config(dir: &Path, seed: u64) -> PathBuf {
    let path = dir.join(format!("forge-{seed}.json"));
    fs::write(
        &path,
        format!(
            r#"{{"vocab_size": 32, "hidden": 16, "layers": 2, "head_dim": 4,
                "ffn_dim": 24, "rope_base": 10000.0, "norm_epsilon": 1e-5, "seed": {seed}}}"#
        ),
    )
    .unwrap();
    path
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).trim().to_string()
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("exit code")
}

#[test]
fn compare_file_with_itself_prints_hundred() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_forge_config(dir.path(), 1);
    let out = run(
        &[
            "forge",
            config.to_str().unwrap(),
            dir.path().join("m.bin").to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let m = dir.path().join("m.bin");
    let out = run(
        &["compare", m.to_str().unwrap(), m.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 0);
    assert_eq!(stdout(&out), "100.00");
}

#[test]
fn compare_writes_report_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_forge_config(dir.path(), 2);
    let m = dir.path().join("m.bin");
    run(
        &["forge", config.to_str().unwrap(), m.to_str().unwrap()],
        dir.path(),
    );
    let report_path = dir.path().join("report.json");
    let out = run(
        &[
            "compare",
            m.to_str().unwrap(),
            m.to_str().unwrap(),
            "--out",
            report_path.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 0);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(&report_path).unwrap()).unwrap();
    assert_eq!(report["similarity"], 1.0);
    assert!(report["per_layer"].is_array());
    assert!(report["alignment"]["perm"].is_array());
    assert_eq!(report["shared_vocab_size"], 32);
    let digests = report["manifest"]["input_digests"].as_object().unwrap();
    assert_eq!(digests.len(), 1); // same path twice collapses to one digest
    assert!(report["manifest"]["tool_version"].is_string());
}

#[test]
fn missing_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["compare", "missing.bin", "also-missing.bin"], dir.path());
    assert_eq!(exit_code(&out), 1);
    assert!(!output_stderr(&out).is_empty());
}

fn output_stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).to_string()
}

#[test]
fn forge_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_forge_config(dir.path(), 3);
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    run(
        &["forge", config.to_str().unwrap(), a.to_str().unwrap()],
        dir.path(),
    );
    run(
        &["forge", config.to_str().unwrap(), b.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn forge_rejects_odd_head_dim_and_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    fs::write(
        &config,
        r#"{"vocab_size": 8, "hidden": 4, "layers": 1, "head_dim": 5,
            "ffn_dim": 8, "rope_base": 10000.0, "norm_epsilon": 1e-5, "seed": 0}"#,
    )
    .unwrap();
    let out = run(
        &[
            "forge",
            config.to_str().unwrap(),
            dir.path().join("x.bin").to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 1);
    assert!(output_stderr(&out).contains("head_dim"));
}

#[test]
fn attack_identity_verifies_equivalence() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_forge_config(dir.path(), 4);
    let base = dir.path().join("base.bin");
    run(
        &["forge", config.to_str().unwrap(), base.to_str().unwrap()],
        dir.path(),
    );
    let spec = dir.path().join("identity.json");
    fs::write(&spec, "{}").unwrap();
    let out = run(
        &[
            "attack",
            base.to_str().unwrap(),
            spec.to_str().unwrap(),
            dir.path().join("out.bin").to_str().unwrap(),
            "--verify-equivalence",
        ],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 0, "{}", output_stderr(&out));
}

#[test]
fn attack_full_random_noiseless_verifies_equivalence() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_forge_config(dir.path(), 5);
    let base = dir.path().join("base.bin");
    run(
        &["forge", config.to_str().unwrap(), base.to_str().unwrap()],
        dir.path(),
    );
    let spec = dir.path().join("full.json");
    fs::write(
        &spec,
        r#"{"scale": -2.25, "perm_seed": 50, "sign_seed": 51, "rotation_seed": 52}"#,
    )
    .unwrap();
    let attacked = dir.path().join("attacked.bin");
    let out = run(
        &[
            "attack",
            base.to_str().unwrap(),
            spec.to_str().unwrap(),
            attacked.to_str().unwrap(),
            "--verify-equivalence",
        ],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 0, "{}", output_stderr(&out));

    // and the detector sees through it
    let out = run(
        &[
            "compare",
            base.to_str().unwrap(),
            attacked.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(stdout(&out), "100.00");
}

#[test]
fn lossy_noiseless_attack_fails_equivalence_with_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_forge_config(dir.path(), 6);
    let base = dir.path().join("base.bin");
    run(
        &["forge", config.to_str().unwrap(), base.to_str().unwrap()],
        dir.path(),
    );
    let spec = dir.path().join("prune.json");
    fs::write(&spec, r#"{"prune": {"hidden_keep": 0.5}}"#).unwrap();
    let out = run(
        &[
            "attack",
            base.to_str().unwrap(),
            spec.to_str().unwrap(),
            dir.path().join("pruned.bin").to_str().unwrap(),
            "--verify-equivalence",
        ],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 3, "{}", output_stderr(&out));
}

#[test]
fn attack_pruning_to_two_dims_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_forge_config(dir.path(), 7);
    let base = dir.path().join("base.bin");
    run(
        &["forge", config.to_str().unwrap(), base.to_str().unwrap()],
        dir.path(),
    );
    let spec = dir.path().join("tiny.json");
    fs::write(&spec, r#"{"prune": {"hidden_keep": 0.125}}"#).unwrap();
    let out = run(
        &[
            "attack",
            base.to_str().unwrap(),
            spec.to_str().unwrap(),
            dir.path().join("t.bin").to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 1);
    assert!(output_stderr(&out).contains("at least 4"));
}

fn small_eval_config(dir: &Path) -> PathBuf {
    let path = dir.join("eval.json");
    fs::write(
        &path,
        r#"{"model": {"vocab_size": 32, "hidden": 16, "layers": 2, "head_dim": 4,
                      "ffn_dim": 24, "rope_base": 10000.0, "norm_epsilon": 1e-5, "seed": 200},
            "categories": ["identity"], "noise_levels": [0.0],
            "negatives": 2, "negative_seed": 4000}"#,
    )
    .unwrap();
    path
}

#[test]
fn eval_writes_reports_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_eval_config(dir.path());
    let out1 = dir.path().join("run1");
    let out2 = dir.path().join("run2");
    let output = run(
        &["eval", config.to_str().unwrap(), out1.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(exit_code(&output), 0, "{}", output_stderr(&output));
    let output = run(
        &["eval", config.to_str().unwrap(), out2.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(exit_code(&output), 0);

    for file in ["report.json", "roc.csv", "scores.csv"] {
        let a = fs::read(out1.join(file)).unwrap();
        let b = fs::read(out2.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between reruns");
    }
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(out1.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["auc"], 1.0);
    let scores = fs::read_to_string(out1.join("scores.csv")).unwrap();
    assert!(scores.starts_with("pair_id,label,category,similarity,error\n"));
    assert_eq!(scores.lines().count(), 4); // header + 1 positive + 2 negatives
}

#[test]
fn eval_with_no_positives_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("empty.json");
    fs::write(
        &config,
        r#"{"model": {"vocab_size": 32, "hidden": 16, "layers": 2, "head_dim": 4,
                      "ffn_dim": 24, "rope_base": 10000.0, "norm_epsilon": 1e-5, "seed": 1},
            "categories": [], "noise_levels": [0.0], "negatives": 2, "negative_seed": 2}"#,
    )
    .unwrap();
    let out = run(
        &[
            "eval",
            config.to_str().unwrap(),
            dir.path().join("o").to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn unknown_subcommand_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["frobnicate"], dir.path());
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn thread_cap_env_var_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_eval_config(dir.path());
    let out_dir = dir.path().join("capped");
    let output = bin()
        .args(["eval", config.to_str().unwrap(), out_dir.to_str().unwrap()])
        .env("FINGERPRINT_THREADS", "1")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    // single-threaded run produces the same bytes as the default pool
    let free = dir.path().join("free");
    let output = bin()
        .args(["eval", config.to_str().unwrap(), free.to_str().unwrap()])
        .env("FINGERPRINT_THREADS", "0")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    assert_eq!(
        fs::read(out_dir.join("report.json")).unwrap(),
        fs::read(free.join("report.json")).unwrap()
    );
}
