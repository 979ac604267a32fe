use std::path::Path;
use std::process::Command;

fn occuprobe(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_occuprobe"))
        .args(args)
        .env_remove("OCCUPROBE_OUT")
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

#[test]
fn plan_then_missing_prerequisite() {
    let dir = tempfile::tempdir().unwrap();
    let out = occuprobe(dir.path(), &["plan", "--out", "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let plan = std::fs::read_to_string(dir.path().join("run/plan.json")).unwrap();
    assert!(plan.contains("\"total_calls\": 396000"));

    let out = occuprobe(dir.path(), &["regress", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("run `extract` first"), "{err}");
}

#[test]
fn config_run_and_env_override() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "schemes = [\"base\", \"ethnicity\"]\ncalls_per_variant = 30\nseed = 3\nout = \"ignored\"\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_occuprobe"))
        .args(["run", "--config", "run.toml", "--stage", "plan,generate,extract"])
        .env("OCCUPROBE_OUT", dir.path().join("envout"))
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("envout/extract/matrix.csv").exists());
    assert!(!dir.path().join("ignored").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = occuprobe(dir.path(), &["plan", "--backend", "gopher://x", "--out", "r"]);
    assert_eq!(bad.status.code(), Some(2));
    let unreachable = occuprobe(
        dir.path(),
        &["run", "--stage", "plan,generate", "--backend", "http://127.0.0.1:9", "--out", "r", "--config", "c.toml"],
    );
    // The config file does not exist: i/o failure.
    assert_eq!(unreachable.status.code(), Some(4));
    std::fs::write(dir.path().join("c.toml"), "schemes = [\"base\"]\ncalls_per_variant = 2\n[generation]\nmax_retries = 0\ntimeout_secs = 1\n").unwrap();
    let unreachable = occuprobe(
        dir.path(),
        &["run", "--stage", "plan,generate", "--backend", "http://127.0.0.1:9", "--out", "r", "--config", "c.toml"],
    );
    assert_eq!(unreachable.status.code(), Some(3), "{}", String::from_utf8_lossy(&unreachable.stderr));
}
