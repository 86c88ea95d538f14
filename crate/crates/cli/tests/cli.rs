use std::process::Command;

fn softgrip() -> Command {
    Command::new(env!("CARGO_BIN_EXE_softgrip"))
}

#[test]
fn mesh_writes_obj_and_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let out = softgrip().args(["mesh", "--out"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let obj = std::fs::read_to_string(dir.path().join("mesh.obj")).unwrap();
    assert!(obj.lines().any(|l| l.starts_with("f ")));
    let blocks = std::fs::read_to_string(dir.path().join("blocks.json")).unwrap();
    assert!(blocks.contains("block_ids"));
    assert!(dir.path().join("run_manifest.json").is_file());
}

#[test]
fn report_on_empty_dir_fails_with_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = softgrip().args(["report", "--out"]).arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing artifact"), "{err}");
    assert!(err.contains("train.csv"), "{err}");
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"k0": 5.0}"#).unwrap();
    let out = softgrip().args(["mesh", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("k0"));
}

#[test]
fn seed_flag_overrides_config() {
    let out = softgrip().args(["config", "--seed", "42"]).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"seed\": 42"));
}

#[test]
fn toml_config_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "seed = 7\n[evaluate]\ntrials = 1\n").unwrap();
    let out = softgrip().args(["config", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("\"seed\": 7") && text.contains("\"trials\": 1"));
}
