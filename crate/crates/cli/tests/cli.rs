use std::path::Path;
use std::process::{Command, Output};

fn pocketseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pocketseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn phantom_then_preprocess() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = pocketseg(&["phantom", "--n", "4", "--seed", "9", "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).starts_with("4 phantoms"));
    assert!(data.join("manifest.csv").is_file());

    let desk = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")).unwrap();
    let config = dir.path().join("run.toml");
    let desk = desk
        .replace("../data/phantoms/manifest.csv", "data/manifest.csv")
        .replace("../runs/desk", "work");
    std::fs::write(&config, desk).unwrap();
    let out = pocketseg(&["preprocess", "--config", config.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("derived patch [32, 32, 16]"), "{}", stdout(&out));
    assert!(dir.path().join("work/patch_report.json").is_file());
}

#[test]
fn param_count_table() {
    let out = pocketseg(&["param-count", "--width", "16"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("2\t51810\t102386"), "{text}");
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn errors_exit_nonzero() {
    let out = pocketseg(&["preprocess", "--config", "/nonexistent/run.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    assert!(!pocketseg(&["crossval", "--config", "x.toml", "--stage", "3"]).status.success());
}
