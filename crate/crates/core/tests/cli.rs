use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tkgqa::pipeline::PipelineConfig;

fn tkgqa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tkgqa"))
        .args(args)
        .current_dir(dir)
        .env_remove("TKGQA_EVENTS")
        .env_remove("TKGQA_KG_DIR")
        .env_remove("TKGQA_QUESTIONS_DIR")
        .env_remove("TKGQA_CHECKPOINTS")
        .env_remove("TKGQA_REPORTS")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = tkgqa(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_seed_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tkgqa(dir.path(), &["synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("seed"));
    fs::write(dir.path().join("c.toml"), "[qa]\ndim = 8\n").unwrap();
    let out = tkgqa(dir.path(), &["-c", "c.toml", "synth"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_values_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "seed = 1\n[mhs]\ngamma = 0.0\n").unwrap();
    let out = tkgqa(dir.path(), &["-c", "c.toml", "synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("mhs.gamma"), "{}", stderr(&out));
    fs::write(dir.path().join("d.toml"), "seed = 1\nbogus = 3\n").unwrap();
    assert_eq!(
        tkgqa(dir.path(), &["-c", "d.toml", "synth"]).status.code(),
        Some(2)
    );
}

#[test]
fn print_config_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["print-config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(
        PipelineConfig::from_toml(&text).unwrap(),
        PipelineConfig::default()
    );
}

#[test]
fn missing_artifacts_name_their_producer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (cmd, producer) in [
        ("ingest", "synth"),
        ("split", "ingest"),
        ("train-tkg", "ingest"),
        ("eval", "genq"),
    ] {
        let out = tkgqa(d, &["--seed", "0", cmd]);
        assert_eq!(out.status.code(), Some(2), "{cmd}");
        assert!(
            stderr(&out).contains(&format!("run `tkgqa {producer}` first")),
            "{cmd}: {}",
            stderr(&out)
        );
    }
}

#[test]
fn staged_pipeline_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for cmd in [
        "synth",
        "ingest",
        "split",
        "train-tkg",
        "infer-reps",
        "genq",
    ] {
        ok(d, &["--seed", "0", cmd]);
    }
    // evaluation before the QA models exist
    let out = tkgqa(d, &["--seed", "0", "eval"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("run `tkgqa train-qa` first"),
        "{}",
        stderr(&out)
    );

    // the multi-hop scorer needs an explicit opt-in
    let out = tkgqa(d, &["--seed", "0", "mhs"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("cheating"));

    let reps = d.join("checkpoints/reps.bin");
    let before = fs::read(&reps).unwrap();
    ok(d, &["--seed", "0", "train-qa", "--family", "epq"]);
    assert_eq!(
        fs::read(&reps).unwrap(),
        before,
        "QA training must not touch the representations"
    );

    let curve: Value =
        serde_json::from_str(&fs::read_to_string(d.join("checkpoints/qa-epq.curve.json")).unwrap())
            .unwrap();
    let loss: Vec<f64> = curve["loss_curve"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!(loss.last().unwrap() < loss.first().unwrap(), "{loss:?}");

    // only the EPQ model exists, so a full evaluation still names train-qa
    let out = tkgqa(d, &["--seed", "0", "eval"]);
    assert_eq!(out.status.code(), Some(2));

    let manifest: Value = serde_json::from_str(
        &fs::read_to_string(d.join("checkpoints/train-qa.manifest.json")).unwrap(),
    )
    .unwrap();
    let inputs = manifest["inputs"].as_array().unwrap();
    assert!(inputs.iter().any(|i| i["path"] == "checkpoints/reps.bin"));
    assert!(inputs
        .iter()
        .all(|i| i["sha256"].as_str().unwrap().len() == 64));
}
