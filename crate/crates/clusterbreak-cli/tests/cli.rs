//! End-to-end smoke test for the binary: train a tiny victim, attack it,
//! and render the report tables, all inside a temp directory.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clusterbreak"))
}

#[test]
fn train_attack_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "n_per_class=8\nk=2\nheight=6\nwidth=6\nseparation=2.0\nseed=3\n\
         recon_epochs=2\nrefine_epochs=1\nbatch_size=8\nmax_batches=5\n",
    )
    .unwrap();

    let status = bin()
        .args(["train-clusterer", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("dataset.json").is_file());
    assert!(out.join("toy.ckpt.json").is_file());

    let status = bin()
        .args(["attack", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .arg("--model")
        .arg(out.join("toy.ckpt.json"))
        .arg("--dataset")
        .arg(out.join("dataset.json"))
        .args(["--epsilon", "1.0"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("generator.json").is_file());
    assert!(out.join("attack.report.json").is_file());

    let output = bin().arg("report").arg("--dir").arg(&out).output().unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8(output.stdout).unwrap();
    let wrote: Vec<&Path> = stdout
        .lines()
        .filter_map(|l| l.strip_prefix("wrote "))
        .map(Path::new)
        .collect();
    assert!(!wrote.is_empty());
    for p in wrote {
        assert!(p.is_file(), "{p:?} missing");
    }
}

#[test]
fn unknown_model_file_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let output = bin()
        .arg("attack")
        .arg("--model")
        .arg(tmp.path().join("missing.ckpt.json"))
        .arg("--dataset")
        .arg(tmp.path().join("missing.json"))
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.starts_with("error:"), "stderr was: {stderr}");
}
