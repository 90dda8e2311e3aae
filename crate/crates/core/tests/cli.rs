//! End-to-end runs of the `sra` binary on a toy configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sra"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sra(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TOY: &str = r#"
seed = 2
[model]
preset = "toy"
[dataset]
num = 64
size = 8
[train]
batch_size = 8
total_steps = 4
checkpoint_every = 2
learning_rate = 0.001
[sra]
student_layer = 1
teacher_layer = 2
ema = { kind = "constant", alpha = 0.9 }
[analysis]
probe_samples = 40
"#;

fn write_config(dir: &Path) -> String {
    let p = dir.join("toy.toml");
    fs::write(&p, TOY).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn train_sample_probe_analyze_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let run = tmp.path().join("run");
    let run_s = run.to_string_lossy().into_owned();
    ok(&["train", "--config", &cfg, "--output", &run_s]);
    for f in ["config.toml", "metrics.jsonl", "final.ckpt", "checkpoints/step_00000002.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    // The resolved config replays to itself.
    let resolved = fs::read_to_string(run.join("config.toml")).unwrap();
    let replay = tmp.path().join("replay.toml");
    fs::write(&replay, &resolved).unwrap();
    let again = tmp.path().join("again");
    ok(&[
        "train",
        "--config",
        replay.to_str().unwrap(),
        "--output",
        again.to_str().unwrap(),
    ]);
    assert_eq!(fs::read(run.join("final.ckpt")).unwrap(), fs::read(again.join("final.ckpt")).unwrap());

    // Reusing a directory needs --resume; resuming a finished run is a no-op.
    assert!(!sra(&["train", "--config", &cfg, "--output", &run_s]).status.success());
    ok(&["train", "--config", &cfg, "--output", &run_s, "--resume"]);
    assert_eq!(fs::read(run.join("final.ckpt")).unwrap(), fs::read(again.join("final.ckpt")).unwrap());

    let ckpt = run.join("final.ckpt");
    let ckpt_s = ckpt.to_str().unwrap();
    let samples = tmp.path().join("samples");
    ok(&[
        "sample", "--checkpoint", ckpt_s, "--class", "1", "--num", "5", "--guidance", "2.0", "--steps", "8", "--out",
        samples.to_str().unwrap(),
    ]);
    assert!(samples.join("samples.sra").exists() && samples.join("samples.png").exists());

    let probe = ok(&[
        "probe", "--checkpoint", ckpt_s, "--layers", "1,2", "--timesteps", "0,0.5", "--epochs", "2", "--out",
        tmp.path().join("probe").to_str().unwrap(),
    ]);
    // Header plus student and teacher rows for 2 layers x 2 timesteps.
    assert_eq!(probe.lines().count(), 1 + 8, "{probe}");

    let analysis = tmp.path().join("analysis");
    ok(&["analyze", "--checkpoint", ckpt_s, "--epochs", "2", "--out", analysis.to_str().unwrap()]);
    for f in ["probe.csv", "probe.json", "pca.csv", "pca.sra"] {
        assert!(analysis.join(f).exists(), "{f}");
    }

    let table = ok(&[
        "compare", "--run-a", &run_s, "--run-b", again.to_str().unwrap(), "--num", "32", "--steps", "4", "--epochs", "2",
    ]);
    let mut rows = 0;
    for line in table.lines().skip(1) {
        let delta: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(delta, 0.0, "{line}");
        rows += 1;
    }
    assert!(rows >= 3, "{table}");
}

#[test]
fn baseline_flag_and_data_generation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("shapes.sra");
    ok(&["generate-data", "--num", "16", "--size", "8", "--out", data.to_str().unwrap()]);
    assert!(data.exists());
    let run = tmp.path().join("base");
    ok(&["train", "--config", &cfg, "--baseline", "--output", run.to_str().unwrap()]);
    let resolved = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(!resolved.contains("[sra]"), "{resolved}");
}

#[test]
fn bad_invocations_fail() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(sra(&["train", "--config", "x.toml", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(sra(&["train"]).status.code(), Some(2));
    let missing = tmp.path().join("missing.toml");
    assert_eq!(sra(&["train", "--config", missing.to_str().unwrap()]).status.code(), Some(1));
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[sra]\nstudent_layer = 9\n").unwrap();
    let out = sra(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    assert_eq!(sra(&["sample", "--checkpoint", missing.to_str().unwrap()]).status.code(), Some(1));
}
