use std::path::Path;
use std::process::{Command, Output};

fn davlab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_davlab"))
        .args(args)
        .current_dir(dir)
        .env("DAV_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path, epochs: usize) -> String {
    let json = ok(&davlab(&["preset", "tiny"], dir));
    let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
    v["epochs"] = epochs.into();
    let path = dir.join("tiny.json");
    std::fs::write(&path, v.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn align_then_resume_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir, 3);
    let stdout = ok(&davlab(&["align", "--config", &cfg, "--out", "run", "--seed", "4"], dir));
    assert!(stdout.contains("3 epochs"), "{stdout}");
    let csv = std::fs::read_to_string(dir.join("run/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().nth(1).unwrap().starts_with("0,"));

    ok(&davlab(
        &["align", "--config", &cfg, "--out", "again", "--seed", "4", "--resume", "run/final.ckpt"],
        dir,
    ));
    assert_eq!(csv, std::fs::read_to_string(dir.join("again/metrics.csv")).unwrap());

    let stdout = ok(&davlab(
        &["eval", "--config", &cfg, "--out", "ev", "--seed", "4", "--resume", "run/final.ckpt", "--samples", "32"],
        dir,
    ));
    assert!(stdout.contains("amortized") && stdout.contains("posterior"), "{stdout}");
    let eval = std::fs::read_to_string(dir.join("ev/eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 3);
    let samples = std::fs::read_to_string(dir.join("ev/samples_posterior.txt")).unwrap();
    assert_eq!(samples.lines().count(), 32);
}

#[test]
fn wrong_seed_cannot_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir, 1);
    ok(&davlab(&["align", "--config", &cfg, "--out", "run"], dir));
    let out = davlab(&["align", "--config", &cfg, "--out", "x", "--seed", "9", "--resume", "run/final.ckpt"], dir);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn pretrain_oracle_and_ablate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = write_config(dir, 2);
    let stdout = ok(&davlab(&["pretrain", "--config", &cfg, "--out", "pre"], dir));
    assert!(stdout.contains("pretrained"));
    assert!(dir.join("pre/pretrained.ckpt").exists());

    let stdout = ok(&davlab(
        &["oracle", "--config", &cfg, "--out", "or", "--repeats", "2000", "--seeds", "4"],
        dir,
    ));
    assert!(stdout.contains("0 failed"), "{stdout}");
    assert!(dir.join("or/oracle.txt").exists());

    ok(&davlab(&["ablate", "--config", &cfg, "--out", "ab"], dir));
    let table = std::fs::read_to_string(dir.join("ab/ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    for v in ["dav", "search_and_distill", "reweight"] {
        assert!(dir.join("ab").join(v).join("metrics.csv").exists(), "{v}");
    }
}

#[test]
fn bad_invocations_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert!(!davlab(&["align"], dir).status.success());
    assert!(!davlab(&["preset", "nope"], dir).status.success());
    let out = davlab(&["oracle", "--preset", "mixture", "--out", "x"], dir);
    assert!(!out.status.success());
    std::fs::write(dir.join("bad.json"), "{\"name\": 3}").unwrap();
    let out = davlab(&["align", "--config", "bad.json"], dir);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));
}
