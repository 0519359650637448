use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dgquant_core::checkpoint::tensor_names;

const TINY: &str = "\
channels = 8
codes = 8
encoder_depth = 2
encoder_width = 4
decoder_width = 4
image_size = 16
epochs = 2
folds = 2
";

fn dgquant(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgquant"))
        .args(args)
        .env_remove("DGQUANT_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn err(out: Output) -> String {
    assert!(!out.status.success(), "expected failure: {}", String::from_utf8_lossy(&out.stdout));
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(dgquant(&["synth", "--out", s(&data), "--count", "5", "--size", "16", "--seed", "3"]));
    data
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join(format!("cfg{}.txt", extra.len()));
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn train(dir: &Path, data: &Path, cfg: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["train", "--data", s(data), "--holdout", "domain0", "--config", s(cfg), "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(dgquant(&args));
    out
}

#[test]
fn synth_layout_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    for d in ["domain0", "domain1", "domain2"] {
        assert_eq!(fs::read_dir(data.join(d).join("images")).unwrap().count(), 5);
        assert_eq!(fs::read_dir(data.join(d).join("masks")).unwrap().count(), 5);
    }
    let e = err(dgquant(&["synth", "--out", s(&data), "--count", "5", "--size", "16"]));
    assert!(e.contains("--force"), "{e}");
    let again = dir.path().join("again");
    ok(dgquant(&["synth", "--out", s(&again), "--count", "5", "--size", "16", "--seed", "3"]));
    let mask = |root: &Path| fs::read(root.join("domain1/masks/0002.png")).unwrap();
    assert_eq!(mask(&data), mask(&again));
    let one = dir.path().join("one");
    assert!(err(dgquant(&["synth", "--out", s(&one), "--domains", "1"])).contains("at least 2"));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let run = Command::new(env!("CARGO_BIN_EXE_dgquant"))
            .args(["synth", "--out", s(&out), "--count", "2", "--size", "16"])
            .env("DGQUANT_SEED", seed)
            .output()
            .unwrap();
        assert!(run.status.success());
        fs::read(out.join("domain0/images/0000.png")).unwrap()
    };
    assert_eq!(run("a", "7"), run("b", "7"));
    assert_ne!(run("c", "7"), run("d", "8"));
}

#[test]
fn train_eval_report_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg = write_config(dir.path(), "");
    let full = train(dir.path(), &data, &cfg, "full", &["--seed", "1"]);
    let base = train(dir.path(), &data, &cfg, "base", &["--seed", "1", "--baseline"]);
    for run in [&full, &base] {
        assert!(run.join("best.dgq").is_file());
        assert_eq!(fs::read_to_string(run.join("log.ndjson")).unwrap().lines().count(), 2);
    }
    assert!(tensor_names(&full.join("best.dgq")).unwrap().iter().any(|n| n.starts_with("codebook")));
    assert!(tensor_names(&base.join("best.dgq")).unwrap().iter().all(|n| !n.starts_with("codebook")));

    let eval = |run: &Path, out: &str, extra: &[&str]| {
        let out = dir.path().join(out);
        let ckpt = run.join("best.dgq");
        let mut args = vec!["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--domain", "domain0", "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(dgquant(&args));
        out
    };
    let e1 = eval(&full, "e1", &["--overlays"]);
    let e2 = eval(&full, "e2", &[]);
    let json = |p: &Path| fs::read_to_string(p.join("report.json")).unwrap();
    assert_eq!(json(&e1), json(&e2));
    let report: serde_json::Value = serde_json::from_str(&json(&e1)).unwrap();
    let iou: Vec<f64> = report["iou"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(report["miou"].as_f64().unwrap(), (iou[0] + iou[1]) / 2.0);
    let images = report["images"].as_u64().unwrap() as usize;
    let overlays: Vec<_> = fs::read_dir(e1.join("overlays")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(overlays.len(), images);
    assert!(overlays.iter().all(|p| p.extension().unwrap() == "png"));
    assert!(fs::read_to_string(e1.join("report.txt")).unwrap().contains("IoU = 100.00"));
    eval(&base, "e3", &[]);

    let out = dir.path().join("summary");
    let pattern = format!("{}/e*/report.json", dir.path().display());
    ok(dgquant(&["report", "--inputs", &pattern, "--out", s(&out)]));
    let table = fs::read_to_string(out.join("table.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "{table}");
    assert!(rows[0].starts_with("baseline,domain0,1,") && rows[1].starts_with("dgquant,domain0,2,"));
    assert!(out.join("iou.svg").is_file() && out.join("loss.svg").is_file());

    let missing = dir.path().join("nope/report.json");
    let e = err(dgquant(&["report", "--inputs", &pattern, s(&missing), "--out", s(&out)]));
    assert!(e.contains(s(&missing)), "{e}");
    let empty = format!("{}/zz*/report.json", dir.path().display());
    assert!(err(dgquant(&["report", "--inputs", &empty, "--out", s(&out)])).contains("no files match"));
}

#[test]
fn train_and_eval_argument_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let cfg = write_config(dir.path(), "folds = 5\n");
    let out = dir.path().join("x");
    let base = ["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&out)];
    let e = err(dgquant(&[&base[..], &["--holdout", "domain0", "--fold", "7"]].concat()));
    assert!(e.contains("fold 7"), "{e}");
    let e = err(dgquant(&[&base[..], &["--holdout", "mars"]].concat()));
    assert!(e.contains("unknown domain `mars`"), "{e}");

    let small = write_config(dir.path(), "epochs = 1\n");
    let run = train(dir.path(), &data, &small, "run", &[]);
    let three = write_config(dir.path(), "epochs = 1\ncategories = 3\ncodes = 9\n");
    let ckpt = run.join("best.dgq");
    let e = err(dgquant(&[
        "eval", "--ckpt", s(&ckpt), "--data", s(&data), "--domain", "domain1", "--out", s(&out), "--config", s(&three),
    ]));
    assert!(e.contains("categories"), "{e}");
}
