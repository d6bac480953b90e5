//! End-to-end runs of the `simcond` binary at toy scale.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn simcond(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simcond"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = simcond(args);
    assert!(
        out.status.success(),
        "simcond {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "
# tiny end-to-end run
toy.identities = 8
toy.per_identity = 6
toy.resolution = 16
encoder.widths = 8,16
encoder.dim = 16
encoder.epochs = 2
diffusion.resolution = 8
diffusion.channels = 8,8
diffusion.norm_groups = 4
diffusion.epochs = 1
diffusion.m_interval = 0.1
inquiry.pool = 10
inquiry.max = 4
generate.per_subject = 4
generate.oversample = 1
generate.steps = 4
fr.widths = 8,16
fr.dim = 16
fr.epochs = 3
fr.decay = 2
fr.batch = 16
eval.sets = 1
eval.identities = 6
eval.per_identity = 3
eval.pairs = 40
";

fn stage_states(stdout: &str) -> Vec<(String, bool)> {
    stdout
        .lines()
        .filter_map(|l| {
            let mut it = l.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some(name), Some(state @ ("ran" | "cached")), None) => Some((name.to_string(), state == "ran")),
                _ => None,
            }
        })
        .collect()
}

#[test]
fn pipeline_caches_and_invalidates_downstream_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let work = format!("work_dir={}", p(&dir.path().join("work")));
    let first = stage_states(&ok(&["run-pipeline", "--config", p(&cfg), "--set", &work]));
    assert!(first.len() >= 8 && first.iter().all(|(_, ran)| *ran), "{first:?}");

    let again = stage_states(&ok(&["run-pipeline", "--config", p(&cfg), "--set", &work]));
    assert!(again.iter().all(|(_, ran)| !ran), "{again:?}");

    let changed = stage_states(&ok(&["run-pipeline", "--config", p(&cfg), "--set", &work, "--set", "fr.epochs=4"]));
    for (name, ran) in &changed {
        let downstream = name == "baseline" || name.starts_with("fr_") || name.starts_with("eval_");
        assert_eq!(*ran, downstream, "stage {name}");
    }

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("work/eval_m+0.00/report.json")).unwrap()).unwrap();
    assert!(report["tool_version"].is_string());
    assert!(report["config_digest"].is_string());
    let avg = report["avg"].as_f64().unwrap();
    let gtr = report["gap_to_real"].as_f64().unwrap();
    assert!((report["baseline_avg"].as_f64().unwrap() - avg - gtr).abs() < 1e-6);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let out = simcond(&["run-pipeline", "--set", "fr.epoch=3", "--print-config"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("fr.epoch"));
    let text = ok(&["run-pipeline", "--set", "fr.epochs=3", "--print-config"]);
    assert!(text.lines().any(|l| l.replace(' ', "") == "fr.epochs=3"));
}

#[test]
fn individual_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s);
    ok(&["make-toy-data", "--identities", "6", "--per-identity", "5", "--resolution", "16", "--out", p(&d("toy"))]);
    assert!(d("toy/subject_00005/img_0004.png").is_file());
    let manifest = fs::read_to_string(d("toy/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 30);

    ok(&["make-toy-data", "--identities", "6", "--per-identity", "3", "--resolution", "16", "--seed", "9", "--pairs", "40", "--out", p(&d("pairs"))]);
    let pairs = fs::read_to_string(d("pairs/pairs.txt")).unwrap();
    assert_eq!(pairs.lines().count(), 40);
    assert!(pairs.lines().all(|l| l.split('\t').count() == 3));

    let corpus = d("toy/manifest.jsonl");
    ok(&["train-encoder", "--corpus", p(&corpus), "--out", p(&d("enc.bin")), "--dim", "16", "--epochs", "1", "--batch", "16"]);
    assert!(d("enc.bin.hdr").is_file() && d("enc.bin.head").is_file());

    ok(&[
        "train-diffusion", "--corpus", p(&corpus), "--encoder", p(&d("enc.bin")), "--T", "20", "--m-range", "-1", "1",
        "--m-interval", "0.5", "--epochs", "1", "--batch", "8", "--resolution", "8", "--channels", "8,8",
        "--out", p(&d("den.bin")),
    ]);
    let header = fs::read_to_string(d("den.bin.hdr")).unwrap();
    assert!(header.contains("T") && header.contains("encoder"));

    ok(&["filter-inquiries", "--encoder", p(&d("enc.bin")), "--pool", p(&d("toy/subject_00000")), "--threshold", "1", "--max", "2", "--out", p(&d("inq"))]);
    assert!(d("inq/inquiry_00001.png").is_file());

    ok(&["generate", "--model", p(&d("den.bin")), "--inquiry", p(&d("inq")), "--m", "-0.5", "--per-subject", "2", "--steps", "3", "--out", p(&d("gen"))]);
    assert!(d("gen/subject_00001/img_0001.png").is_file());

    ok(&[
        "assemble", "--inquiries", p(&d("inq")), "--model", p(&d("den.bin")), "--m-mix", "-0.5", "0.5", "0.5",
        "--per-subject", "3", "--oversample", "1", "--steps", "3", "--out", p(&d("set")),
    ]);
    let set = fs::read_to_string(d("set/manifest.jsonl")).unwrap();
    assert_eq!(set.lines().count(), 1 + 2 * 4);

    ok(&["split-sim", "--manifest", p(&corpus), "--encoder", p(&d("enc.bin")), "--head", p(&d("enc.bin.head")), "--groups", "3", "--out", p(&d("split"))]);
    for g in 0..3 {
        let text = fs::read_to_string(d(&format!("split/group_{g}/manifest.jsonl"))).unwrap();
        assert_eq!(text.lines().count(), 1 + 10);
    }
    let emb = fs::read(d("split/embeddings.bin")).unwrap();
    let nl = emb.iter().position(|&b| b == b'\n').unwrap();
    let head: serde_json::Value = serde_json::from_slice(&emb[..nl]).unwrap();
    assert_eq!(head["count"], 30);
    assert_eq!(emb.len() - nl - 1, 30 * 16 * 4);

    ok(&["train-fr", "--manifest", p(&d("set/manifest.jsonl")), "--epochs", "2", "--decay", "1", "--batch", "4", "--out", p(&d("fr/model.bin"))]);
    let csv = fs::read_to_string(d("fr/metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epoch,loss,lr,train_acc");
    assert_eq!(csv.lines().count(), 3);

    let stdout = ok(&["eval", "--encoder", p(&d("fr/model.bin")), "--pairs", p(&d("pairs/pairs.txt")), "--baseline", "94.26", "--report", p(&d("report.json"))]);
    assert!(stdout.contains("AVG"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d("report.json")).unwrap()).unwrap();
    assert_eq!(report["baseline_avg"], 94.26);

    ok(&["report", "--model", p(&d("den.bin")), "--inquiries", p(&d("inq")), "--m", "-0.8,0,0.8", "--rows", "2", "--steps", "3", "--cell", "16", "--out", p(&d("grid.png"))]);
    let grid = fs::read(d("grid.png")).unwrap();
    assert_eq!(&grid[1..4], b"PNG");
}
