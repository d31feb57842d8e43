use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &[&str] = &[
    "--set",
    "seed=42",
    "--set",
    "corpus.speakers=4",
    "--set",
    "corpus.utterance_s=2",
    "--set",
    "mixtures.count=2",
    "--set",
    "mixtures.duration_s=2",
    "--set",
    "encoder.base_filters=4",
    "--set",
    "pretrain.steps=40",
    "--set",
    "pretrain.batch_size=32",
    "--set",
    "head.hidden=64",
    "--set",
    "head.max_steps=400",
    "--set",
    "theta=0.7",
];

fn run(workdir: &Path, args: &[&str], extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_condeepmod"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .args(SMALL)
        .args(extra)
        .env("CONDEEPMOD_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(workdir: &Path, args: &[&str], extra: &[&str]) -> Value {
    let out = run(workdir, args, extra);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

fn failure(out: &Output) -> (i32, Value) {
    assert!(!out.status.success(), "expected failure");
    let err = serde_json::from_slice(&out.stderr).unwrap_or_else(|_| {
        panic!("stderr is not JSON: {}", String::from_utf8_lossy(&out.stderr));
    });
    (out.status.code().expect("exit code"), err)
}

/// Relative path → bytes of every file under `root`.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, into: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, into);
            } else {
                into.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut files = BTreeMap::new();
    walk(root, root, &mut files);
    files
}

fn run_pipeline(workdir: &Path, extra: &[&str]) {
    for stage in ["synth", "pretrain", "build-graph", "train-head", "separate", "eval"] {
        ok(workdir, &[stage], extra);
    }
}

#[test]
fn synth_twice_gives_identical_corpora() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let summary = ok(a.path(), &["synth", "--speakers", "8"], &[]);
    assert_eq!(summary["speakers"], 8);
    assert_eq!(summary["seed"], 42);
    ok(b.path(), &["synth", "--speakers", "8"], &[]);
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa, sb);
    assert!(sa.contains_key(Path::new("corpus/spk000/utt000.wav")));
    assert!(sa.contains_key(Path::new("mix/mix001/s1.wav")));

    let meta: Value = serde_json::from_slice(&sa[Path::new("mix/mix000/meta.json")]).unwrap();
    assert_eq!(meta["seed"], 42);
    assert_eq!(meta["speaker_ids"].as_array().unwrap().len(), 2);
    assert_eq!(meta["activity"].as_array().unwrap().len(), 2);

    let c = tempfile::tempdir().unwrap();
    ok(c.path(), &["synth", "--speakers", "8"], &["--seed", "43"]);
    assert_ne!(snapshot(c.path()), sa);
}

#[test]
fn full_pipeline_separates_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    let no_overlap = ["--set", "mixtures.overlap_fraction=0"];
    run_pipeline(wd, &no_overlap);

    let csv = fs::read_to_string(wd.join("reports/eval.csv")).unwrap();
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(lines.next(), Some("mix_id,k_eff,si_snri,sdri,purity,C,Q"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for row in &rows {
        let si_snri: f64 = row[2].parse().unwrap();
        assert!(si_snri > 0.0, "{row:?}");
        let purity: f64 = row[4].parse().unwrap();
        assert!((0.5..=1.0).contains(&purity), "{row:?}");
    }
    assert!(csv.starts_with("# seed: 42\n"));

    let report: Value = serde_json::from_str(&fs::read_to_string(wd.join("reports/eval.json")).unwrap()).unwrap();
    assert!(report["invariants"]["max_reconstruction_error"].as_f64().unwrap() <= 1e-12);
    assert_eq!(report["invariants"]["max_mixture_si_snri_abs"].as_f64().unwrap(), 0.0);

    let result: Value =
        serde_json::from_str(&fs::read_to_string(wd.join("out/mix000/result.json")).unwrap()).unwrap();
    let k_eff = result["k_eff"].as_u64().unwrap() as usize;
    for c in 0..k_eff {
        assert!(wd.join(format!("out/mix000/est{c}.wav")).is_file());
    }
    assert!(!wd.join(format!("out/mix000/est{k_eff}.wav")).exists());
    let labels = result["assignments"].as_array().unwrap();
    assert!(labels.iter().all(|l| (l.as_u64().unwrap() as usize) < k_eff));

    // Every stage is idempotent: rerunning the graph-onwards stages leaves
    // the work directory byte-identical.
    let before = snapshot(wd);
    for stage in ["build-graph", "train-head", "separate", "eval"] {
        ok(wd, &[stage], &no_overlap);
    }
    assert_eq!(snapshot(wd), before);
}

#[test]
fn amortized_head_separates_every_mixture() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    let amortized = ["--set", "head.mode=amortized"];
    run_pipeline(wd, &amortized);
    assert!(wd.join("heads/amortized.cdm").is_file());
    assert!(!wd.join("heads/mix000.cdm").exists());
    let report: Value = serde_json::from_str(&fs::read_to_string(wd.join("reports/eval.json")).unwrap()).unwrap();
    assert_eq!(report["mixtures"], 2);
}

#[test]
fn trend_report_tabulates_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    let every = ["--set", "pretrain.checkpoint_every=20"];
    ok(wd, &["synth"], &every);
    ok(wd, &["pretrain"], &every);
    let summary = ok(wd, &["trend-report"], &every);
    assert_eq!(summary["checkpoints"], 3);
    let csv = fs::read_to_string(wd.join("reports/trend.csv")).unwrap();
    assert!(csv.contains("# spearman(loss, C): "));
    assert!(csv.contains("# spearman(loss, Q): "));
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "step,loss,C,Q");
    let steps: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "20", "40"]);
    let losses: Vec<f64> = rows[1..].iter().map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(losses[2] < losses[0], "{losses:?}");

    // Without snapshots there is nothing to trend over.
    ok(wd, &["pretrain"], &[]);
    let (code, err) = failure(&run(wd, &["trend-report"], &[]));
    assert_eq!(code, 2);
    assert_eq!(err["error"], "usage");
}

#[test]
fn missing_inputs_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    for (stage, producer) in [("pretrain", "synth"), ("build-graph", "synth"), ("eval", "synth")] {
        let (code, err) = failure(&run(dir.path(), &[stage], &[]));
        assert_eq!(code, 2);
        assert_eq!(err["error"], "missing_input");
        assert_eq!(err["stage"], stage);
        assert!(err["message"].as_str().unwrap().contains(producer), "{err}");
    }
    ok(dir.path(), &["synth"], &[]);
    let (_, err) = failure(&run(dir.path(), &["build-graph"], &[]));
    assert_eq!(err["stage"], "build-graph");
    assert!(err["path"].as_str().unwrap().ends_with("manifest.json"), "{err}");
}

#[test]
fn config_errors_report_the_offending_key() {
    let dir = tempfile::tempdir().unwrap();
    let (code, err) = failure(&run(dir.path(), &["synth"], &["--set", "head.hiden=3"]));
    assert_eq!(code, 2);
    assert_eq!(err["error"], "config");
    assert_eq!(err["path"], "head.hiden");
    assert!(err["message"].as_str().unwrap().contains("hiden"));

    let file = dir.path().join("config.json");
    fs::write(&file, r#"{"mixtures": {"gain_db": [0, "loud"]}}"#).unwrap();
    let (_, err) = failure(&run(dir.path(), &["synth", "--config", file.to_str().unwrap()], &[]));
    assert_eq!(err["path"], "mixtures.gain_db[1]");

    let (_, err) = failure(&run(dir.path(), &["synth"], &["--set", "theta=3"]));
    assert_eq!(err["error"], "config");
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("config.json");
    fs::write(&file, r#"{"seed": 5, "mixtures": {"count": 1}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_condeepmod"))
        .arg("--workdir")
        .arg(dir.path())
        .args(["--config", file.to_str().unwrap(), "--set", "corpus.speakers=3", "synth"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["seed"], 5);
    assert_eq!(summary["speakers"], 3);
    assert_eq!(summary["mixtures"], 1);
    let logged: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("reports/synth.config.json")).unwrap()).unwrap();
    assert_eq!(logged["seed"], 5);
}

#[test]
fn invalid_thread_count_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_condeepmod"))
        .arg("--workdir")
        .arg(dir.path())
        .arg("synth")
        .env("CONDEEPMOD_THREADS", "0")
        .output()
        .unwrap();
    let (code, err) = failure(&out);
    assert_eq!(code, 2);
    assert_eq!(err["error"], "usage");

    let out = Command::new(env!("CARGO_BIN_EXE_condeepmod")).arg("no-such-stage").output().unwrap();
    let (code, err) = failure(&out);
    assert_eq!(code, 2);
    assert_eq!(err["error"], "usage");
}
