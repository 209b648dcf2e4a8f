use std::path::{Path, PathBuf};
use std::process::Command;

use dpdkit::cli::run;
use dpdkit::dpd::TRACE_HEADER;
use dpdkit::ingest::{load_dataset, load_trial_csv, Label};
use dpdkit::model::Model;

fn dpd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dpd"))
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn synth(dir: &Path, name: &str, cfg: &str) -> PathBuf {
    let cfg_path = dir.join(format!("{name}.cfg"));
    std::fs::write(&cfg_path, cfg).unwrap();
    let out = dir.join(name);
    assert_eq!(run(["dpd", "synth", "--config", &s(&cfg_path), "--out", &s(&out)]), 0);
    out
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

const TINY: &str = "seed = 5\nn_pos = 2\nn_neg = 2\nwindows_min = 30\nwindows_max = 32\n";

#[test]
fn malformed_synth_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "neutral_fraction = lots\n").unwrap();
    let out = dpd()
        .args(["synth", "--config", &s(&cfg), "--out", &s(&dir.path().join("x"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("neutral_fraction"));
}

#[test]
fn usage_error_exits_2() {
    let out = dpd().args(["cv", "--no-such-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a", TINY);
    let b = synth(dir.path(), "b", TINY);
    let (fa, fb) = (read_dir_sorted(&a), read_dir_sorted(&b));
    assert!(fa.iter().any(|(n, _)| n == "ground_truth.csv"));
    assert_eq!(fa, fb);
}

#[test]
fn fit_then_classify() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", TINY);
    let model = dir.path().join("model");
    assert_eq!(
        run(["dpd", "fit", "--data", &s(&data), "--model", &s(&model), "--k", "3", "--lambda", "-0.5"]),
        0
    );
    let m = Model::load(&model).unwrap();
    assert!(!m.bag_pos.is_empty() && !m.bag_neg.is_empty());

    // Same trials fitted in memory classify identically to the reloaded archive.
    let trials = load_dataset(&data).unwrap();
    let in_memory = Model::fit(&trials, m.params, 100, 100, 0, m.index).unwrap();
    for t in &trials {
        assert_eq!(in_memory.classify(t).unwrap(), m.classify(t).unwrap());
    }

    let trace = dir.path().join("trace.csv");
    let trial = data.join("am_0000.csv");
    assert_eq!(
        run(["dpd", "classify", "--model", &s(&model), "--data", &s(&trial), "--out", &s(&trace)]),
        0
    );
    let text = std::fs::read_to_string(&trace).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(TRACE_HEADER));
    let windows = load_trial_csv(&trial).unwrap().len() / 100;
    assert_eq!(lines.count(), windows);
}

#[test]
fn held_out_am_trial_is_classified_am() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(
        dir.path(),
        "data",
        "seed = 8\nn_pos = 6\nn_neg = 6\nwindows_min = 30\nwindows_max = 30\nseparation = 1.5\n",
    );
    // Hold out one AM trial by dropping it from the manifest.
    let manifest = data.join("manifest.csv");
    let kept: Vec<_> = std::fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with("am_0005"))
        .map(str::to_string)
        .collect();
    std::fs::write(&manifest, kept.join("\n") + "\n").unwrap();
    let model = dir.path().join("model");
    assert_eq!(run(["dpd", "fit", "--data", &s(&data), "--model", &s(&model), "--pca-dim", "20"]), 0);
    let m = Model::load(&model).unwrap();
    let t = m.classify(&load_trial_csv(&data.join("am_0005.csv")).unwrap()).unwrap();
    assert_eq!(t.prediction, Label::Am, "score {}", t.score);
}

#[test]
fn fit_rejects_unlabelled_trial() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", TINY);
    let manifest = data.join("manifest.csv");
    let text = std::fs::read_to_string(&manifest).unwrap().replace("td_0001.csv,TD", "td_0001.csv,");
    std::fs::write(&manifest, text).unwrap();
    std::fs::remove_file(data.join("td_0001.meta")).unwrap();
    let out = dpd()
        .args(["fit", "--data", &s(&data), "--model", &s(&dir.path().join("m"))])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("td_0001"));
}

#[test]
fn fit_rejects_single_class() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", "seed = 1\nn_pos = 4\nn_neg = 0\nwindows_min = 30\nwindows_max = 30\n");
    assert_eq!(run(["dpd", "fit", "--data", &s(&data), "--model", &s(&dir.path().join("m"))]), 2);
}

#[test]
fn classify_short_trial_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", TINY);
    let model = dir.path().join("model");
    assert_eq!(run(["dpd", "fit", "--data", &s(&data), "--model", &s(&model)]), 0);
    let full = std::fs::read_to_string(data.join("td_0000.csv")).unwrap();
    let short: Vec<&str> = full.lines().take(51).collect();
    let short_path = dir.path().join("short.csv");
    std::fs::write(&short_path, short.join("\n") + "\n").unwrap();
    let out = dpd()
        .args(["classify", "--model", &s(&model), "--data", &s(&short_path)])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("too short"));
}

const SMALL_PROTOCOL: &str = "folds = 3\ntest_size = 6\ninner_folds = 3\ninner_test_size = 6\npca_dim = 20\nk_grid = 1,3\nlambda_min = -3\nlambda_step = 0.1\n";

#[test]
fn cv_dpd_with_zero_pi_grid_matches_no_dpd() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(
        dir.path(),
        "data",
        "seed = 2\nn_pos = 10\nn_neg = 14\nwindows_min = 20\nwindows_max = 24\n",
    );
    let proto = dir.path().join("p.cfg");
    std::fs::write(&proto, SMALL_PROTOCOL).unwrap();
    let mut reports = Vec::new();
    for method in ["dpd", "no-dpd"] {
        let out = dir.path().join(method);
        let code = run([
            "dpd", "cv", "--data", &s(&data), "--out", &s(&out), "--config", &s(&proto), "--method", method,
            "--grid-pi", "0", "--threads", "1",
        ]);
        assert_eq!(code, 0);
        let files: Vec<String> = ["metrics.csv", "predictions.csv", "roc.csv"]
            .iter()
            .map(|f| {
                std::fs::read_to_string(out.join(f))
                    .unwrap()
                    .lines()
                    .map(|l| l.strip_prefix(&format!("{method},")).unwrap_or(l).to_string())
                    .collect::<Vec<_>>()
                    .join("\n")
            })
            .collect();
        reports.push(files);
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn cv_default_protocol_fold_shape() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(
        dir.path(),
        "data",
        "seed = 4\nn_pos = 61\nn_neg = 100\nwindows_min = 20\nwindows_max = 22\n",
    );
    let out = dir.path().join("rep");
    assert_eq!(run(["dpd", "cv", "--data", &s(&data), "--out", &s(&out), "--method", "knn"]), 0);
    let preds = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    let rows: Vec<&str> = preds.lines().skip(1).collect();
    assert_eq!(rows.len(), 10 * 12);
    for f in 0..10 {
        assert_eq!(rows.iter().filter(|r| r.split(',').nth(1) == Some(&f.to_string())).count(), 12);
    }
}
