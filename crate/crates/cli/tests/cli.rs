use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cevae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cevae"))
        .args(args)
        .env_remove("CEVAE_THREADS")
        .output()
        .expect("spawn cevae")
}

fn ok(args: &[&str]) -> Output {
    let out = cevae(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Relative path to file contents, for every file under `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn synth(dir: &Path, seed: &str) {
    ok(&[
        "synth", "--out", p(dir), "--n-healthy", "24", "--n-anomalous", "6", "--image-size", "32", "--seed", seed,
    ]);
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    let cfg = r#"{
  "train": {
    "batch_size": 8,
    "epochs": 2,
    "arch": { "conv_channels": [4, 4, 8, 8, 8], "latent_dim": 8 }
  }
}"#;
    fs::write(&path, cfg).unwrap();
    path
}

fn train(data: &Path, cfg: &Path, ckpt: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", p(data), "--config", p(cfg), "--out", p(ckpt), "--quiet"];
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn synth_is_deterministic_and_counts_samples() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    synth(&a, "3");
    synth(&b, "3");
    let (mut ta, mut tb) = (tree(&a), tree(&b));
    // The run record names the output directory, which differs by construction.
    let (ra, rb) = (ta.remove(Path::new("run_config.json")).unwrap(), tb.remove(Path::new("run_config.json")).unwrap());
    let config = |bytes: &[u8]| serde_json::from_slice::<serde_json::Value>(bytes).unwrap()["config"].clone();
    assert_eq!(config(&ra), config(&rb));
    assert_eq!(ta, tb);
    let manifest: serde_json::Value = serde_json::from_slice(&ta[Path::new("manifest.json")]).unwrap();
    assert_eq!(manifest["samples"].as_array().unwrap().len(), 24 + 6);
    let splits: Vec<&str> = manifest["samples"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["split"].as_str().unwrap())
        .collect();
    for split in ["train", "test", "calib"] {
        assert!(splits.contains(&split), "missing {split}");
    }
}

#[test]
fn synth_rejects_empty_training_split() {
    let root = tempfile::tempdir().unwrap();
    let out = cevae(&["synth", "--out", p(&root.path().join("d")), "--n-healthy", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_unwritable_path_is_data_error() {
    let root = tempfile::tempdir().unwrap();
    let file = root.path().join("file");
    fs::write(&file, b"x").unwrap();
    let out = cevae(&["synth", "--out", p(&file.join("sub")), "--n-healthy", "4", "--n-anomalous", "1", "--image-size", "32"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(cevae(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cevae(&["train"]).status.code(), Some(1));
    assert_eq!(cevae(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_score_eval_pipeline() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    synth(&data, "1");
    let cfg = small_config(root.path());

    // Flags beat the config file, which beats defaults.
    let run = root.path().join("run");
    let ckpt = run.join("model.cevk");
    let out = train(&data, &cfg, &ckpt, &["--epochs", "1", "--lambda", "0"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("l_rec_ce 0.000000"), "{stdout}");
    let record: serde_json::Value = serde_json::from_slice(&fs::read(run.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(record["config"]["train"]["epochs"], 1);
    assert_eq!(record["config"]["train"]["batch_size"], 8);
    assert_eq!(record["config"]["train"]["lambda"], 0.0);
    assert_eq!(record["config"]["train"]["lr"], 2e-4);
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let ce_col = log.lines().next().unwrap().split(',').position(|c| c == "l_rec_ce").unwrap();
    assert_eq!(log.lines().nth(1).unwrap().split(',').nth(ce_col), Some("0"));

    // Scoring.
    let scores = root.path().join("scores");
    ok(&["score", "--ckpt", p(&ckpt), "--input", p(&data), "--out", p(&scores), "--mode", "both", "--raw"]);
    let csv = fs::read_to_string(scores.join("sample_scores.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 30);
    let maps = tree(&scores.join("heatmaps"));
    assert_eq!(maps.keys().filter(|k| k.extension().unwrap() == "pgm").count(), 3 * 30);
    assert_eq!(maps.keys().filter(|k| k.extension().unwrap() == "csv").count(), 3 * 30);
    let id = csv.lines().nth(1).unwrap().split(',').next().unwrap();
    let sidecar: serde_json::Value = serde_json::from_slice(&maps[Path::new(&format!("{id}.json"))]).unwrap();
    for map in ["recon_error", "kl_grad", "pixel_score"] {
        let s = &sidecar["scales"][map];
        assert!(s["min"].as_f64().unwrap() <= s["max"].as_f64().unwrap());
    }
    let again = root.path().join("scores2");
    ok(&["score", "--ckpt", p(&ckpt), "--input", p(&data), "--out", p(&again), "--mode", "both", "--raw"]);
    assert_eq!(tree(&scores), tree(&again));

    let sample_only = root.path().join("sample_only");
    ok(&["score", "--ckpt", p(&ckpt), "--input", p(&data.join("images")), "--out", p(&sample_only), "--mode", "sample"]);
    assert!(!sample_only.join("heatmaps").exists());
    assert_eq!(fs::read_to_string(sample_only.join("sample_scores.csv")).unwrap().lines().count(), 1 + 30);

    // Evaluation.
    let report_path = root.path().join("eval").join("report.json");
    ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&report_path), "--seed", "5"]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(&report_path).unwrap()).unwrap();
    for key in ["samplewise_auroc", "pixelwise_auroc", "dice_on_holdout", "calibrated_threshold"] {
        assert!(!report[key].is_null(), "missing {key}");
    }
    assert!(report["collapse"]["q95"].is_number());
    let eval_dir = report_path.parent().unwrap();
    for f in ["roc_samplewise.csv", "roc_pixelwise.csv", "roc.svg", "run_config.json"] {
        assert!(eval_dir.join(f).is_file(), "missing {f}");
    }
    let report2 = root.path().join("eval2").join("report.json");
    ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&report2), "--seed", "5"]);
    assert_eq!(fs::read(&report_path).unwrap(), fs::read(&report2).unwrap());

    let out = cevae(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&report2), "--calib-fraction", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn training_is_bit_deterministic() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    synth(&data, "2");
    let cfg = small_config(root.path());
    let (a, b) = (root.path().join("a/m.cevk"), root.path().join("b/m.cevk"));
    train(&data, &cfg, &a, &["--seed", "9"]);
    train(&data, &cfg, &b, &["--seed", "9"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(
        fs::read(a.with_file_name("train_log.csv")).unwrap(),
        fs::read(b.with_file_name("train_log.csv")).unwrap()
    );
}

#[test]
fn size_mismatch_names_both_sizes() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    synth(&data, "4");
    let cfg = small_config(root.path());
    let ckpt = root.path().join("m.cevk");
    train(&data, &cfg, &ckpt, &["--epochs", "1"]);

    let big = root.path().join("big.pgm");
    let mut bytes = b"P5\n64 64\n255\n".to_vec();
    bytes.extend(std::iter::repeat_n(40u8, 64 * 64));
    fs::write(&big, bytes).unwrap();
    let out = cevae(&["score", "--ckpt", p(&ckpt), "--input", p(&big), "--out", p(&root.path().join("s"))]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("32x32") && msg.contains("64x64"), "{msg}");
}

#[test]
fn malformed_checkpoint_is_data_error() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    synth(&data, "5");
    let bad = root.path().join("bad.cevk");
    fs::write(&bad, b"NOPE\x01\x00\x00\x00").unwrap();
    let out = cevae(&["eval", "--ckpt", p(&bad), "--data", p(&data), "--out", p(&root.path().join("r.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad magic"));
}

#[test]
fn config_error_reports_line() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    synth(&data, "6");
    let cfg = root.path().join("c.json");
    fs::write(&cfg, "{\n  \"train\": {\n    \"lr\": \"fast\"\n  }\n}\n").unwrap();
    let out = cevae(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&root.path().join("m.cevk"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn gradcheck_passes_and_lists_each_primitive_once() {
    let out = ok(&["gradcheck", "--seed", "1"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for name in [
        "add", "sub", "mul", "div", "add_scalar", "sub_scalar", "mul_scalar", "div_scalar", "abs", "exp", "log",
        "square", "sigmoid", "leaky_relu", "sum", "mean", "reshape", "linear", "conv2d", "conv_transpose2d",
        "cevae_loss",
    ] {
        let n = stdout.lines().filter(|l| l.split_whitespace().next() == Some(name)).count();
        assert_eq!(n, 1, "{name} listed {n} times");
    }
}

#[test]
fn gradcheck_detects_injected_fault() {
    let out = cevae(&["gradcheck", "--inject-fault", "sigmoid"]);
    assert_eq!(out.status.code(), Some(3));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("sigmoid (input 0, index"), "{msg}");
}
