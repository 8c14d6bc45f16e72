//! End-to-end checks of the installed binary: happy paths, exit codes, and
//! byte-identical reruns.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_neural-mcrl"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_status(out: &Output, want: i32, what: &str) {
    let got = out.status.code().expect("exit code");
    assert_eq!(
        got,
        want,
        "{what}: expected exit {want}, got {got}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Generate the small six-class dataset used by most CLI tests.
fn synth_tiny(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = run(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--set",
        "n_classes=6",
        "--set",
        "n_subjects=2",
        "--set",
        "trials_per_class_per_subject=3",
        "--set",
        "channels=4",
        "--set",
        "window_length=32",
        "--set",
        "embed_dim=12",
        "--set",
        "text_items_per_class=2",
        "--set",
        "seed=5",
    ]);
    assert_status(&out, 0, "synth");
    data
}

fn tiny_train_args<'a>(data: &'a str, out: &'a str) -> Vec<String> {
    [
        "train",
        "--data",
        data,
        "--image-emb",
        &format!("{data}/image_embeddings.json"),
        "--text-emb",
        &format!("{data}/text_embeddings.json"),
        "--out",
        out,
        "--set",
        "epochs=2",
        "--set",
        "batch_size=3",
        "--set",
        "heads=2",
        "--set",
        "eitra_m=2",
        "--set",
        "dropout=0.0",
        "--set",
        "seed=11",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn manifest(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("run_manifest.json")).expect("manifest exists");
    serde_json::from_str(&text).expect("manifest parses")
}

#[test]
fn full_pipeline_produces_reports_and_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_tiny(tmp.path());
    let data_s = data.to_str().unwrap();

    let m = manifest(&data);
    assert_eq!(m["subcommand"], "synth");
    assert_eq!(m["config"]["n_classes"], 6);

    let run_dir = tmp.path().join("run");
    let args = tiny_train_args(data_s, run_dir.to_str().unwrap());
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = run(&args);
    assert_status(&out, 0, "train");
    assert!(run_dir.join("ckpt_002.nmc").is_file());
    assert!(run_dir.join("metrics.jsonl").is_file());
    let m = manifest(&run_dir);
    assert_eq!(m["subcommand"], "train");
    assert_eq!(m["seed"], 11);
    let digests = m["input_digests"].as_object().unwrap();
    assert!(digests.len() >= 3, "train digests every input file");
    for v in digests.values() {
        assert_eq!(v.as_str().unwrap().len(), 64, "sha-256 hex digests");
    }

    let ckpt = run_dir.join("ckpt_002.nmc");
    let report = tmp.path().join("report.json");
    let out = run(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data_s,
        "--image-emb",
        &format!("{data_s}/image_embeddings.json"),
        "--n-way",
        "3",
        "--k",
        "1,3",
        "--seed",
        "0",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_status(&out, 0, "eval");
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["protocol"]["n_way"], 3);
    assert_eq!(rep["protocol"]["k_list"], serde_json::json!([1, 3]));
    let top1 = rep["metrics"]["1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&top1));

    let csv = tmp.path().join("simmatrix.csv");
    let png = tmp.path().join("sim.png");
    let out = run(&[
        "analyze",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data_s,
        "--image-emb",
        &format!("{data_s}/image_embeddings.json"),
        "--out",
        csv.to_str().unwrap(),
        "--plot",
        png.to_str().unwrap(),
    ]);
    assert_status(&out, 0, "analyze");
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert_eq!(header.split(',').count(), 3, "three unseen classes");
    assert_eq!(lines.count(), 3, "one row per class");
    let png_bytes = std::fs::read(&png).unwrap();
    assert_eq!(&png_bytes[..8], b"\x89PNG\r\n\x1a\n");
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_tiny(tmp.path());
    let data_s = data.to_str().unwrap();

    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let run_dir = tmp.path().join(name);
        let args = tiny_train_args(data_s, run_dir.to_str().unwrap());
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        assert_status(&run(&args), 0, "train");
        let report = tmp.path().join(format!("report_{name}.json"));
        let out = run(&[
            "eval",
            "--ckpt",
            run_dir.join("ckpt_002.nmc").to_str().unwrap(),
            "--data",
            data_s,
            "--image-emb",
            &format!("{data_s}/image_embeddings.json"),
            "--n-way",
            "3",
            "--out",
            report.to_str().unwrap(),
        ]);
        assert_status(&out, 0, "eval");
        outputs.push((
            std::fs::read(run_dir.join("ckpt_002.nmc")).unwrap(),
            std::fs::read(run_dir.join("metrics.jsonl")).unwrap(),
            std::fs::read(run_dir.join("run_manifest.json")).unwrap(),
            std::fs::read(&report).unwrap(),
        ));
    }
    assert_eq!(outputs[0].0, outputs[1].0, "checkpoints differ");
    assert_eq!(outputs[0].1, outputs[1].1, "metric logs differ");
    assert_eq!(outputs[0].2, outputs[1].2, "run manifests differ");
    assert_eq!(outputs[0].3, outputs[1].3, "eval reports differ");
}

#[test]
fn empty_config_file_means_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_tiny(tmp.path());
    let data_s = data.to_str().unwrap();
    let cfg = tmp.path().join("empty.json");
    std::fs::write(&cfg, "").unwrap();

    let run_dir = tmp.path().join("run");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data_s,
        "--image-emb",
        &format!("{data_s}/image_embeddings.json"),
        "--text-emb",
        &format!("{data_s}/text_embeddings.json"),
        "--out",
        run_dir.to_str().unwrap(),
        "--set",
        "epochs=1",
        "--set",
        "heads=2",
        "--set",
        "eitra_m=2",
    ]);
    assert_status(&out, 0, "train with empty config");
    let m = manifest(&run_dir);
    assert_eq!(m["config"]["learning_rate"], 3e-4);
    assert_eq!(m["config"]["batch_size"], 128);
    assert_eq!(m["config"]["epochs"], 1, "override still applies");
}

#[test]
fn usage_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_tiny(tmp.path());
    let data_s = data.to_str().unwrap().to_string();
    let train_base = |extra: &[&str]| -> Output {
        let mut args = vec![
            "train".to_string(),
            "--data".into(),
            data_s.clone(),
            "--image-emb".into(),
            format!("{data_s}/image_embeddings.json"),
            "--text-emb".into(),
            format!("{data_s}/text_embeddings.json"),
            "--out".into(),
            tmp.path().join("x").to_str().unwrap().into(),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        run(&args)
    };

    assert_status(&run(&["--bogus"]), 1, "unknown flag");
    assert_status(&run(&["--help"]), 0, "help is not an error");
    assert_status(&train_base(&["--set", "eta=1.5"]), 1, "eta outside [0, 1]");
    assert_status(&train_base(&["--set", "learning_rte=0.1"]), 1, "unknown config key");
    assert_status(
        &run(&["gradcheck", "--component", "no_such"]),
        1,
        "unknown gradcheck component",
    );
    let stderr = String::from_utf8(train_base(&["--set", "eta=1.5"]).stderr).unwrap();
    assert!(stderr.contains("eta"), "error names the offending field: {stderr}");
}

#[test]
fn data_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_tiny(tmp.path());
    let data_s = data.to_str().unwrap();

    let out = run(&[
        "train",
        "--data",
        tmp.path().join("missing").to_str().unwrap(),
        "--image-emb",
        &format!("{data_s}/image_embeddings.json"),
        "--text-emb",
        &format!("{data_s}/text_embeddings.json"),
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_status(&out, 2, "missing dataset directory");

    let out = run(&[
        "eval",
        "--ckpt",
        tmp.path().join("missing.nmc").to_str().unwrap(),
        "--data",
        data_s,
        "--image-emb",
        &format!("{data_s}/image_embeddings.json"),
        "--n-way",
        "3",
        "--out",
        tmp.path().join("r.json").to_str().unwrap(),
    ]);
    assert_status(&out, 2, "missing checkpoint");

    let bad = tmp.path().join("bad.nmc");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let out = run(&[
        "eval",
        "--ckpt",
        bad.to_str().unwrap(),
        "--data",
        data_s,
        "--image-emb",
        &format!("{data_s}/image_embeddings.json"),
        "--n-way",
        "3",
        "--out",
        tmp.path().join("r.json").to_str().unwrap(),
    ]);
    assert_status(&out, 2, "corrupt checkpoint");
}

#[test]
fn ablate_and_compare_encoders_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_tiny(tmp.path());
    let data_s = data.to_str().unwrap();
    let common = [
        "--data",
        data_s,
        "--image-emb",
        &format!("{data_s}/image_embeddings.json"),
        "--text-emb",
        &format!("{data_s}/text_embeddings.json"),
    ]
    .map(String::from);
    let sets = [
        "--set",
        "epochs=1",
        "--set",
        "batch_size=3",
        "--set",
        "heads=2",
        "--set",
        "eitra_m=2",
        "--set",
        "dropout=0.0",
    ]
    .map(String::from);

    let abl_dir = tmp.path().join("ablation");
    let mut args = vec!["ablate".to_string()];
    args.extend(common.clone());
    args.push("--out".into());
    args.push(abl_dir.to_str().unwrap().into());
    args.extend(sets.clone());
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_status(&run(&argv), 0, "ablate");
    let rep: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(abl_dir.join("ablation_report.json")).unwrap(),
    )
    .unwrap();
    let rows = rep["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    assert!(abl_dir.join("full").join("ckpt_001.nmc").is_file());

    let cmp_dir = tmp.path().join("encoders");
    let mut args = vec!["compare-encoders".to_string()];
    args.extend(common);
    args.push("--out".into());
    args.push(cmp_dir.to_str().unwrap().into());
    args.extend(sets);
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    assert_status(&run(&argv), 0, "compare-encoders");
    let rep: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(cmp_dir.join("encoder_comparison.json")).unwrap(),
    )
    .unwrap();
    let rows = rep["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    let names: Vec<&str> = rows.iter().map(|r| r["encoder"].as_str().unwrap()).collect();
    assert!(names[0].contains("nesta") && names[1].contains("mlp"), "rows: {names:?}");
}

#[test]
fn gradcheck_single_component_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("gradcheck.json");
    let out = run(&[
        "gradcheck",
        "--component",
        "info_nce",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_status(&out, 0, "gradcheck info_nce");
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("info_nce") && stdout.contains("pass"), "stdout: {stdout}");
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep.as_array().unwrap().len(), 1);
}
