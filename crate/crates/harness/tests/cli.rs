use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 9
epochs = 2
batch_size = 8

[model]
d_input = 4
d_model = 8
heads = 2
d_ff = 8
n_classes = 2

[[model.blocks]]
exit_head = true

[[model.blocks]]
exit_head = true

[[model.blocks]]

[early_exit]
betas = [0.5, 0.5]

[dataset]
id = "difficulty-tiers"
tokens = 3
dim = 4
margins = [1.5, 0.8, 0.3]
noise = 1.0
train = 64
val = 16
test = 40
"#;

fn condcomp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_condcomp")).args(args).output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.toml");
    std::fs::write(&path, CONFIG).unwrap();
    path.display().to_string()
}

#[test]
fn missing_config_is_a_validation_error_naming_the_path() {
    let out = condcomp(&["train", "--config", "missing.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("missing.toml"), "{}", text(&out.stderr));
}

#[test]
fn bad_arguments_exit_with_one() {
    assert_eq!(condcomp(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(condcomp(&["sweep", "--config", "x.toml", "--knob", "depth", "--values", "1"]).status.code(), Some(1));
    assert_eq!(condcomp(&["--help"]).status.code(), Some(0));
}

#[test]
fn sweep_writes_one_csv_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("out");
    let out = condcomp(&[
        "sweep",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
        "--knob",
        "ee-threshold",
        "--values",
        "0.5:0.99:10",
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("curve.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "knob,value,mean_macs,accuracy,n_samples,seed");
    assert_eq!(lines.len(), 11);
    assert!(lines[1..].iter().all(|l| l.starts_with("ee-threshold,") && l.ends_with(",40,9")));
}

#[test]
fn train_then_eval_and_flops() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = out_dir.to_str().unwrap();
    let train = condcomp(&["train", "--config", &cfg, "--out", out, "--seed", "4"]);
    assert!(train.status.success(), "{}", text(&train.stderr));
    assert!(text(&train.stdout).starts_with("test accuracy"));
    let resolved = std::fs::read_to_string(out_dir.join("config.toml")).unwrap();
    assert!(resolved.starts_with("seed = 4\n"));
    let metrics = std::fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);

    let eval = condcomp(&["eval", "--config", &cfg, "--out", out, "--seed", "4"]);
    assert!(eval.status.success(), "{}", text(&eval.stderr));
    assert_eq!(
        text(&eval.stdout),
        text(&train.stdout),
        "evaluating the saved checkpoint reproduces the test record"
    );

    let flops = condcomp(&["flops", "--config", &cfg, "--out", out, "--checkpoint", &format!("{out}/checkpoint.json")]);
    assert!(flops.status.success(), "{}", text(&flops.stderr));
    assert!(text(&flops.stdout).lines().any(|l| l.starts_with("total")));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("flops.json")).unwrap()).unwrap();
    assert_eq!(report["n_samples"], 40);
    assert!(report["mean_dynamic_macs"].as_f64().unwrap() <= report["dense"]["total"]["macs"].as_f64().unwrap());

    let missing_checkpoint = condcomp(&["eval", "--config", &cfg, "--out", out, "--checkpoint", "nope.json"]);
    assert_eq!(missing_checkpoint.status.code(), Some(2));
}

#[test]
fn sample_test_reports_deviation_and_verdict() {
    let out = condcomp(&["sample-test", "--dims", "8", "--draws", "200000", "--seed", "7"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    let last = stdout.lines().last().unwrap();
    assert!(last.starts_with("max_deviation ") && last.ends_with("PASS"), "{stdout}");
    let worst: f64 = last.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(worst < 0.01);

    let strict = condcomp(&["sample-test", "--draws", "1000", "--tolerance", "0.0001"]);
    assert_eq!(strict.status.code(), Some(2));
    assert!(text(&strict.stdout).trim_end().ends_with("FAIL"));
}
