use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn binmask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_binmask"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("exp.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_owned()
}

const SPARSIFY: &str = r#"
trials = 2
[data]
kind = "planted"
n = 300
d = 8
k = 3
[network]
hidden = [12]
[train]
epochs = 5
batch_size = 32
"#;

#[test]
fn sparsify_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SPARSIFY);
    let out = dir.path().join("run");
    let o = binmask(&["sparsify", "--config", &cfg, "--out", out.to_str().unwrap(), "--jobs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for i in 0..2 {
        let csv = fs::read_to_string(out.join(format!("trial_{i}.csv"))).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,train_loss,test_loss,test_acc,val_auc,sparsity,mask_lr");
        assert_eq!(lines.count(), 5);
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["task"], "sparsify");
    assert_eq!(summary["partial"], false);
    let names: Vec<&str> = summary["aggregates"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["metric"].as_str().unwrap())
        .collect();
    assert!(names.contains(&"sparsity") && names.contains(&"test_accuracy"), "{names:?}");
}

#[test]
fn reruns_are_identical_and_seed_flag_matters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SPARSIFY);
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = binmask(&["sparsify", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", seed]);
        assert!(o.status.success());
        fs::read(out.join("trial_1.csv")).unwrap()
    };
    let a = run("a", "5");
    assert_eq!(a, run("b", "5"));
    assert_ne!(a, run("c", "6"));
}

#[test]
fn select_features_by_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
        trials = 1
        out = "sel"
        [data]
        kind = "planted"
        n = 400
        d = 10
        k = 3
        [network]
        hidden = [16]
        [train]
        epochs = 20
        batch_size = 32
        [select]
        k = 3
        "#,
    );
    let o = binmask(&["select-features", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("sel");
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let sel = &summary["selection"][0]["result"];
    assert_eq!(sel["selected"].as_array().unwrap().len(), 3);
    assert!(sel["lambda_star"].as_f64().unwrap() > 0.0);
    assert!(sel["search_steps"].as_u64().unwrap() >= 1);
    let file: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("selection.json")).unwrap()).unwrap();
    assert_eq!(file, summary["selection"]);
}

#[test]
fn regularize_compare_reports_arms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
        trials = 2
        [data]
        kind = "overfit_prone"
        n = 300
        d = 30
        [network]
        hidden = [8]
        [train]
        epochs = 3
        batch_size = 32
        [protocol]
        min_batches = 5
        [regularize]
        binmask = [1e-3]
        l1 = [1e-3]
        l2 = [0.1]
        dropout = [0.5]
        "#,
    );
    let out = dir.path().join("cmp");
    let o = binmask(&["regularize-compare", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let arms: Vec<&str> = summary["arms"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["name"].as_str().unwrap())
        .collect();
    assert_eq!(arms, ["none", "binmask_0.001", "l1_0.001", "l2_0.1", "dropout_0.5"]);
    assert!(out.join("binmask_0.001").join("trial_1.csv").exists());
    assert_eq!(summary["best_by_validation"]["l1"], "l1_0.001");
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SPARSIFY.replace("epochs = 5", "epochs = 0"));
    let o = binmask(&["sparsify", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("train") && err.contains("epochs"), "{err}");

    let cfg = write_config(dir.path(), &SPARSIFY.replace("k = 3", "k = 3\nwidth = 2"));
    let o = binmask(&["sparsify", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("width"));
}

#[test]
fn task_in_file_must_match_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("task = \"select_features\"\n{SPARSIFY}"));
    let o = binmask(&["sparsify", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("task"));
}

#[test]
fn missing_output_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SPARSIFY);
    let o = binmask(&["sparsify", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("out"));
}

#[test]
fn gradcheck_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gc.toml");
    fs::write(&cfg, "cases = 12\n").unwrap();
    let o = binmask(&[
        "gradcheck",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(r["cases"].as_array().unwrap().len(), 12);
}
