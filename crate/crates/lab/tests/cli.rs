use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mamba_icl_lab::output::check_manifest;
use serde_json::Value;

fn lab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mamba-lab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(dir.path(), &["train", "--set", "model.d=0"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    let o = lab(dir.path(), &["train", "--set", "model.no_such_key=1"]);
    assert_eq!(code(&o), 1);
    let o = lab(dir.path(), &["train", "--config", "/nonexistent/lab.toml"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("lab.toml");
    fs::write(&cfg, "[model]\nd = 3\nn = 12\ndh = 10\n").unwrap();
    let out = dir.path().join("run");
    let o = lab(&out, &["check-assumptions", "--config", cfg.to_str().unwrap(), "--set", "model.n=20", "--dh", "16"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&out.join("assumptions.json"));
    assert_eq!(report["d"], 3);
    assert_eq!(report["n"], 20);
    assert_eq!(report["d_h"], 16);
}

#[test]
fn injected_identity_fault_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(dir.path(), &["verify", "--fault-beta1-scale", "1.01", "--set", "verify.samples=100000"]);
    assert_eq!(code(&o), 2);
    let report = json(&dir.path().join("verify_report.json"));
    assert_eq!(report["passed"], false);
    let identity = report["checks"].as_array().unwrap().iter().find(|c| c["name"] == "beta identity").unwrap();
    assert_eq!(identity["passed"], false);
}

#[test]
fn verify_passes_with_reference_checks_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(dir.path(), &["verify"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = json(&dir.path().join("verify_report.json"));
    let checks = report["checks"].as_array().unwrap();
    assert!(checks.iter().all(|c| c["passed"] == true || c["reference"] == true));
    // The independent-labels forms are reported and rejected.
    let references: Vec<&Value> = checks.iter().filter(|c| c["reference"] == true).collect();
    assert_eq!(references.len(), 4);
    assert!(references.iter().all(|c| c["passed"] == false));
}

#[test]
fn divergent_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(dir.path(), &["train", "--d", "2", "--n", "5", "--dh", "8", "--eta", "5"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = json(&dir.path().join("train_summary.json"));
    assert_eq!(summary["status"], "diverged");
    assert!(check_manifest(dir.path()).unwrap().is_empty());
}

#[test]
fn train_writes_checkpoint_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(dir.path(), &["train", "--d", "2", "--n", "8", "--dh", "12", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.json", "trace.csv", "train_summary.json", "manifest.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let manifest = json(&dir.path().join("manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seeds"], serde_json::json!([3]));
    assert!(check_manifest(dir.path()).unwrap().is_empty());

    fs::write(dir.path().join("trace.csv"), "tampered\n").unwrap();
    let bad = check_manifest(dir.path()).unwrap();
    assert_eq!(bad.len(), 1);
    assert!(bad[0].ends_with("trace.csv"));
}

#[test]
fn empirical_training_writes_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(
        dir.path(),
        &["train", "--mode", "empirical", "--d", "2", "--n", "6", "--dh", "10", "--set", "model.iterations=5", "--set", "data.train_prompts=50"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("losses.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("epoch,loss,wdelta_norm"));
    assert_eq!(lines.count(), 6);
}

#[test]
fn assumption_violations_are_reported_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(dir.path(), &["check-assumptions", "--d", "4", "--n", "50", "--dh", "10", "--set", "model.confidence=0.5"]);
    assert_eq!(code(&o), 0);
    let report = json(&dir.path().join("assumptions.json"));
    assert_eq!(report["satisfied"], false);
    let constraints = report["constraints"].as_array().unwrap();
    assert!(constraints.iter().any(|c| c["passed"] == false));
    assert!(constraints.iter().any(|c| c["passed"] == true));
}

#[test]
fn check_grad_and_oracle_pass() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(dir.path(), &["check-grad"]);
    assert_eq!(code(&o), 0);
    assert_eq!(json(&dir.path().join("grad_check.json"))["passed"], true);
    let o = lab(dir.path(), &["oracle", "--d", "3", "--n", "6", "--set", "verify.samples=100000"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&dir.path().join("oracle_report.json"))["passed"], true);
}

const SMALL_FIGURES: &[&str] = &[
    "figures",
    "--dh",
    "20",
    "--trials",
    "2",
    "--set",
    "figures.n_values=[10, 20]",
    "--set",
    "figures.cosine_prompts=200",
    "--set",
    "data.test_prompts=200",
];

#[test]
fn figures_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&lab(&a, SMALL_FIGURES)), 0);
    assert_eq!(code(&lab(&b, SMALL_FIGURES)), 0);
    for f in ["heatmap.csv", "cosine_trace.csv", "loss_vs_n.csv", "loss_vs_n_trials.csv", "figures_summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let header = fs::read_to_string(a.join("loss_vs_n.csv")).unwrap();
    assert!(header.starts_with("N,mean_loss,std_loss,bound,theoretical_loss\n"));
    assert_eq!(header.lines().count(), 3);
}

#[test]
fn tables_run_on_a_small_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = lab(
        dir.path(),
        &[
            "tables",
            "--trials",
            "2",
            "--dh",
            "20",
            "--set",
            "tables.baseline_n=[10, 80]",
            "--set",
            "tables.short_d=6",
            "--set",
            "tables.short_n=[4, 6]",
            "--set",
            "tables.width_dh=[6, 8]",
            "--set",
            "tables.wdelta_epochs=5",
            "--set",
            "tables.wdelta_warm_start=100",
            "--set",
            "data.train_prompts=100",
            "--set",
            "data.test_prompts=100",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let headers = [
        ("table1_baseline.csv", "N,mamba_loss,linear_attention_loss"),
        ("table2_short_context.csv", "N,experimental_loss,experimental_std,theoretical_loss,relative_gap"),
        ("table2_trials.csv", "N,d_h,trial,seed,status,iterations,test_loss,test_se"),
        ("table3_wdelta.csv", "epoch,wdelta_norm,wdelta_norm_sq"),
        ("table4_hidden_width.csv", "d_h,mean_loss,std_loss,theoretical_loss"),
    ];
    for (file, header) in headers {
        let text = fs::read_to_string(dir.path().join(file)).unwrap();
        assert_eq!(text.lines().next(), Some(header), "{file}");
    }
    let baseline = fs::read_to_string(dir.path().join("table1_baseline.csv")).unwrap();
    assert!(baseline.contains("80,0.625396,0.604396"), "{baseline}");
    assert!(check_manifest(dir.path()).unwrap().is_empty());
}
