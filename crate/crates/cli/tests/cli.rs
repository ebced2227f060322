use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fedafd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedafd"))
        .args(args)
        .env("FEDAFD_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path, extra: &str) -> String {
    let p = dir.join(format!("cfg_{}.txt", extra.len()));
    fs::write(
        &p,
        format!("n_clients = 10\nn_per_client = 30\nrounds = 5\neval_every = 1\ntarget_accuracy = 0.3\n{extra}\n"),
    )
    .unwrap();
    p.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_outputs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let o = fedafd(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "4"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read(out_a.join("none/seed_4/metrics.csv")).unwrap();
    let b = fs::read(out_b.join("none/seed_4/metrics.csv")).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("round,cum_seconds,cum_down_bytes,cum_up_bytes,train_loss,test_accuracy\n"));
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn five_seeds_report_mean_and_sample_std() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "parallel_seeds = true");
    let out = dir.path().join("o");
    let o = fedafd(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "1,2,3,4,5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("none/summary.json")).unwrap()).unwrap();
    let acc: Vec<f64> = s["final_accuracy"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(acc.len(), 5);
    let mean = acc.iter().sum::<f64>() / 5.0;
    let std = (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
    assert!((s["final_accuracy_mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!((s["final_accuracy_std"].as_f64().unwrap() - std).abs() < 1e-12);
}

#[test]
fn invalid_fdr_is_rejected_by_field() {
    let o = fedafd(&["run", "--fdr", "1.0", "--rounds", "0"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("fdr must be in [0,1)"), "{}", stderr(&o));
}

#[test]
fn large_fdr_warns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "rounds = 0");
    let o = fedafd(&["run", "--config", &cfg, "--mode", "fd", "--fdr", "0.6", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("10%-50%"), "{}", stderr(&o));
}

#[test]
fn unknown_key_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "learning_rate = 0.1");
    let o = fedafd(&["run", "--config", &cfg]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn compare_reports_speedup() {
    let dir = tempfile::tempdir().unwrap();
    let base = small_config(dir.path(), "");
    let variant = small_config(dir.path(), "mode = afd_multi\nquant8_downlink = true\ndgc_uplink = true");
    let out = dir.path().join("cmp");
    let o = fedafd(&["compare", "--baseline", &base, "--variant", &variant, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("afd_multi/summary.json")).unwrap()).unwrap();
    assert!(s.get("speedup_ratio").is_some());
    assert_eq!(s["baseline_run_id"], "none");
    assert!(String::from_utf8_lossy(&o.stdout).contains("speedup vs none"));
}

#[test]
fn gen_data_writes_binary_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "dim = 8");
    let path = dir.path().join("data.bin");
    let o = fedafd(&["gen-data", "--config", &cfg, "--output", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"FAFDDATA");
    assert_eq!(bytes.len(), 8 + 20 + 8 + 10 * 8 + 300 * (8 * 8 + 4));
}
