use std::path::Path;
use std::process::{Command, Output};

fn latentflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latentflow"))
        .current_dir(dir)
        .env_remove("LATENTFLOW_CORRUPT_TANH_BACKWARD")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_str(&ok(out)).unwrap()
}

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| vec!["train", "--posterior", "iaf", "--steps", "150", "--seed", "5", "--out", out];
    ok(&latentflow(dir.path(), &args("a")));
    ok(&latentflow(dir.path(), &args("b")));
    for f in ["metrics.csv", "checkpoint.ckpt"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
    let csv = std::fs::read_to_string(dir.path().join("a/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 151);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a/summary.json")).unwrap()).unwrap();
    let other: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("b/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["train_elbo"], other["train_elbo"]);
    assert_eq!(summary["holdout_elbo"], other["holdout_elbo"]);
    assert_eq!(summary["steps"], 150);
    assert!(summary["train_elbo"].as_f64().unwrap().is_finite());
}

#[test]
fn resumed_run_splices_into_the_uninterrupted_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.cfg"), "posterior=iaf\nseed=11\nbatch_size=3\nholdout_fraction=0\n").unwrap();
    ok(&latentflow(d, &["train", "--config", "run.cfg", "--steps", "120", "--out", "full"]));
    ok(&latentflow(d, &["train", "--config", "run.cfg", "--steps", "50", "--out", "first"]));
    ok(&latentflow(d, &["train", "--config", "run.cfg", "--steps", "120", "--resume", "first/checkpoint.ckpt", "--out", "second"]));

    let full = std::fs::read_to_string(d.join("full/metrics.csv")).unwrap();
    let first = std::fs::read_to_string(d.join("first/metrics.csv")).unwrap();
    let second = std::fs::read_to_string(d.join("second/metrics.csv")).unwrap();
    let spliced: String = first.lines().chain(second.lines().skip(1)).map(|l| format!("{l}\n")).collect();
    assert_eq!(spliced, full);
    assert_eq!(
        std::fs::read(d.join("full/checkpoint.ckpt")).unwrap(),
        std::fs::read(d.join("second/checkpoint.ckpt")).unwrap()
    );
}

#[test]
fn single_sample_iwae_equals_eval_elbo() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&latentflow(d, &["train", "--dataset", "lingauss", "--steps", "100", "--out", "m"]));
    let ck = ["--dataset", "lingauss", "--checkpoint", "m/checkpoint.ckpt", "--seed", "3", "--json"];
    let elbo = json(&latentflow(d, &[&["eval-elbo"][..], &ck].concat()));
    let iwae1 = json(&latentflow(d, &[&["estimate-loglik", "--L", "1"][..], &ck].concat()));
    assert_eq!(elbo["values"], iwae1["values"]);
    assert_eq!(elbo["mean"], iwae1["mean"]);
    assert_eq!(elbo["values"].as_array().unwrap().len(), 1000);

    let iwae50 = json(&latentflow(d, &[&["estimate-loglik", "--L", "50"][..], &ck].concat()));
    assert!(iwae50["mean"].as_f64().unwrap() >= elbo["mean"].as_f64().unwrap());
    let exact = iwae50["generator_logpx_mean"].as_f64().unwrap();
    assert!(exact.is_finite());
}

#[test]
fn gradcheck_passes_and_detects_a_corrupted_rule() {
    let dir = tempfile::tempdir().unwrap();
    let report = json(&latentflow(dir.path(), &["gradcheck", "--json"]));
    let rows = report["results"].as_array().unwrap();
    assert!(rows.len() >= 10);
    for r in rows {
        assert_eq!(r["pass"], true, "{r}");
        assert!(!r["worst_parameter"].as_str().unwrap().is_empty());
    }

    let bad = Command::new(env!("CARGO_BIN_EXE_latentflow"))
        .current_dir(dir.path())
        .env("LATENTFLOW_CORRUPT_TANH_BACKWARD", "1")
        .args(["gradcheck", "--json"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&bad.stdout).unwrap();
    assert!(report["results"].as_array().unwrap().iter().any(|r| r["pass"] == false));
}

#[test]
fn compare_estimators_is_deterministic_and_capped() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = ["compare-estimators", "--set", "latent_dim=2", "--set", "encoder_hidden=3", "--samples", "3000", "--json"];
    let a = json(&latentflow(d, &[&args[..], &["--out", "a"]].concat()));
    let b = json(&latentflow(d, &[&args[..], &["--out", "b"]].concat()));
    assert_eq!(
        std::fs::read(d.join("a/compare_estimators.csv")).unwrap(),
        std::fs::read(d.join("b/compare_estimators.csv")).unwrap()
    );
    assert!(a["variance_ratio"].as_f64().unwrap() > 1.0);
    assert_eq!(a["variance_ratio"], b["variance_ratio"]);

    let big = latentflow(d, &["compare-estimators", "--set", "latent_dim=8"]);
    assert_eq!(big.status.code(), Some(1));
    let flow = latentflow(d, &["compare-estimators", "--posterior", "iaf"]);
    assert_eq!(flow.status.code(), Some(1));
}

#[test]
fn sample_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&latentflow(dir.path(), &["sample", "--samples", "5", "--out", "s"]));
    assert!(out.contains("5 samples"));
    let csv = std::fs::read_to_string(dir.path().join("s/samples.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 2 + 16 + 1);
    assert_eq!(lines.count(), 5);
}

#[test]
fn configuration_errors_have_stable_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.cfg"), "steps=10\n\nlatent_widths=3\n").unwrap();
    let out = latentflow(d, &["train", "--config", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.cfg:3") && err.contains("latent_widths"), "{err}");

    std::fs::write(d.join("range.cfg"), "iaf_steps=0\n").unwrap();
    let out = latentflow(d, &["train", "--config", "range.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("range.cfg:1"));

    assert_eq!(latentflow(d, &["train", "--free-bits", "-0.5"]).status.code(), Some(1));
    assert_eq!(latentflow(d, &["estimate-loglik", "--L", "0"]).status.code(), Some(1));
    assert_eq!(latentflow(d, &["train", "--config", "missing.cfg"]).status.code(), Some(3));
    assert_eq!(latentflow(d, &["eval-elbo", "--checkpoint", "missing.ckpt"]).status.code(), Some(3));
    assert_eq!(latentflow(d, &["eval-elbo"]).status.code(), Some(1));

    std::fs::write(d.join("junk.ckpt"), b"LFLOWCKP garbage").unwrap();
    assert_eq!(latentflow(d, &["eval-elbo", "--checkpoint", "junk.ckpt"]).status.code(), Some(3));

    let out = latentflow(d, &["train", "--dataset", "toy4", "--set", "data_dim=7"]);
    assert_eq!(out.status.code(), Some(1));
    ok(&latentflow(d, &["train", "--free-bits", "0.125", "--steps", "5", "--out", "fb"]));
}

#[test]
fn divergence_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = latentflow(d, &["train", "--set", "optimizer=sgd", "--set", "lr=100000", "--steps", "500", "--out", "div"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("div/last_good.ckpt").is_file());
    assert!(d.join("div/metrics.csv").is_file());
    ok(&latentflow(d, &["eval-elbo", "--checkpoint", "div/last_good.ckpt"]));
}

#[test]
fn idx_dataset_loads() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut bytes = vec![0, 0, 0x08, 3, 0, 0, 0, 6, 0, 0, 0, 2, 0, 0, 0, 2];
    bytes.extend((0..24u8).map(|i| i * 10));
    std::fs::write(d.join("tiny.idx"), &bytes).unwrap();
    let out = json(&latentflow(d, &["train", "--dataset", "idx:tiny.idx", "--steps", "20", "--json", "--out", "r"]));
    assert_eq!(out["steps"], 20);
    std::fs::write(d.join("short.idx"), &bytes[..20]).unwrap();
    assert_eq!(latentflow(d, &["train", "--dataset", "idx:short.idx"]).status.code(), Some(3));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&latentflow(d, &["train", "--dataset", "lingauss", "--steps", "20", "--out", "m"]));
    let run = |threads: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_latentflow"))
            .current_dir(d)
            .env("LATENTFLOW_THREADS", threads)
            .args(["estimate-loglik", "--dataset", "lingauss", "--checkpoint", "m/checkpoint.ckpt", "--L", "20", "--json"])
            .output()
            .unwrap();
        json(&out)
    };
    assert_eq!(run("1"), run("4"));
    let bad = Command::new(env!("CARGO_BIN_EXE_latentflow"))
        .current_dir(d)
        .env("LATENTFLOW_THREADS", "0")
        .arg("gradcheck")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
