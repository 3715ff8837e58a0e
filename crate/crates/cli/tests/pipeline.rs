//! End-to-end pipeline through the binary: synth -> train -> predict ->
//! eval, plus determinism and failure diagnostics.

use std::path::Path;
use std::process::Command;

fn aggp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aggp"))
}

fn write_config(path: &Path, tasks: usize, seed: u64) {
    let likelihoods = vec![r#"{"kind": "poisson"}"#; tasks].join(",");
    let cfg = format!(
        r#"{{
            "seed": {seed},
            "num_latent": 1,
            "num_inducing": 8,
            "init_lengthscale": 15.0,
            "likelihoods": [{likelihoods}],
            "train": {{"cycles": 3, "e_steps": 3, "m_steps": 3, "learning_rate": 0.02}}
        }}"#
    );
    std::fs::write(path, cfg).unwrap();
}

#[test]
fn synth_train_predict_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let st = aggp()
        .args(["synth", "--seed", "1", "--out-dir"])
        .arg(d.join("data"))
        .status()
        .unwrap();
    assert!(st.success());
    for f in [
        "train_task1.csv",
        "train_task2.csv",
        "test_task1.csv",
        "metadata.json",
    ] {
        assert!(d.join("data").join(f).exists(), "missing {f}");
    }

    write_config(&d.join("config.json"), 2, 1);
    let st = aggp()
        .arg("train")
        .arg("--data")
        .arg(d.join("data/train_task1.csv"))
        .arg(d.join("data/train_task2.csv"))
        .arg("--config")
        .arg(d.join("config.json"))
        .arg("--out")
        .arg(d.join("model.json"))
        .arg("--trace")
        .arg(d.join("trace.csv"))
        .status()
        .unwrap();
    assert!(st.success());
    let trace = std::fs::read_to_string(d.join("trace.csv")).unwrap();
    assert!(trace.starts_with("cycle,step,elbo\n"));
    assert!(trace.lines().count() > 3);

    let st = aggp()
        .arg("predict")
        .arg("--model")
        .arg(d.join("model.json"))
        .arg("--test")
        .arg(d.join("data/test_task1.csv"))
        .arg("--out")
        .arg(d.join("pred.csv"))
        .status()
        .unwrap();
    assert!(st.success());

    let out = aggp()
        .arg("eval")
        .arg("--pred")
        .arg(d.join("pred.csv"))
        .arg("--truth")
        .arg(d.join("data/test_task1.csv"))
        .arg("--train")
        .arg(d.join("data/train_task1.csv"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    let smse_line = lines.next().unwrap();
    let snlp_line = lines.next().unwrap();
    assert!(smse_line.starts_with("smse,"), "{smse_line}");
    assert!(snlp_line.starts_with("snlp,"), "{snlp_line}");
    let smse: f64 = smse_line[5..].parse().unwrap();
    assert!(smse.is_finite() && smse >= 0.0);
    let snlp: f64 = snlp_line[5..].parse().unwrap();
    assert!(snlp.is_finite());
}

#[test]
fn eval_of_perfect_predictions_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let st = aggp()
        .args(["synth", "--seed", "2", "--out-dir"])
        .arg(d)
        .status()
        .unwrap();
    assert!(st.success());

    // hand-build a prediction file whose means equal the truth
    let truth = std::fs::read_to_string(d.join("test_task1.csv")).unwrap();
    let mut pred = String::from("row,y_mean,y_var,log_density\n");
    for (i, line) in truth.lines().skip(1).enumerate() {
        let y = line.rsplit(',').next().unwrap();
        pred.push_str(&format!("{i},{y},1.0,-0.5\n"));
    }
    std::fs::write(d.join("pred.csv"), pred).unwrap();

    let out = aggp()
        .arg("eval")
        .arg("--pred")
        .arg(d.join("pred.csv"))
        .arg("--truth")
        .arg(d.join("test_task1.csv"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next().unwrap(), "smse,0");
}

#[test]
fn identical_seeds_give_byte_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for run in ["a", "b"] {
        let st = aggp()
            .args(["synth", "--seed", "7", "--out-dir"])
            .arg(d.join(run))
            .status()
            .unwrap();
        assert!(st.success());
        write_config(&d.join(format!("{run}.json")), 2, 7);
        let st = aggp()
            .arg("train")
            .arg("--data")
            .arg(d.join(run).join("train_task1.csv"))
            .arg(d.join(run).join("train_task2.csv"))
            .arg("--config")
            .arg(d.join(format!("{run}.json")))
            .arg("--out")
            .arg(d.join(format!("model_{run}.json")))
            .status()
            .unwrap();
        assert!(st.success());
    }
    for f in ["train_task1.csv", "train_task2.csv", "test_task1.csv"] {
        let a = std::fs::read(d.join("a").join(f)).unwrap();
        let b = std::fs::read(d.join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
    let a = std::fs::read(d.join("model_a.json")).unwrap();
    let b = std::fs::read(d.join("model_b.json")).unwrap();
    assert_eq!(a, b, "model checkpoints differ between identical runs");
}

#[test]
fn failures_name_the_offending_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let out = aggp()
        .arg("predict")
        .arg("--model")
        .arg(d.join("missing.json"))
        .arg("--test")
        .arg(d.join("missing.csv"))
        .arg("--out")
        .arg(d.join("pred.csv"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("missing.json"), "stderr: {err}");

    // malformed config: unknown likelihood
    std::fs::write(
        d.join("bad.json"),
        r#"{"seed":1,"num_latent":1,"num_inducing":4,"init_lengthscale":1.0,
           "likelihoods":[{"kind":"cauchy"}]}"#,
    )
    .unwrap();
    std::fs::write(d.join("t.csv"), "kind,coords...,y\npoint,0.0,1\n").unwrap();
    let out = aggp()
        .arg("train")
        .arg("--data")
        .arg(d.join("t.csv"))
        .arg("--config")
        .arg(d.join("bad.json"))
        .arg("--out")
        .arg(d.join("m.json"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("cauchy"), "stderr: {err}");

    // dimension mismatch between tasks
    write_config(&d.join("two.json"), 2, 1);
    std::fs::write(d.join("t1.csv"), "kind,coords...,y\npoint,0.0,1\n").unwrap();
    std::fs::write(d.join("t2.csv"), "kind,coords...,y\npoint,0.0,1.0,1\n").unwrap();
    let out = aggp()
        .arg("train")
        .arg("--data")
        .arg(d.join("t1.csv"))
        .arg(d.join("t2.csv"))
        .arg("--config")
        .arg(d.join("two.json"))
        .arg("--out")
        .arg(d.join("m.json"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("dimension"), "stderr: {err}");
}
