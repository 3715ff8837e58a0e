//! Generator sanity, file-format round trips, and checkpoint fidelity.

mod common;

use aggp::data::{
    aggregate, kmeans_init, load_model, load_task_csv, parse_checkpoint_json, save_model,
    save_task_csv, support_centroids, synth_grid_analog, synth_poisson_two_task, TaskDataset,
};
use aggp::inference::{fit, ModelSpec, TrainConfig};
use aggp::kernels::EqParams;
use aggp::likelihoods::LikelihoodKind;
use aggp::predict::predict_f;
use aggp::supports::Support;
use std::collections::BTreeMap;

#[test]
fn generator_mean_count_within_prior_band() {
    // mean of exp(f) with f ~ N(0, ~1) is e^0.5 ~ 1.65; with roughly 25
    // independent lengthscale patches per seed and 20 seeds the grand mean
    // concentrates well inside [1.0, 2.6]
    let mut grand = 0.0;
    for seed in 0..20 {
        let data = synth_poisson_two_task(seed).unwrap();
        let all: Vec<f64> = data.train[0]
            .rows
            .iter()
            .chain(&data.test.rows)
            .map(|(_, y)| *y)
            .collect();
        grand += all.iter().sum::<f64>() / all.len() as f64;
    }
    grand /= 20.0;
    assert!(
        (1.0..=2.6).contains(&grand),
        "grand mean count {grand} outside the prior sanity band"
    );
}

#[test]
fn emitted_csvs_reproduce_the_in_memory_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_poisson_two_task(11).unwrap();
    for (ds, name) in [
        (&data.train[0], "train_task1.csv"),
        (&data.train[1], "train_task2.csv"),
        (&data.test, "test_task1.csv"),
    ] {
        let path = dir.path().join(name);
        save_task_csv(&path, ds).unwrap();
        let loaded = load_task_csv(&path, ds.name.clone(), ds.likelihood.clone()).unwrap();
        assert_eq!(ds.rows.len(), loaded.rows.len());
        for ((sa, ya), (sb, yb)) in ds.rows.iter().zip(&loaded.rows) {
            assert_eq!(sa, sb);
            assert_eq!(ya.to_bits(), yb.to_bits());
        }
    }
}

#[test]
fn checkpoint_round_trip_reproduces_predictions_bitwise() {
    let data = synth_poisson_two_task(5).unwrap();
    let train: Vec<TaskDataset> = data.train.clone();
    let centroids = support_centroids(&train);
    let z = kmeans_init(&centroids, 8, 5).unwrap();
    let spec = ModelSpec::new(vec![EqParams::unit(vec![12.0]).unwrap()], vec![1], z);
    let config = TrainConfig {
        e_steps: 3,
        m_steps: 3,
        cycles: 3,
        seed: 5,
        ..TrainConfig::default()
    };
    let result = fit(&train, &config, &spec).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let mut meta = BTreeMap::new();
    meta.insert("experiment".to_string(), "round-trip".to_string());
    save_model(&path, &result.model, config.seed, &meta).unwrap();
    let restored = load_model(&path).unwrap();
    assert_eq!(restored.seed, 5);
    assert_eq!(restored.metadata.get("experiment").unwrap(), "round-trip");

    let rows: Vec<(usize, &Support)> = data.test.rows.iter().map(|(s, _)| (0, s)).collect();
    let a = predict_f(&rows, &result.model).unwrap();
    let b = predict_f(&rows, &restored.model).unwrap();
    for i in 0..rows.len() {
        assert_eq!(a.mean[i][0].to_bits(), b.mean[i][0].to_bits());
        assert_eq!(a.var[i][0].to_bits(), b.var[i][0].to_bits());
    }
}

#[test]
fn checkpoint_rejects_corrupt_documents() {
    assert!(parse_checkpoint_json("{", "x.json").is_err());
    assert!(parse_checkpoint_json("{}", "x.json").is_err());
    let wrong_version = r#"{"version":9,"p":1,"q":1,"ranks":[1],"lengthscales":[[1.0]],
        "mixing":[[1.0]],"latent_functions":1,"likelihoods":[{"kind":"poisson"}],
        "num_inducing":1,"z":[0.0],"mu":[0.0],"l_tril":[1.0],
        "quad_resolution":32,"jitter":1e-6,"gh_order":20,"seed":0,"metadata":{}}"#;
    assert!(parse_checkpoint_json(wrong_version, "x.json").is_err());
    let bad_lengths = r#"{"version":1,"p":1,"q":1,"ranks":[1],"lengthscales":[[1.0]],
        "mixing":[[1.0]],"latent_functions":1,"likelihoods":[{"kind":"poisson"}],
        "num_inducing":2,"z":[0.0],"mu":[0.0],"l_tril":[1.0],
        "quad_resolution":32,"jitter":1e-6,"gh_order":20,"seed":0,"metadata":{}}"#;
    assert!(parse_checkpoint_json(bad_lengths, "x.json").is_err());
}

#[test]
fn polytope_rows_need_their_companion_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("poly.csv");
    std::fs::write(&path, "kind,coords...,y\npolytope,1.5\n").unwrap();
    let err = load_task_csv(&path, "poly", LikelihoodKind::HetGaussian).unwrap_err();
    assert!(err.to_string().contains("polygons.json"), "{err}");
}

#[test]
fn grid_analog_shapes_and_split() {
    let data = synth_grid_analog(3).unwrap();
    assert_eq!(data.train_points.rows.len(), 1640);
    assert_eq!(data.test_points.rows.len(), 1000);
    // aggregating the training subset keeps only populated complete blocks
    let agg = aggregate(&data.train_points, &[2.0, 2.0]).unwrap();
    assert!(agg.rows.len() <= 660);
    assert!(agg.rows.len() > 600, "got {}", agg.rows.len());
    for (s, _) in &agg.rows {
        assert!(matches!(s, Support::Box(_)));
    }
    // deterministic
    let again = synth_grid_analog(3).unwrap();
    assert_eq!(
        data.train_points.rows[0].1.to_bits(),
        again.train_points.rows[0].1.to_bits()
    );
}

#[test]
fn aggregate_rejects_off_grid_and_non_point_inputs() {
    let ds = TaskDataset::new(
        "bad",
        LikelihoodKind::Gaussian {
            noise_variance: 1.0,
        },
        vec![
            (Support::point(vec![0.0]).unwrap(), 1.0),
            (Support::point(vec![1.0]).unwrap(), 2.0),
            (Support::point(vec![2.703]).unwrap(), 3.0),
        ],
    )
    .unwrap();
    assert!(aggregate(&ds, &[2.0]).is_err());

    let boxes = TaskDataset::new(
        "boxes",
        LikelihoodKind::Gaussian {
            noise_variance: 1.0,
        },
        vec![(Support::interval(0.0, 1.0).unwrap(), 1.0)],
    )
    .unwrap();
    assert!(aggregate(&boxes, &[2.0]).is_err());
}
