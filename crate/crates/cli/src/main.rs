//! End-to-end experiment driver: generate synthetic data, train, predict,
//! evaluate. All randomness is controlled by explicit seeds; identical
//! invocations produce byte-identical outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use aggp::data::{
    kmeans_init, load_model, load_task_csv, save_model, save_task_csv, support_centroids,
    synth_poisson_two_task, ExperimentConfig, TaskDataset,
};
use aggp::inference::{fit, MixingInit, ModelSpec, TrainConfig};
use aggp::kernels::EqParams;
use aggp::predict::{predict_y, smse, snlp};
use aggp::supports::Support;

#[derive(Parser)]
#[command(
    name = "aggp",
    version,
    about = "Multi-task Gaussian process regression over aggregated observations"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the two-task synthetic Poisson experiment (unit- and
    /// two-unit interval supports on [0, 250] with a test gap [130, 180]).
    Synth {
        #[arg(long)]
        seed: u64,
        /// Directory for train_task1.csv, train_task2.csv, test_task1.csv,
        /// and metadata.json.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model on one CSV per task.
    Train {
        /// Task CSVs, one per task, in task order.
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
        /// Experiment config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Output model checkpoint (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Optional ELBO trace CSV (columns cycle,step,elbo; rows with
        /// step one past the last optimization step hold the full-batch
        /// value of that cycle).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Predict at the supports of a test CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Output CSV (columns row,y_mean,y_var,log_density).
        #[arg(long)]
        out: PathBuf,
        /// Task the test rows belong to.
        #[arg(long, default_value_t = 0)]
        task: usize,
    },
    /// Print SMSE (and SNLP when --train is given) as `metric,value` lines.
    Eval {
        /// Prediction CSV written by `predict`.
        #[arg(long)]
        pred: PathBuf,
        /// Truth task CSV with observed y values.
        #[arg(long)]
        truth: PathBuf,
        /// Training task CSV for the SNLP baseline moments.
        #[arg(long)]
        train: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { seed, out_dir } => cmd_synth(seed, &out_dir),
        Cmd::Train {
            data,
            config,
            out,
            trace,
        } => cmd_train(&data, &config, &out, trace.as_deref()),
        Cmd::Predict {
            model,
            test,
            out,
            task,
        } => cmd_predict(&model, &test, &out, task),
        Cmd::Eval { pred, truth, train } => cmd_eval(&pred, &truth, train.as_deref()),
    }
}

fn cmd_synth(seed: u64, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let data = synth_poisson_two_task(seed)?;
    save_task_csv(out_dir.join("train_task1.csv"), &data.train[0])?;
    save_task_csv(out_dir.join("train_task2.csv"), &data.train[1])?;
    save_task_csv(out_dir.join("test_task1.csv"), &data.test)?;
    let meta = serde_json::to_string_pretty(&data.metadata)?;
    std::fs::write(out_dir.join("metadata.json"), meta)?;
    println!("wrote 3 CSVs and metadata.json to {}", out_dir.display());
    Ok(())
}

fn cmd_train(data_paths: &[PathBuf], config_path: &Path, out: &Path, trace: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(config_path)
        .with_context(|| format!("reading {}", config_path.display()))?;
    let cfg = ExperimentConfig::from_json(&text, &config_path.display().to_string())?;
    if cfg.likelihoods.len() != data_paths.len() {
        bail!(
            "{}: config lists {} likelihoods but {} data files were given",
            config_path.display(),
            cfg.likelihoods.len(),
            data_paths.len()
        );
    }
    let mut datasets = Vec::with_capacity(data_paths.len());
    for (path, lk) in data_paths.iter().zip(&cfg.likelihoods) {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "task".into());
        datasets.push(
            load_task_csv(path, name, lk.to_kind()?)
                .with_context(|| format!("loading {}", path.display()))?,
        );
    }
    let p = datasets[0]
        .dim()
        .context("first task dataset is empty")?;

    let centroids = support_centroids(&datasets);
    let inducing = kmeans_init(&centroids, cfg.num_inducing, cfg.seed)?;
    let ranks = cfg.ranks.clone().unwrap_or(vec![1; cfg.num_latent]);
    let kernels = (0..cfg.num_latent)
        .map(|_| EqParams::unit(vec![cfg.init_lengthscale; p]))
        .collect::<aggp::Result<Vec<_>>>()?;
    let mut spec = ModelSpec::new(kernels, ranks, inducing);
    if let Some(r) = cfg.quad_resolution {
        spec.quad_resolution = r;
    }
    if let Some(j) = cfg.jitter {
        spec.jitter = j;
    }
    if let Some(o) = cfg.gh_order {
        spec.gh_order = o;
    }
    spec.mixing_init = MixingInit::RandomNormal;

    let defaults = TrainConfig::default();
    let t = &cfg.train;
    let train_cfg = TrainConfig {
        minibatch: t.minibatch.unwrap_or(defaults.minibatch),
        e_steps: t.e_steps.unwrap_or(defaults.e_steps),
        m_steps: t.m_steps.unwrap_or(defaults.m_steps),
        cycles: t.cycles.unwrap_or(defaults.cycles),
        learning_rate: t.learning_rate.unwrap_or(defaults.learning_rate),
        beta1: t.beta1.unwrap_or(defaults.beta1),
        beta2: t.beta2.unwrap_or(defaults.beta2),
        epsilon: t.epsilon.unwrap_or(defaults.epsilon),
        tolerance: t.tolerance.unwrap_or(defaults.tolerance),
        seed: cfg.seed,
    };

    let result = fit(&datasets, &train_cfg, &spec)?;

    let mut metadata = BTreeMap::new();
    metadata.insert("initial_elbo".into(), result.initial_elbo.to_string());
    metadata.insert("final_elbo".into(), result.final_elbo.to_string());
    metadata.insert("cycles_run".into(), result.cycle_elbo.len().to_string());
    for (i, ds) in datasets.iter().enumerate() {
        metadata.insert(format!("task{i}"), ds.name.clone());
    }
    save_model(out, &result.model, cfg.seed, &metadata)?;

    if let Some(trace_path) = trace {
        let mut csv = String::from("cycle,step,elbo\n");
        let steps_per_cycle = train_cfg.e_steps + train_cfg.m_steps;
        for t in &result.trace {
            let _ = writeln!(csv, "{},{},{}", t.cycle, t.step, t.elbo);
        }
        for (cycle, elbo) in result.cycle_elbo.iter().enumerate() {
            let _ = writeln!(csv, "{cycle},{steps_per_cycle},{elbo}");
        }
        std::fs::write(trace_path, csv)?;
    }
    println!(
        "trained on {} tasks: ELBO {} -> {} over {} cycles",
        datasets.len(),
        result.initial_elbo,
        result.final_elbo,
        result.cycle_elbo.len()
    );
    Ok(())
}

fn cmd_predict(model_path: &Path, test: &Path, out: &Path, task: usize) -> Result<()> {
    let saved = load_model(model_path)
        .with_context(|| format!("loading {}", model_path.display()))?;
    if task >= saved.model.likelihoods.len() {
        bail!(
            "task {task} out of range: the model has {} tasks",
            saved.model.likelihoods.len()
        );
    }
    let ds = load_task_csv(test, "test", saved.model.likelihoods[task].clone())
        .with_context(|| format!("loading {}", test.display()))?;
    let rows: Vec<(usize, &Support)> = ds.rows.iter().map(|(s, _)| (task, s)).collect();
    let ys: Vec<f64> = ds.rows.iter().map(|(_, y)| *y).collect();
    let pred = predict_y(&rows, &saved.model, Some(&ys))?;

    let mut csv = String::from("row,y_mean,y_var,log_density\n");
    for i in 0..rows.len() {
        match pred.log_density[i] {
            Some(ld) => {
                let _ = writeln!(csv, "{i},{},{},{ld}", pred.y_mean[i], pred.y_var[i]);
            }
            None => {
                let _ = writeln!(csv, "{i},{},{},", pred.y_mean[i], pred.y_var[i]);
            }
        }
    }
    std::fs::write(out, csv)?;
    println!("wrote {} predictions to {}", rows.len(), out.display());
    Ok(())
}

struct PredRows {
    y_mean: Vec<f64>,
    log_density: Vec<Option<f64>>,
}

fn load_pred_csv(path: &Path) -> Result<PredRows> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut y_mean = Vec::new();
    let mut log_density = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "row,y_mean,y_var,log_density" {
                bail!("{}:1: unexpected prediction header", path.display());
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            bail!("{}:{}: expected 4 fields", path.display(), i + 1);
        }
        y_mean.push(
            fields[1]
                .parse::<f64>()
                .with_context(|| format!("{}:{}: bad y_mean", path.display(), i + 1))?,
        );
        log_density.push(if fields[3].is_empty() {
            None
        } else {
            Some(
                fields[3]
                    .parse::<f64>()
                    .with_context(|| format!("{}:{}: bad log_density", path.display(), i + 1))?,
            )
        });
    }
    Ok(PredRows { y_mean, log_density })
}

fn task_targets(ds: &TaskDataset) -> Vec<f64> {
    ds.rows.iter().map(|(_, y)| *y).collect()
}

fn cmd_eval(pred_path: &Path, truth_path: &Path, train_path: Option<&Path>) -> Result<()> {
    let pred = load_pred_csv(pred_path)?;
    // the truth likelihood kind is irrelevant for the metrics; HetGaussian
    // accepts any finite y
    let truth = load_task_csv(truth_path, "truth", aggp::likelihoods::LikelihoodKind::HetGaussian)
        .with_context(|| format!("loading {}", truth_path.display()))?;
    let y_true = task_targets(&truth);
    if y_true.len() != pred.y_mean.len() {
        bail!(
            "{} has {} rows but {} has {}",
            truth_path.display(),
            y_true.len(),
            pred_path.display(),
            pred.y_mean.len()
        );
    }
    println!("smse,{}", smse(&y_true, &pred.y_mean)?);
    if let Some(train_path) = train_path {
        let train =
            load_task_csv(train_path, "train", aggp::likelihoods::LikelihoodKind::HetGaussian)
                .with_context(|| format!("loading {}", train_path.display()))?;
        let lds: Vec<f64> = pred
            .log_density
            .iter()
            .map(|ld| ld.context("prediction file has no log densities; SNLP unavailable"))
            .collect::<Result<_>>()?;
        println!("snlp,{}", snlp(&lds, &y_true, &task_targets(&train))?);
    }
    Ok(())
}
