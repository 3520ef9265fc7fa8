//! `head` — command-line front end for the detection toolkit.
//!
//! Every analysis subcommand reads a TOML experiment config and reuses the
//! same pipeline code the library exposes, so results are identical whether
//! a stage is run standalone or as part of `evaluate`. Artifacts land in the
//! config's output directory (override with `--out`).
//!
//! Exit codes: 0 success, 2 usage (bad flags, missing config file),
//! 1 anything that fails at run time. Errors are one line on stderr.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use head_core::curvature::{curvature_benchmark, save_features, write_benchmark_csv};
use head_core::detect::{
    default_kde_grid, default_ocsvm_grid, hyperparameter_sweep, save_detector, write_sweep_csv,
    SweepRow,
};
use head_core::eval::{
    build_pipeline, load_experiment_config, noise_robustness, run_experiment, save_tensor_file,
    write_attack_manifest, write_noise_csv, ExperimentConfig, Pipeline,
};
use head_core::linalg::Matrix;
use head_core::net::save_model;
use head_core::spectral::save_basis;

#[derive(Parser)]
#[command(
    name = "head",
    version,
    about = "Attack-agnostic adversarial-input detection toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Seed override; the HEAD_SEED env var applies when this flag is absent.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for sample-parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the classifier described by [model.train] and save it.
    TrainNet(ConfigArgs),
    /// Fit the covariance eigenbasis on benign training samples.
    FitBasis(ConfigArgs),
    /// Extract detection features for the train and test splits.
    ExtractFeatures(ConfigArgs),
    /// Fit the anomaly detector on benign training features.
    FitDetector(ConfigArgs),
    /// Generate the configured adversarial sets and write them with a manifest.
    Attack(ConfigArgs),
    /// Run the full experiment: attacks, scores, report.csv and all artifacts.
    Evaluate(ConfigArgs),
    /// Sweep detector hyperparameters; writes the full KDE and OCSVM AUC tables.
    Sweep(ConfigArgs),
    /// Score noisy benign inputs against the adversarial sets per noise level.
    NoiseRobustness(ConfigArgs),
    /// Time the Gauss-Newton curvature against the finite-difference Hessian.
    BenchCurvature(BenchArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated input dimensions to benchmark.
    #[arg(long, default_value = "16,64,256")]
    dims: String,

    /// Timed evaluations per dimension.
    #[arg(long, default_value_t = 5)]
    repeats: usize,
}

enum CliError {
    /// Invocation problems: exit 2.
    Usage(String),
    /// Everything that fails once the invocation was well-formed: exit 1.
    Runtime(String),
}

impl From<head_core::Error> for CliError {
    fn from(e: head_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {}", one_line(&msg));
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {}", one_line(&msg));
            ExitCode::from(1)
        }
    }
}

/// TOML parse errors span multiple lines; the error contract is one line.
fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::TrainNet(a) => train_net(&load_config(&a.config, cli)?),
        Command::FitBasis(a) => fit_basis(&load_config(&a.config, cli)?),
        Command::ExtractFeatures(a) => extract_features(&load_config(&a.config, cli)?),
        Command::FitDetector(a) => fit_detector(&load_config(&a.config, cli)?),
        Command::Attack(a) => attack(&load_config(&a.config, cli)?),
        Command::Evaluate(a) => evaluate(&load_config(&a.config, cli)?),
        Command::Sweep(a) => sweep(&load_config(&a.config, cli)?),
        Command::NoiseRobustness(a) => noise(&load_config(&a.config, cli)?),
        Command::BenchCurvature(a) => bench(a, cli),
    }
}

fn load_config(path: &Path, cli: &Cli) -> Result<ExperimentConfig, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "config file not found: {}",
            path.display()
        )));
    }
    let mut cfg = load_experiment_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    } else if let Ok(v) = std::env::var("HEAD_SEED") {
        cfg.seed = v.parse().map_err(|_| {
            CliError::Usage(format!("HEAD_SEED must be an unsigned integer, got {v:?}"))
        })?;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    warn_empty_inputs(&cfg);
    Ok(cfg)
}

/// An empty input file still loads (as an empty dataset) but almost always
/// means a path mix-up; say so before the pipeline trips over it.
fn warn_empty_inputs(cfg: &ExperimentConfig) {
    for path in [&cfg.dataset.train_path, &cfg.dataset.test_path]
        .into_iter()
        .flatten()
    {
        if fs::metadata(path).map(|m| m.len() == 0).unwrap_or(false) {
            eprintln!(
                "warning: {} is empty and loads as an empty dataset",
                path.display()
            );
        }
    }
}

/// Attack generation is the most expensive stage; commands that only need
/// the benign half of the pipeline skip it.
fn without_attacks(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.attacks.clear();
    c
}

fn outdir(cfg: &ExperimentConfig) -> Result<&Path, CliError> {
    fs::create_dir_all(&cfg.output_dir)?;
    Ok(&cfg.output_dir)
}

fn train_net(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.model.train.is_none() {
        return Err(CliError::Runtime(
            "train-net needs a [model.train] recipe in the config".into(),
        ));
    }
    let pipeline = build_pipeline(&without_attacks(cfg))?;
    let dir = outdir(cfg)?;
    save_model(&pipeline.model, &dir.join("model.bin"))?;
    let mut w = BufWriter::new(File::create(dir.join("train-losses.csv"))?);
    writeln!(w, "epoch,loss")?;
    for (i, loss) in pipeline.epoch_losses.iter().enumerate() {
        writeln!(w, "{},{}", i + 1, loss)?;
    }
    w.flush()?;
    println!(
        "trained {} epochs; clean test accuracy {:.4}",
        pipeline.epoch_losses.len(),
        pipeline.clean_accuracy
    );
    println!("wrote {}", dir.join("model.bin").display());
    Ok(())
}

fn fit_basis(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let pipeline = build_pipeline(&without_attacks(cfg))?;
    let dir = outdir(cfg)?;
    save_basis(&pipeline.basis, &dir.join("basis.bin"))?;
    let mut w = BufWriter::new(File::create(dir.join("eigenvalues.csv"))?);
    writeln!(w, "component,eigenvalue")?;
    for (i, v) in pipeline.basis.values().iter().enumerate() {
        writeln!(w, "{i},{v}")?;
    }
    w.flush()?;
    println!(
        "fitted {}-dim basis (centered: {}); eigenvalue range [{:.3e}, {:.3e}]",
        pipeline.basis.dim(),
        pipeline.basis.centered(),
        pipeline.basis.values().last().unwrap_or(&f64::NAN),
        pipeline.basis.values().first().unwrap_or(&f64::NAN),
    );
    println!("wrote {}", dir.join("basis.bin").display());
    Ok(())
}

fn extract_features(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let pipeline = build_pipeline(&without_attacks(cfg))?;
    let dir = outdir(cfg)?;
    save_features(&pipeline.train_features, &dir.join("features-train.bin"))?;
    save_features(&pipeline.test_features, &dir.join("features-test.bin"))?;
    println!(
        "extracted {:?} features: train {}x{}, test {}x{}",
        pipeline.feature_kind,
        pipeline.train_features.rows(),
        pipeline.train_features.cols(),
        pipeline.test_features.rows(),
        pipeline.test_features.cols(),
    );
    println!("wrote {}", dir.join("features-train.bin").display());
    println!("wrote {}", dir.join("features-test.bin").display());
    Ok(())
}

fn fit_detector(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let pipeline = build_pipeline(&without_attacks(cfg))?;
    let dir = outdir(cfg)?;
    save_detector(&pipeline.detector, &dir.join("detector.bin"))?;
    save_features(&pipeline.train_features, &dir.join("features-train.bin"))?;
    println!(
        "fitted {} detector on {} benign feature vectors",
        pipeline.detector.kind_name(),
        pipeline.train_features.rows()
    );
    println!("wrote {}", dir.join("detector.bin").display());
    Ok(())
}

fn attack(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let pipeline = build_pipeline(cfg)?;
    let dir = outdir(cfg)?;
    for art in &pipeline.attacks {
        let path = dir.join(format!("adv-{}.ten", art.name));
        save_tensor_file(&path, &art.adversarial, Some(&pipeline.test.labels))?;
        println!(
            "{}: accuracy under attack {:.4} -> {}",
            art.name,
            art.accuracy_under_attack,
            path.display()
        );
    }
    write_attack_manifest(&pipeline, &dir.join("attacks.csv"))?;
    println!("wrote {}", dir.join("attacks.csv").display());
    Ok(())
}

fn evaluate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let (pipeline, report) = run_experiment(cfg)?;
    println!("clean accuracy {:.4}", pipeline.clean_accuracy);
    for a in &report.attacks {
        println!(
            "{}: auc {:.4} (n_benign {}, n_adv {})",
            a.name, a.auc, a.n_benign, a.n_adv
        );
    }
    if let Some(p) = report.overall_pooled {
        println!("overall_pooled: auc {p:.4}");
    }
    if let Some(m) = report.overall_macro {
        println!("overall_macro: auc {m:.4}");
    }
    println!("wrote {}", cfg.output_dir.join("report.csv").display());
    Ok(())
}

fn attack_feature_sets(pipeline: &Pipeline) -> Vec<(String, Matrix)> {
    pipeline
        .attacks
        .iter()
        .map(|a| (a.name.clone(), a.features.clone()))
        .collect()
}

fn best_of(rows: &[SweepRow]) -> Option<&SweepRow> {
    rows.iter().find(|r| r.best)
}

fn sweep(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let pipeline = build_pipeline(cfg)?;
    let dir = outdir(cfg)?;
    let sets = attack_feature_sets(&pipeline);
    let names: Vec<String> = sets.iter().map(|(n, _)| n.clone()).collect();

    let kde_rows = hyperparameter_sweep(
        &pipeline.train_features,
        &pipeline.test_features,
        &sets,
        &default_kde_grid(),
        cfg.standardize,
    )?;
    write_sweep_csv(&kde_rows, &names, &dir.join("sweep-kde.csv"))?;
    if let Some(b) = best_of(&kde_rows) {
        println!(
            "kde best: {} h={} overall auc {:.4}",
            b.kernel, b.hyperparameter, b.auc_overall
        );
    }

    let ocsvm_rows = hyperparameter_sweep(
        &pipeline.train_features,
        &pipeline.test_features,
        &sets,
        &default_ocsvm_grid(
            pipeline.train_features.cols(),
            cfg.detector.tol,
            cfg.detector.max_iter,
        ),
        cfg.standardize,
    )?;
    write_sweep_csv(&ocsvm_rows, &names, &dir.join("sweep-ocsvm.csv"))?;
    if let Some(b) = best_of(&ocsvm_rows) {
        println!(
            "ocsvm best: {} nu={} overall auc {:.4}",
            b.kernel, b.hyperparameter, b.auc_overall
        );
    }

    println!("wrote {}", dir.join("sweep-kde.csv").display());
    println!("wrote {}", dir.join("sweep-ocsvm.csv").display());
    Ok(())
}

fn noise(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let pipeline = build_pipeline(cfg)?;
    let dir = outdir(cfg)?;
    let rows = noise_robustness(&pipeline, &cfg.noise_levels)?;
    write_noise_csv(&rows, &dir.join("noise.csv"))?;
    for r in &rows {
        println!(
            "{} level {:.6}: auc {:.4} (drop {:+.4})",
            r.noise.name(),
            r.level,
            r.auc,
            r.drop
        );
    }
    println!("wrote {}", dir.join("noise.csv").display());
    Ok(())
}

fn bench(args: &BenchArgs, cli: &Cli) -> Result<(), CliError> {
    let dims: Vec<usize> = args
        .dims
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("--dims entry {:?} is not a dimension", s)))
        })
        .collect::<Result<_, _>>()?;
    let rows = curvature_benchmark(&dims, args.repeats)?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("head-out"));
    fs::create_dir_all(&dir)?;
    write_benchmark_csv(&rows, &dir.join("bench-curvature.csv"))?;
    for r in &rows {
        println!(
            "dim {:>5}: ggn {:.6}s  fd {:.6}s  ratio {:.1}x",
            r.dim, r.ggn_seconds, r.fd_seconds, r.ratio
        );
    }
    println!("wrote {}", dir.join("bench-curvature.csv").display());
    Ok(())
}
