//! Command-line entry point: dataset generation, training, feature
//! extraction, evaluation, the three-mode comparison, and the
//! self-verification suites.
//!
//! Exit codes are a stable contract: 0 success, 2 config or usage problems,
//! 3 I/O problems, 4 training failures, 5 verification failures. The log
//! level comes from `LACL_LOG_LEVEL` (error, warn, info, debug).

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};

use lacl::checkpoint::Checkpoint;
use lacl::compare::{lesion_features, lesion_probe, slide_bags, train_and_probe, ComparisonReport};
use lacl::config::{Config, Mode, Pooling};
use lacl::data::{
    dataset_fingerprint, load_dataset, save_dataset, split_patient_level, write_embeddings,
    DatasetParams, Split, SyntheticDataset,
};
use lacl::error::{Error, Result};
use lacl::eval::{bag_classify, knn_probe};
use lacl::manifest::RunManifest;
use lacl::trainer::Trainer;

#[derive(Parser)]
#[command(
    name = "lacl",
    version,
    about = "Lesion-queue contrastive learning on synthetic slide data"
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic patch dataset with patient-level splits.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Directory to write dataset.txt and patches.lemb into.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one mode on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory produced by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoints, metrics.log, and the manifest.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's mode: lacl, lacl-no-qrs, or moco-baseline.
        #[arg(long)]
        mode: Option<String>,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Extract backbone features of every patch into an embedding file.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for embeddings.lemb and the manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint with a probe and write the report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for report.txt and the manifest.
        #[arg(long)]
        out: PathBuf,
        /// Probe: linear, knn, bag-mean, or bag-attention.
        #[arg(long, default_value = "linear")]
        probe: String,
        /// Optional config for probe hyperparameters.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed for probes with random initialization (bag-attention).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and probe all three modes under identical budgets.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for per-arm runs and comparison.txt.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds shared by every mode.
        #[arg(long, default_value = "1,2,3,4,5")]
        seeds: String,
    },
    /// Run the self-verification suites.
    Check {
        /// Finite-difference gradient checks of the contrastive losses.
        #[arg(long)]
        grad: bool,
        /// Brute-force re-derivation of the queue admission rule.
        #[arg(long)]
        qrs: bool,
        /// Reference simulation of the FIFO queues.
        #[arg(long)]
        queue: bool,
        /// All of the above.
        #[arg(long)]
        all: bool,
        /// Seed for the randomized suites.
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("LACL_LOG_LEVEL", "warn"),
    )
    .format_timestamp(None)
    .init();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: could not configure {threads} threads: {e}");
            std::process::exit(2);
        }
    }
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen { config, out, seed } => cmd_gen(&config, &out, seed),
        Command::Train {
            config,
            data,
            out,
            seed,
            mode,
            resume,
        } => cmd_train(&config, &data, &out, seed, mode.as_deref(), resume.as_deref()),
        Command::Extract {
            checkpoint,
            data,
            out,
        } => cmd_extract(&checkpoint, &data, &out),
        Command::Eval {
            checkpoint,
            data,
            out,
            probe,
            config,
            seed,
        } => cmd_eval(&checkpoint, &data, &out, &probe, config.as_deref(), seed),
        Command::Compare {
            config,
            data,
            out,
            seeds,
        } => cmd_compare(&config, &data, &out, &seeds),
        Command::Check {
            grad,
            qrs,
            queue,
            all,
            seed,
        } => cmd_check(grad, qrs, queue, all, seed),
    }
}

fn load_config(path: &Path, seed: Option<u64>, mode: Option<&str>) -> Result<Config> {
    let mut config = Config::load(path)?;
    if let Some(seed) = seed {
        config.run.seed = seed;
    }
    if let Some(mode) = mode {
        config.run.mode = Mode::from_str(mode)?;
    }
    config.validate()?;
    Ok(config)
}

fn cmd_gen(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let config = load_config(config_path, seed, None)?;
    // everything fallible happens before the first write, so a bad config
    // leaves no partial output behind
    let params = DatasetParams::from_config(&config);
    let dataset = SyntheticDataset::generate(params)?;
    let split = split_patient_level(&dataset, config.data.split_ratios, config.run.seed)?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_dataset(out, &dataset, &split)?;
    let mut manifest = RunManifest::new("gen", config.run.mode.as_str(), config.run.seed, &config);
    manifest.artifacts = vec!["dataset.txt".into(), "patches.lemb".into()];
    manifest.save(out)?;

    println!(
        "dataset written to {}: {} slides, {} patches, fingerprint {}",
        out.display(),
        dataset.num_slides(),
        dataset.num_patches(),
        dataset_fingerprint(out)?
    );
    Ok(())
}

fn cmd_train(
    config_path: &Path,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    mode: Option<&str>,
    resume: Option<&Path>,
) -> Result<()> {
    let config = load_config(config_path, seed, mode)?;
    let (dataset, split) = load_dataset(data)?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(&dataset, &split, &config, Checkpoint::load(path)?)?,
        None => Trainer::new(&dataset, &split, &config)?,
    };
    let artifacts = trainer.run(out)?;

    let mut manifest = RunManifest::new(
        "train",
        config.run.mode.as_str(),
        config.run.seed,
        &config,
    );
    manifest.data_dir = Some(data.display().to_string());
    manifest.artifacts = run_dir_artifacts(out)?;
    manifest.save(out)?;

    println!(
        "training complete: mode={} step={} epochs={} checkpoint={}",
        config.run.mode,
        trainer.state.step,
        trainer.state.epoch,
        artifacts.checkpoint.display()
    );
    Ok(())
}

/// Relative paths of the files a training run leaves in its directory.
fn run_dir_artifacts(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok())
        .map(|entry| entry.file_name().to_string_lossy().into_owned())
        .filter(|name| name.ends_with(".ckpt") || name.ends_with(".log"))
        .collect();
    names.sort();
    Ok(names)
}

fn cmd_extract(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (dataset, _) = load_dataset(data)?;
    if dataset.params.dim != ckpt.params_q.dims.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "dataset dim {} does not match checkpoint input dim {}",
            dataset.params.dim, ckpt.params_q.dims.input_dim
        )));
    }
    let features = lacl::eval::extract_features(&ckpt.params_q, &dataset.patches)?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("embeddings.lemb");
    let ids: Vec<u64> = (0..features.len() as u64).collect();
    write_embeddings(&path, &ids, &features)?;

    let mut manifest = RunManifest::new("extract", "n/a", 0, &Config::default());
    manifest.data_dir = Some(data.display().to_string());
    manifest.checkpoint = Some(checkpoint.display().to_string());
    manifest.artifacts = vec!["embeddings.lemb".into()];
    manifest.save(out)?;

    println!(
        "extracted {} feature rows of dim {} to {}",
        features.len(),
        ckpt.params_q.dims.backbone_dim,
        path.display()
    );
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    probe: &str,
    config_path: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let mut config = match config_path {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = seed {
        config.run.seed = seed;
    }
    config.validate()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let (dataset, split) = load_dataset(data)?;
    if dataset.params.dim != ckpt.params_q.dims.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "dataset dim {} does not match checkpoint input dim {}",
            dataset.params.dim, ckpt.params_q.dims.input_dim
        )));
    }
    let params = &ckpt.params_q;

    let mut report = match probe {
        "linear" => lesion_probe(&dataset, &split, params, &config)?,
        "knn" => {
            let (train_x, train_y) = lesion_features(&dataset, &split, params, Split::Train)?;
            let (test_x, test_y) = lesion_features(&dataset, &split, params, Split::Test)?;
            knn_probe(&train_x, &train_y, &test_x, &test_y, config.eval.knn_k)?
        }
        "bag-mean" | "bag-attention" => {
            let pooling = if probe == "bag-mean" {
                Pooling::Mean
            } else {
                Pooling::Attention
            };
            let train_bags = slide_bags(&dataset, &split, params, Split::Train)?;
            let test_bags = slide_bags(&dataset, &split, params, Split::Test)?;
            bag_classify(&train_bags, &test_bags, pooling, &config.eval, config.run.seed)?
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown probe '{other}'; use linear, knn, bag-mean, or bag-attention"
            )))
        }
    };
    report.config_fingerprint = config.fingerprint();

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("report.txt");
    lacl::write_atomic(&path, report.render().as_bytes())?;

    let mut manifest = RunManifest::new("eval", &report.mode, config.run.seed, &config);
    manifest.data_dir = Some(data.display().to_string());
    manifest.checkpoint = Some(checkpoint.display().to_string());
    manifest.artifacts = vec!["report.txt".into()];
    manifest.save(out)?;

    print!("{}", report.render());
    println!("report written to {}", path.display());
    Ok(())
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = text
        .split(',')
        .map(|s| {
            s.trim().parse().map_err(|_| {
                Error::InvalidConfig(format!("seed list entry '{s}' is not an integer"))
            })
        })
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("seed list is empty".into()));
    }
    Ok(seeds)
}

fn cmd_compare(config_path: &Path, data: &Path, out: &Path, seeds: &str) -> Result<()> {
    let config = load_config(config_path, None, None)?;
    let seeds = parse_seeds(seeds)?;
    let (dataset, split) = load_dataset(data)?;
    let fingerprint = dataset_fingerprint(data)?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut arms = Vec::new();
    let mut statuses: Vec<String> = Vec::new();
    for &seed in &seeds {
        for mode in Mode::ALL {
            let arm_dir = out.join(format!("{mode}-seed{seed}"));
            match train_and_probe(&dataset, &split, &config, mode, seed, &arm_dir) {
                Ok(arm) => {
                    statuses.push(format!("{mode} seed {seed}: ok"));
                    arms.push(arm);
                }
                Err(e) => {
                    statuses.push(format!("{mode} seed {seed}: FAILED ({e})"));
                    eprintln!("per-arm status:");
                    for line in &statuses {
                        eprintln!("  {line}");
                    }
                    eprintln!("error: {e}");
                    // one failed arm fails the whole comparison
                    std::process::exit(4);
                }
            }
        }
    }

    let report = ComparisonReport {
        dataset_fingerprint: fingerprint,
        seeds,
        arms,
    };
    let path = out.join("comparison.txt");
    lacl::write_atomic(&path, report.render().as_bytes())?;
    let mut manifest = RunManifest::new("compare", "all", config.run.seed, &config);
    manifest.data_dir = Some(data.display().to_string());
    manifest.artifacts = vec!["comparison.txt".into()];
    manifest.save(out)?;

    print!("{}", report.render());
    println!("comparison written to {}", path.display());
    Ok(())
}

fn cmd_check(grad: bool, qrs: bool, queue: bool, all: bool, seed: u64) -> Result<()> {
    if !(grad || qrs || queue || all) {
        return Err(Error::InvalidConfig(
            "pass --grad, --qrs, --queue, or --all".into(),
        ));
    }
    let mut outcomes = Vec::new();
    if grad || all {
        outcomes.push(lacl::check::check_gradients(20, seed)?);
    }
    if qrs || all {
        outcomes.push(lacl::check::check_qrs(100, seed)?);
    }
    if queue || all {
        outcomes.push(lacl::check::check_queue(10_000, seed)?);
    }

    let mut failed = Vec::new();
    for outcome in &outcomes {
        println!("{}", outcome.summary());
        for failure in &outcome.failures {
            eprintln!("replay: {failure}");
            failed.push(failure.clone());
        }
    }
    if !failed.is_empty() {
        return Err(Error::VerificationFailed(format!(
            "{} case(s) failed; replay lines above carry the seeds",
            failed.len()
        )));
    }
    Ok(())
}
