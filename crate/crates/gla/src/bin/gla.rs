//! Command-line frontend: dataset generation, training, evaluation,
//! baseline comparison, retention curves and gradient self-checks.
//!
//! Machine-readable results go to files; stdout carries status lines only.
//! All randomness flows from explicit --seed flags, so every subcommand is
//! reproducible from its arguments plus its input files. Log verbosity comes
//! from the GLA_LOG_LEVEL environment variable (error, info, debug).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use gla::data::{
    generate_dataset, manifest_path, read_dataset, read_manifest, write_dataset, write_manifest,
    CameraSpread, DatasetManifest, GenParams, PairRecord,
};
use gla::error::Error;
use gla::geometry::RansacConfig;
use gla::harness::{
    self, baseline_compare, evaluate, gradient_suite, indexed, prf_sweep, train_with_checkpoints,
    LossSelector, TrainRunConfig,
};
use gla::network::{forward, load_checkpoint, save_checkpoint, GlaNetConfig, GlaNetParams};

#[derive(Parser)]
#[command(
    name = "gla",
    version,
    about = "Correspondence mismatch removal: guided-loss attention classifier and geometric baselines"
)]
struct Cli {
    /// Worker threads for parallel regions (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)] // one short-lived instance at startup
enum Command {
    /// Generate a synthetic dataset file plus its manifest.
    Gen(GenArgs),
    /// Train a classifier and write a checkpoint plus a training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint over a dataset split into a metrics CSV.
    Eval(EvalArgs),
    /// Compare the RANSAC baseline against a trained network.
    Baseline(BaselineArgs),
    /// Retained-correspondence precision/recall/F1 sweeps per pair.
    Curves(CurvesArgs),
    /// Finite-difference verification of every block and the full network.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output dataset path; the manifest lands next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    pairs: usize,
    /// Correspondences per pair.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0.3)]
    inlier_ratio: f64,
    /// Coordinate noise, normalized units.
    #[arg(long, default_value_t = 1e-3)]
    noise_sigma: f64,
    /// Labeling threshold on the squared epipolar residual.
    #[arg(long, default_value_t = gla::data::TAU_LABEL_DEFAULT)]
    tau_label: f64,
    #[arg(long, default_value_t = 30.0)]
    max_rotation_deg: f64,
    #[arg(long, default_value_t = 1.0)]
    translation: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

/// Network flags. Left unset they fall back to the config file (when given)
/// and then to the built-in defaults: flags > file > defaults.
#[derive(Args)]
struct NetArgs {
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    crude_blocks: Option<usize>,
    /// Blocks per fine pass (two passes).
    #[arg(long)]
    fine_blocks: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    /// F-score exponent guiding the scheduled loss.
    #[arg(long)]
    fn_n: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Share one set of fine-pass parameters across both passes.
    #[arg(long)]
    share_fine: Option<bool>,
}

/// Key-value document accepted by `train --config`; every key is optional.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    loss: Option<String>,
    focal_gamma: Option<f64>,
    channels: Option<usize>,
    crude_blocks: Option<usize>,
    fine_blocks: Option<usize>,
    rho: Option<f64>,
    eta: Option<f64>,
    fn_n: Option<f64>,
    threshold: Option<f64>,
    share_fine: Option<bool>,
}

impl NetArgs {
    fn to_config(&self, file: &FileConfig) -> GlaNetConfig {
        let defaults = GlaNetConfig::default();
        GlaNetConfig {
            channels: self.channels.or(file.channels).unwrap_or(defaults.channels),
            crude_blocks: self
                .crude_blocks
                .or(file.crude_blocks)
                .unwrap_or(defaults.crude_blocks),
            fine_blocks_per_pass: self
                .fine_blocks
                .or(file.fine_blocks)
                .unwrap_or(defaults.fine_blocks_per_pass),
            fine_passes: 2,
            rho: self.rho.or(file.rho).unwrap_or(defaults.rho),
            eta: self.eta.or(file.eta).unwrap_or(defaults.eta),
            fn_n: self.fn_n.or(file.fn_n).unwrap_or(defaults.fn_n),
            threshold: self
                .threshold
                .or(file.threshold)
                .unwrap_or(defaults.threshold),
            share_fine_passes: self.share_fine.or(file.share_fine).unwrap_or(false),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    /// Scheduled guided loss at the configured Fn target.
    Guided,
    /// Fixed cost-sensitive loss.
    L,
    /// Focal loss.
    Focal,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Training-log CSV path (default: <out>.train.csv).
    #[arg(long)]
    log: Option<PathBuf>,
    /// JSON config file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    #[arg(long)]
    focal_gamma: Option<f64>,
    /// Split to train on.
    #[arg(long, default_value = "train")]
    split: String,
    /// Additionally write <out>.epochK every K epochs (0: final only).
    #[arg(long, default_value_t = 0)]
    ckpt_every: usize,
    #[command(flatten)]
    net: NetArgs,
}

fn parse_loss_name(name: &str) -> gla::Result<LossArg> {
    match name {
        "guided" => Ok(LossArg::Guided),
        "l" => Ok(LossArg::L),
        "focal" => Ok(LossArg::Focal),
        other => Err(Error::Config(format!(
            "unknown loss {other:?}; expected guided, l or focal"
        ))),
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Metrics CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Override the checkpoint's prediction threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// Override the checkpoint's Fn reporting target.
    #[arg(long)]
    fn_n: Option<f64>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    ransac_iters: usize,
    /// Inlier threshold on the squared epipolar residual.
    #[arg(long, default_value_t = 1e-4)]
    ransac_thresh: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct CurvesArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Network preset to verify.
    #[arg(long, default_value = "tiny")]
    config: String,
    #[arg(long, default_value_t = 2)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GLA_LOG_LEVEL", "info"))
        .format_timestamp(None)
        .init();

    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: could not configure {} threads: {e}", cli.threads);
            return ExitCode::from(1);
        }
    }

    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                // Bad flag values are argument errors, like unknown flags.
                Error::Config(_) | Error::Contract(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load_split(
    data: &Path,
    split: &str,
) -> gla::Result<(Vec<PairRecord>, DatasetManifest, Vec<usize>)> {
    let pairs = read_dataset(data)?;
    let manifest = read_manifest(manifest_path(data))?;
    let ids = manifest.splits.select(split)?.to_vec();
    if ids.is_empty() {
        return Err(Error::Contract(format!("split {split:?} is empty")));
    }
    Ok((pairs, manifest, ids))
}

fn load_network(
    ckpt: &Path,
    threshold: Option<f64>,
    fn_n: Option<f64>,
) -> gla::Result<(GlaNetParams, GlaNetConfig)> {
    let (params, mut config) = load_checkpoint(ckpt)?;
    if let Some(t) = threshold {
        config.threshold = t;
    }
    if let Some(n) = fn_n {
        config.fn_n = n;
    }
    config.validate()?;
    Ok((params, config))
}

fn run(command: Command) -> gla::Result<ExitCode> {
    match command {
        Command::Gen(args) => {
            let params = GenParams {
                pairs: args.pairs,
                n: args.n,
                inlier_ratio: args.inlier_ratio,
                noise_sigma: args.noise_sigma,
                tau_label: args.tau_label,
                camera: CameraSpread {
                    max_rotation_deg: args.max_rotation_deg,
                    translation: args.translation,
                },
                seed: args.seed,
                fractions: [0.7, 0.15, 0.15],
            };
            let (pairs, splits) = generate_dataset(&params)?;
            let checksum = write_dataset(&args.out, &pairs)?;
            let manifest = DatasetManifest {
                format_version: 1,
                pair_count: pairs.len(),
                rng: "chacha8".into(),
                params,
                splits,
                checksum,
            };
            write_manifest(manifest_path(&args.out), &manifest)?;
            println!(
                "wrote {} pairs ({} train / {} val / {} test) to {}",
                pairs.len(),
                manifest.splits.train.len(),
                manifest.splits.val.len(),
                manifest.splits.test.len(),
                args.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Train(args) => {
            let (pairs, _, ids) = load_split(&args.data, &args.split)?;
            let subset = indexed(&pairs, &ids)?;
            let file: FileConfig = match &args.config {
                Some(path) => serde_json::from_slice(&std::fs::read(path)?)
                    .map_err(|e| Error::Config(format!("config file: {e}")))?,
                None => FileConfig::default(),
            };
            let net = args.net.to_config(&file);
            let loss_arg = match (args.loss, &file.loss) {
                (Some(flag), _) => flag,
                (None, Some(name)) => parse_loss_name(name)?,
                (None, None) => LossArg::Guided,
            };
            let gamma = args.focal_gamma.or(file.focal_gamma).unwrap_or(2.0);
            let loss = match loss_arg {
                LossArg::Guided => LossSelector::Guided,
                LossArg::L => LossSelector::CostSensitive,
                LossArg::Focal => LossSelector::Focal { gamma },
            };
            let config = TrainRunConfig {
                epochs: args.epochs.or(file.epochs).unwrap_or(10),
                batch_size: args.batch_size.or(file.batch_size).unwrap_or(16),
                learning_rate: args.lr.or(file.lr).unwrap_or(1e-3),
                seed: args.seed.or(file.seed).unwrap_or(1),
                loss,
                net,
            };
            let out = args.out.clone();
            let every = args.ckpt_every;
            let outcome = train_with_checkpoints(&subset, &config, |epoch, params| {
                if every > 0 && (epoch + 1) % every == 0 {
                    let path = PathBuf::from(format!("{}.epoch{}", out.display(), epoch + 1));
                    save_checkpoint(&path, params, &net)?;
                    log::info!("checkpoint at epoch {} -> {}", epoch + 1, path.display());
                }
                Ok(())
            })?;
            save_checkpoint(&args.out, &outcome.params, &net)?;
            let log_path = args
                .log
                .unwrap_or_else(|| PathBuf::from(format!("{}.train.csv", args.out.display())));
            harness::write_training_log_csv(&log_path, &outcome.log)?;
            println!(
                "trained {} epochs on {} pairs; first-epoch loss {:.6}, last {:.6}, {} clamp events",
                config.epochs,
                subset.len(),
                outcome.epoch_mean_loss.first().copied().unwrap_or(f64::NAN),
                outcome.epoch_mean_loss.last().copied().unwrap_or(f64::NAN),
                outcome.clamp_events
            );
            println!(
                "checkpoint: {} | training log: {}",
                args.out.display(),
                log_path.display()
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Eval(args) => {
            let (pairs, _, ids) = load_split(&args.data, &args.split)?;
            let subset = indexed(&pairs, &ids)?;
            let (params, config) = load_network(&args.ckpt, args.threshold, args.fn_n)?;
            let report = evaluate(&params, &config, &subset)?;
            harness::write_metrics_csv(&args.out, &report)?;
            let m = &report.mean;
            println!(
                "split {} ({} pairs): P {:.4} R {:.4} F1 {:.4} Fn {:.4} e_dev {:.4}",
                args.split,
                report.rows.len(),
                m.precision,
                m.recall,
                m.f1,
                m.fn_score,
                m.e_dev
            );
            println!("metrics: {}", args.out.display());
            Ok(ExitCode::SUCCESS)
        }

        Command::Baseline(args) => {
            let (pairs, _, ids) = load_split(&args.data, &args.split)?;
            let subset = indexed(&pairs, &ids)?;
            let (params, config) = load_network(&args.ckpt, None, None)?;
            let ransac_config = RansacConfig {
                iterations: args.ransac_iters,
                threshold: args.ransac_thresh,
                seed: args.seed,
            };
            let methods = baseline_compare(&subset, &params, &config, &ransac_config)?;
            harness::write_baseline_csv(&args.out, &methods)?;
            for m in &methods {
                println!(
                    "{:>8}: P {:.4} R {:.4} F1 {:.4} e_dev {:.4}",
                    m.method, m.mean.precision, m.mean.recall, m.mean.f1, m.mean.e_dev
                );
            }
            println!("comparison: {}", args.out.display());
            Ok(ExitCode::SUCCESS)
        }

        Command::Curves(args) => {
            let (pairs, _, ids) = load_split(&args.data, &args.split)?;
            let subset = indexed(&pairs, &ids)?;
            let (params, config) = load_network(&args.ckpt, None, None)?;
            let mut sweeps = Vec::with_capacity(subset.len());
            for &(pair_id, pair) in &subset {
                let mut tape = gla::diffcore::Tape::new();
                let (trace, _) = forward(&mut tape, &params, &config, &pair.coords_matrix())?;
                sweeps.push((pair_id, prf_sweep(&trace.final_probs, &pair.labels)?));
            }
            harness::write_curves_csv(&args.out, &sweeps)?;
            println!("curves for {} pairs: {}", sweeps.len(), args.out.display());
            Ok(ExitCode::SUCCESS)
        }

        Command::Gradcheck(args) => {
            let config = match args.config.as_str() {
                "tiny" => GlaNetConfig::tiny(),
                "default" => GlaNetConfig::default(),
                other => {
                    return Err(Error::Config(format!(
                        "unknown preset {other:?}; expected tiny or default"
                    )))
                }
            };
            let reports = gradient_suite(&config, args.seed)?;
            let mut worst = 0.0f64;
            for r in &reports {
                println!("{:<28} max relative error {:.3e}", r.name, r.max_rel_err);
                worst = worst.max(r.max_rel_err);
            }
            if worst < 1e-4 {
                println!("gradcheck passed: worst {worst:.3e} < 1e-4");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("gradcheck FAILED: worst {worst:.3e} >= 1e-4");
                Ok(ExitCode::from(1))
            }
        }
    }
}
