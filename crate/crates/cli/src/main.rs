//! `fstd`: data generation, proposal pretraining, joint training,
//! meta-test evaluation, single-episode detection, the proposal-threshold
//! sweep, and the gradient-check suite. Every subcommand writes its
//! artifacts plus the resolved configuration into `--out`.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation/data error,
//! 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fstd_core::config::Config;
use fstd_core::diagnostics;
use fstd_core::episodes::{
    generate_dataset, load_dataset, sample_episode, save_dataset, split_classes, Dataset, Split,
    SplitSide,
};
use fstd_core::eval::{detect, meta_test, threshold_sweep, sweep_to_csv, EvalOptions};
use fstd_core::trainer::{
    config_hash, init_params, load_checkpoint_into, log_to_csv, save_checkpoint, train, TrainMode,
};
use fstd_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fstd",
    version,
    about = "Few-shot temporal activity detection on synthetic feature sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Output directory for artifacts and the echoed config.
    #[arg(long)]
    out: PathBuf,
    /// TOML configuration file; missing keys fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset file (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Split file (JSON) produced by `fstd split`.
    #[arg(long)]
    split: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long)]
        num_videos: Option<usize>,
        #[arg(long)]
        noise_sigma: Option<f64>,
    },
    /// Partition dataset classes into disjoint train/test subsets.
    Split {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1.0 / 3.0)]
        test_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain the two-stage proposal network (no few-shot loss).
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the full model (all five losses).
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        shot: Option<usize>,
        #[arg(long)]
        way: Option<usize>,
        /// Checkpoint to initialize from (e.g. a pretraining run).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Meta-test a trained checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        shot: Option<usize>,
        #[arg(long)]
        way: Option<usize>,
        #[arg(long)]
        proposal_thresh: Option<f64>,
        #[arg(long)]
        similarity_thresh: Option<f64>,
    },
    /// Run detection on a single sampled test episode.
    Detect {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Episode seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        shot: Option<usize>,
        #[arg(long)]
        way: Option<usize>,
        #[arg(long)]
        proposal_thresh: Option<f64>,
        #[arg(long)]
        similarity_thresh: Option<f64>,
    },
    /// Sweep the proposal score threshold at fixed similarity threshold.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated thresholds, e.g. `0.1,0.2,0.3`.
        #[arg(long)]
        thresholds: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        shot: Option<usize>,
    },
    /// Run the finite-difference gradient suite.
    GradCheck {
        /// Seeds per operator.
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        /// Optional directory for the results table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are not usage errors
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

/// Creates the output directory and echoes the resolved config into it.
fn prepare_out(out: &Path, cfg: &Config) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::Config(format!("config serialization failed: {e}")))?;
    std::fs::write(out.join("config.toml"), text)?;
    Ok(())
}

fn read_split(path: &Path) -> Result<Split> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn load_inputs(args: &DataArgs) -> Result<(Dataset, Split)> {
    let dataset = load_dataset(&args.data)?;
    let split = read_split(&args.split)?;
    Ok((dataset, split))
}

fn env_threads() -> usize {
    std::env::var("FSTD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .map(|n| n.max(1))
        .unwrap_or(1)
}

fn load_params_for(cfg: &Config, checkpoint: &Path) -> Result<fstd_core::autodiff::ParamStore> {
    let mut store = init_params(&cfg.encoder, &cfg.proposal, 0)?;
    let hash = config_hash(&cfg.encoder, &cfg.proposal);
    load_checkpoint_into(&mut store, checkpoint, &hash)?;
    Ok(store)
}

fn run_training(
    common: &CommonArgs,
    data: &DataArgs,
    cfg: &mut Config,
    mode: TrainMode,
    init: Option<&Path>,
) -> Result<()> {
    prepare_out(&common.out, cfg)?;
    let (dataset, split) = load_inputs(data)?;
    let initial = match init {
        Some(path) => Some(load_params_for(cfg, path)?),
        None => None,
    };
    let result = train(&dataset, &split, &cfg.encoder, &cfg.proposal, &cfg.trainer, mode, initial)?;
    let hash = config_hash(&cfg.encoder, &cfg.proposal);
    save_checkpoint(&result.params, &hash, &common.out.join("checkpoint.json"))?;
    std::fs::write(common.out.join("train_log.csv"), log_to_csv(&result.log))?;
    let last = result.log.last();
    println!(
        "trained {} episodes; final l_total = {}",
        result.log.len(),
        last.map_or(f64::NAN, |b| b.l_total)
    );
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, seed, num_classes, num_videos, noise_sigma } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(n) = num_classes {
                cfg.generator.num_classes = n;
            }
            if let Some(n) = num_videos {
                cfg.generator.num_videos = n;
            }
            if let Some(s) = noise_sigma {
                cfg.generator.noise_sigma = s;
            }
            let seed = seed.unwrap_or(0);
            prepare_out(&common.out, &cfg)?;
            let dataset = generate_dataset(seed, &cfg.generator)?;
            let path = common.out.join("dataset.jsonl");
            save_dataset(&dataset, &path)?;
            println!(
                "wrote {} videos and {} exemplars to {}",
                dataset.videos.len(),
                dataset.exemplars.len(),
                path.display()
            );
            Ok(())
        }
        Command::Split { common, data, test_fraction, seed } => {
            let cfg = load_config(common.config.as_deref())?;
            prepare_out(&common.out, &cfg)?;
            let dataset = load_dataset(&data)?;
            let split = split_classes(&dataset, test_fraction, seed)?;
            let text = serde_json::to_string(&split)
                .map_err(|e| Error::Data(format!("split serialization failed: {e}")))?;
            let path = common.out.join("split.json");
            std::fs::write(&path, text)?;
            println!(
                "split {} classes into {} train / {} test ({} / {} videos)",
                dataset.num_classes,
                split.train_classes.len(),
                split.test_classes.len(),
                split.train_videos.len(),
                split.test_videos.len()
            );
            Ok(())
        }
        Command::Pretrain { common, data, episodes, seed } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(n) = episodes {
                cfg.trainer.episodes = n;
            }
            if let Some(s) = seed {
                cfg.trainer.seed = s;
            }
            run_training(&common, &data, &mut cfg, TrainMode::ProposalPretrain, None)
        }
        Command::Train { common, data, episodes, seed, shot, way, init } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(n) = episodes {
                cfg.trainer.episodes = n;
            }
            if let Some(s) = seed {
                cfg.trainer.seed = s;
            }
            if let Some(s) = shot {
                cfg.trainer.shot = s;
            }
            if let Some(w) = way {
                cfg.trainer.way = w;
            }
            run_training(&common, &data, &mut cfg, TrainMode::Full, init.as_deref())
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            iterations,
            seed,
            shot,
            way,
            proposal_thresh,
            similarity_thresh,
        } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(n) = iterations {
                cfg.eval.iterations = n;
            }
            if let Some(t) = proposal_thresh {
                cfg.eval.detect.proposal_thresh = t;
            }
            if let Some(t) = similarity_thresh {
                cfg.eval.detect.similarity_thresh = t;
            }
            prepare_out(&common.out, &cfg)?;
            let (dataset, split) = load_inputs(&data)?;
            let store = load_params_for(&cfg, &checkpoint)?;
            let opts = EvalOptions {
                iterations: cfg.eval.iterations,
                way: way.unwrap_or(cfg.trainer.way),
                shot: shot.unwrap_or(cfg.trainer.shot),
                seed: seed.unwrap_or(0),
                threads: env_threads(),
            };
            let report = meta_test(
                &dataset,
                &split,
                &store,
                &cfg.encoder,
                &cfg.proposal,
                &cfg.eval.detect,
                &opts,
            )?;
            let json = serde_json::to_string(&report)
                .map_err(|e| Error::Data(format!("report serialization failed: {e}")))?;
            std::fs::write(common.out.join("report.json"), json)?;
            std::fs::write(common.out.join("report.csv"), report.to_csv())?;
            println!(
                "meta-test over {} iterations: mAP@0.5 = {:.4}, average mAP = {:.4}",
                report.iterations, report.map_at_05, report.average_map
            );
            Ok(())
        }
        Command::Detect {
            common,
            data,
            checkpoint,
            seed,
            shot,
            way,
            proposal_thresh,
            similarity_thresh,
        } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(t) = proposal_thresh {
                cfg.eval.detect.proposal_thresh = t;
            }
            if let Some(t) = similarity_thresh {
                cfg.eval.detect.similarity_thresh = t;
            }
            prepare_out(&common.out, &cfg)?;
            let (dataset, split) = load_inputs(&data)?;
            let store = load_params_for(&cfg, &checkpoint)?;
            let episode = sample_episode(
                &dataset,
                &split,
                SplitSide::Test,
                way.unwrap_or(cfg.trainer.way),
                shot.unwrap_or(cfg.trainer.shot),
                seed,
            )?;
            let detections = detect(
                &store,
                &cfg.encoder,
                &cfg.proposal,
                &episode.features,
                &episode.support,
                &cfg.eval.detect,
            )?;
            let payload = serde_json::json!({
                "video_index": episode.video_index,
                "label_map": episode.label_map,
                "detections": detections,
            });
            std::fs::write(common.out.join("detections.json"), payload.to_string())?;
            let mut csv = String::from(
                "start,end,class,global_class,proposal_score,similarity_score,confidence\n",
            );
            for d in &detections {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    d.segment.start(),
                    d.segment.end(),
                    d.class,
                    episode.label_map[d.class],
                    d.proposal_score,
                    d.similarity_score,
                    d.confidence
                ));
            }
            std::fs::write(common.out.join("detections.csv"), csv)?;
            println!("{} detections on video {}", detections.len(), episode.video_index);
            Ok(())
        }
        Command::Sweep { common, data, checkpoint, thresholds, iterations, seed, shot } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(n) = iterations {
                cfg.eval.iterations = n;
            }
            let thresholds: Vec<f64> = match thresholds {
                Some(list) => list
                    .split(',')
                    .map(|t| {
                        t.trim().parse::<f64>().map_err(|_| {
                            Error::Config(format!("invalid threshold {t:?} in --thresholds"))
                        })
                    })
                    .collect::<Result<_>>()?,
                None => cfg.eval.sweep_thresholds.clone(),
            };
            prepare_out(&common.out, &cfg)?;
            let (dataset, split) = load_inputs(&data)?;
            let store = load_params_for(&cfg, &checkpoint)?;
            let opts = EvalOptions {
                iterations: cfg.eval.iterations,
                way: cfg.trainer.way,
                shot: shot.unwrap_or(cfg.trainer.shot),
                seed: seed.unwrap_or(0),
                threads: env_threads(),
            };
            let rows = threshold_sweep(
                &dataset,
                &split,
                &store,
                &cfg.encoder,
                &cfg.proposal,
                &cfg.eval.detect,
                &thresholds,
                &opts,
            )?;
            std::fs::write(common.out.join("sweep.csv"), sweep_to_csv(&rows))?;
            for r in &rows {
                println!(
                    "threshold {:.3}: mAP@0.5 = {:.4}, average mAP = {:.4}",
                    r.threshold, r.map_at_05, r.average_map
                );
            }
            Ok(())
        }
        Command::GradCheck { seeds, out } => {
            let checks = diagnostics::gradient_suite(seeds)?;
            let mut table = String::from("op,max_rel_err\n");
            let mut failed = false;
            println!("{:<24} max relative error (over {seeds} seeds)", "op");
            for c in &checks {
                println!("{:<24} {:.3e}", c.name, c.max_rel_err);
                table.push_str(&format!("{},{}\n", c.name, c.max_rel_err));
                failed |= c.max_rel_err >= 1e-4;
            }
            let e2e = diagnostics::end_to_end_gradient_error(0)?;
            println!(
                "{:<24} {:.3e} ({} coords, {} skipped at kinks)",
                "total_loss_end_to_end", e2e.max_rel_err, e2e.checked, e2e.skipped
            );
            table.push_str(&format!("total_loss_end_to_end,{}\n", e2e.max_rel_err));
            failed |= e2e.max_rel_err >= 1e-3;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("grad_check.csv"), table)?;
            }
            if failed {
                return Err(Error::Numeric("gradient check exceeded tolerance".into()));
            }
            Ok(())
        }
    }
}
