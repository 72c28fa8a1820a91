//! Command-line surface: dataset generation, training, evaluation, and
//! halting-trace analysis. Exit codes: 0 success, 2 configuration or
//! precondition error, 3 runtime failure; errors go to stderr as JSON.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use adrnn::data::maze::MazeSpec;
use adrnn::data::pathfinder::PathFinderSpec;
use adrnn::data::shard::{generate_maze_shard, generate_pathfinder_shard, Shard};
use adrnn::error::AdrnnError;
use adrnn::eval::{
    evaluate_shards, read_halting_csv, run_extrapolation, spearman, pearson, summarize,
    write_halting_csv, write_report,
};
use adrnn::model::{HaltMode, Model, ModelConfig};
use adrnn::tensor::crc32;
use adrnn::train::{train_loop, TrainConfig};

#[derive(Parser)]
#[command(name = "adrnn", version, about = "Adaptive-computation convolutional RNNs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset shard.
    Gen {
        #[command(subcommand)]
        task: GenTask,
    },
    /// Train a model from a JSON run config.
    Train {
        /// Path to a run-config JSON file.
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a shard.
    Eval(EvalArgs),
    /// Summarize a halting.csv produced by eval.
    Analyze {
        /// Path to halting.csv.
        csv: PathBuf,
        /// Where to write the summary JSON (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum GenTask {
    /// Maze segmentation shard.
    Mazes {
        /// Lattice cells per side (odd, >= 5).
        #[arg(long)]
        grid: usize,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// PathFinder classification shard.
    Pathfinder {
        /// Segments per main path.
        #[arg(long)]
        length: usize,
        #[arg(long, default_value_t = 64)]
        image_px: usize,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory (contains model.json + params/).
    ckpt: PathBuf,
    /// Shard directory to evaluate on (repeatable).
    #[arg(required = true)]
    data: Vec<PathBuf>,
    /// Inference budget; must be >= the checkpoint's training budget.
    #[arg(long)]
    t_inference: Option<usize>,
    /// Halting regime.
    #[arg(long, value_enum, default_value = "act")]
    mode: CliMode,
    /// Output directory for report.json and halting.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CliMode {
    Act,
    Fixed,
    Stability,
}

impl From<CliMode> for HaltMode {
    fn from(m: CliMode) -> HaltMode {
        match m {
            CliMode::Act => HaltMode::Act,
            CliMode::Fixed => HaltMode::Fixed,
            CliMode::Stability => HaltMode::Stability,
        }
    }
}

/// Declarative training run; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    format_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    /// Shard directories to train on.
    data: Vec<PathBuf>,
    out_dir: PathBuf,
}

#[derive(Serialize)]
struct Provenance {
    format_version: u32,
    command: String,
    config_crc: u32,
    seed: u64,
    version: &'static str,
}

fn write_provenance(dir: &Path, command: &str, config_bytes: &[u8], seed: u64) -> Result<(), AdrnnError> {
    std::fs::create_dir_all(dir)?;
    let p = Provenance {
        format_version: 1,
        command: command.to_string(),
        config_crc: crc32(config_bytes),
        seed,
        version: env!("CARGO_PKG_VERSION"),
    };
    let tmp = dir.join("provenance.json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(&p)?)?;
    std::fs::rename(&tmp, dir.join("provenance.json"))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = match &e {
                AdrnnError::Config(_) | AdrnnError::InvalidArgument { .. } => 2u8,
                _ => 3u8,
            };
            let msg = serde_json::json!({"error": e.to_string(), "exit_code": code});
            eprintln!("{msg}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<(), AdrnnError> {
    match cli.cmd {
        Cmd::Gen { task } => match task {
            GenTask::Mazes {
                grid,
                count,
                seed,
                out,
            } => {
                let spec = MazeSpec {
                    grid_n: grid,
                    count,
                    seed,
                };
                let cfg = serde_json::to_vec(&spec)?;
                let shard = generate_maze_shard(&spec)?;
                shard.write(&out)?;
                write_provenance(&out, "gen mazes", &cfg, seed)?;
                println!(
                    "wrote {} mazes ({}x{} px) to {}",
                    count,
                    spec.image_px(),
                    spec.image_px(),
                    out.display()
                );
                Ok(())
            }
            GenTask::Pathfinder {
                length,
                image_px,
                count,
                seed,
                out,
            } => {
                let spec = PathFinderSpec {
                    image_px,
                    count,
                    seed,
                    ..PathFinderSpec::desk(length, count, seed)
                };
                let cfg = serde_json::to_vec(&spec)?;
                let shard = generate_pathfinder_shard(&spec)?;
                shard.write(&out)?;
                write_provenance(&out, "gen pathfinder", &cfg, seed)?;
                println!(
                    "wrote {count} pathfinder samples (len {length}, {image_px}x{image_px} px) to {}",
                    out.display()
                );
                Ok(())
            }
        },
        Cmd::Train { config } => {
            let bytes = std::fs::read(&config)?;
            let rc: RunConfig = serde_json::from_slice(&bytes)
                .map_err(|e| AdrnnError::Config(format!("bad run config: {e}")))?;
            if rc.format_version != 1 {
                return Err(AdrnnError::Config(format!(
                    "unsupported run config format_version {}",
                    rc.format_version
                )));
            }
            rc.model.validate()?;
            rc.train.validate()?;
            let shards = load_shards(&rc.data)?;
            let mut model = Model::new(rc.model.clone(), rc.train.seed)?;
            write_provenance(&rc.out_dir, "train", &bytes, rc.train.seed)?;
            let report = train_loop(&mut model, &shards, &rc.train, Some(&rc.out_dir))?;
            println!(
                "trained {} steps; best val acc {:.2}%, final {:.2}%",
                report.steps, report.best_val_acc, report.final_val_acc
            );
            Ok(())
        }
        Cmd::Eval(args) => {
            let model = Model::load(&args.ckpt)?;
            let shards = load_shards(&args.data)?;
            let mode: HaltMode = args.mode.into();
            let t_train = model.config.halting.t_train;
            let budget = args.t_inference.unwrap_or(t_train);
            if budget < t_train {
                return Err(AdrnnError::Config(format!(
                    "--t-inference {budget} below the checkpoint's training budget {t_train}"
                )));
            }
            std::fs::create_dir_all(&args.out)?;
            let meta = Model::meta(&args.ckpt)?;
            write_provenance(&args.out, "eval", &serde_json::to_vec(&meta.config)?, meta.seed)?;
            let records = if budget > t_train {
                let (report, records) = run_extrapolation(&model, &shards, budget, mode)?;
                write_report(&args.out.join("report.json"), &report)?;
                println!(
                    "accuracy {:.2}% at budget {} (truncated at {}: {:.2}%)",
                    report.full.accuracy, budget, t_train, report.truncated.accuracy
                );
                records
            } else {
                let (report, records) = evaluate_shards(&model, &shards, mode, budget)?;
                write_report(&args.out.join("report.json"), &report)?;
                println!("accuracy {:.2}% at budget {budget}", report.accuracy);
                records
            };
            write_halting_csv(&args.out.join("halting.csv"), &records)?;
            Ok(())
        }
        Cmd::Analyze { csv, out } => {
            let records = read_halting_csv(&csv)?;
            let budget = records.iter().map(|r| r.t_halt).max().unwrap_or(1);
            let summary = summarize(&records, HaltMode::Act, budget);
            let x: Vec<f64> = records.iter().map(|r| r.difficulty).collect();
            let y: Vec<f64> = records.iter().map(|r| r.t_halt as f64).collect();
            let doc = serde_json::json!({
                "count": records.len(),
                "spearman_rho": spearman(&x, &y),
                "pearson_r": pearson(&x, &y),
                "per_level_mean_t_halt": summary.per_level_mean_t_halt,
                "per_level_accuracy": summary.per_level_accuracy,
                "unhalted_fraction": summary.unhalted_fraction,
            });
            match out {
                Some(p) => {
                    std::fs::write(&p, serde_json::to_vec_pretty(&doc)?)?;
                    println!("wrote {}", p.display());
                }
                None => println!("{}", serde_json::to_string_pretty(&doc)?),
            }
            Ok(())
        }
    }
}

fn load_shards(paths: &[PathBuf]) -> Result<Vec<Shard>, AdrnnError> {
    paths.iter().map(|p| Shard::read(p)).collect()
}
