use clap::{Parser, Subcommand};
use faceswap::harness::{
    ablate, eval_checkpoint, plot_metrics, pretrain_embedder_to_dir, swap, train, Checkpoint,
    TrainConfig, TrainOptions,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "faceswap",
    about = "Identity-conditioned face swapping on procedural faces",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the identity embedder and report its held-out separation.
    PretrainEmbedder {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train the full pipeline; writes metrics.csv and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Override total_steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Resume from a training checkpoint (its embedded config is used).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use a pretrained embedder checkpoint instead of pretraining.
        #[arg(long)]
        embedder: Option<PathBuf>,
    },
    /// Swap the source identity onto the target image (P6 PPM in and out).
    Swap {
        #[arg(long)]
        checkpoint: PathBuf,
        source: PathBuf,
        target: PathBuf,
        out: PathBuf,
    },
    /// Evaluate a checkpoint on held-out identities.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 64)]
        pairs: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the attention / weighting / learning-rate ablation grids.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Steps per ablation run.
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value = "out/ablate")]
        out: PathBuf,
    },
    /// Render line plots (one PPM per column) from a metrics CSV.
    Plot {
        csv: PathBuf,
        #[arg(long, default_value = "out/plots")]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> faceswap::Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| faceswap::Error::io(p, e))?;
            TrainConfig::parse(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run() -> faceswap::Result<()> {
    match Cli::parse().command {
        Command::PretrainEmbedder { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let (path, separation) = pretrain_embedder_to_dir(&cfg, &out)?;
            println!("wrote {}", path.display());
            println!("held-out identity separation: {separation:.4}");
        }
        Command::Train {
            config,
            seed,
            steps,
            out,
            checkpoint,
            embedder,
        } => {
            let mut cfg = match &checkpoint {
                // A resume carries its own config snapshot.
                Some(ck_path) => TrainConfig::parse(&Checkpoint::load(ck_path)?.config_text)?,
                None => load_config(&config, seed)?,
            };
            if checkpoint.is_none() {
                if let Some(s) = steps {
                    cfg.total_steps = s;
                    cfg.validate()?;
                }
            }
            let opts = TrainOptions {
                resume_from: checkpoint,
                embedder_checkpoint: embedder,
            };
            let outcome = train(&cfg, &out, &opts)?;
            println!(
                "trained {} steps; metrics: {}; checkpoint: {}",
                outcome.final_step,
                outcome.metrics_path.display(),
                outcome.checkpoint_path.display()
            );
        }
        Command::Swap {
            checkpoint,
            source,
            target,
            out,
        } => {
            swap(&checkpoint, &source, &target, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Eval {
            checkpoint,
            seed,
            pairs,
            out,
        } => {
            let csv = out.join("eval.csv");
            let report = eval_checkpoint(&checkpoint, pairs, seed.unwrap_or(0), Some(&csv))?;
            println!("{report}");
            println!("wrote {}", csv.display());
        }
        Command::Ablate {
            config,
            seed,
            steps,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            let tables = ablate(&cfg, steps, &out)?;
            for (name, rows) in [
                ("attention", &tables.attention),
                ("weighting", &tables.weighting),
                ("lr", &tables.lr),
            ] {
                println!("{name}:");
                for row in rows {
                    println!("  {}: {}", row.label, row.report);
                }
            }
            println!("tables written under {}", out.display());
        }
        Command::Plot { csv, out } => {
            let files = plot_metrics(&csv, &out)?;
            println!("wrote {} plots under {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
