use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hft::harness::{self, AblationAxis, AnyCheckpoint, RunConfig};
use hft::synthworld::{self, Dataset, DatasetConfig};
use hft::{Error, Result};

#[derive(Parser)]
#[command(name = "hft", version, about = "Monocular front-view to BEV occupancy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train and compare variants along one axis.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: AblationAxis,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render predictions and ground truth for some samples.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated sample ids.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the parameter count table for a run config.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let cfg: DatasetConfig = match config {
                Some(p) => {
                    let text = fs::read_to_string(&p)
                        .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("dataset config: {e}")))?
                }
                None => DatasetConfig::default(),
            };
            let m = synthworld::generate_dataset(&cfg, seed, &out)?;
            println!("wrote {} samples ({}) to {}", m.samples.len(), m.splits, out.display());
        }
        Command::Train { config, out, resume } => {
            let summary = match resume {
                Some(ckpt) => harness::resume(&ckpt, None)?,
                None => {
                    let mut cfg = RunConfig::load(&config)?;
                    if let Some(o) = out {
                        cfg.output = o;
                    }
                    harness::train(&cfg)?
                }
            };
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            report,
        } => {
            let ckpt = AnyCheckpoint::load(&checkpoint)?;
            let ds = Dataset::open(&data)?;
            let r = harness::evaluate(&ckpt, &ds, &split)?;
            fs::write(&report, r.to_json()?)?;
            println!("mIoU {:?}  mAP {:?}  BamIoU {:.4}", r.miou, r.map, r.bamiou);
        }
        Command::Ablate { config, axis, out } => {
            let cfg = RunConfig::load(&config)?;
            let table = harness::ablate(&cfg, axis, &out)?;
            print!("{}", table.to_text());
        }
        Command::Viz {
            checkpoint,
            data,
            ids,
            out,
        } => {
            let ckpt = AnyCheckpoint::load(&checkpoint)?;
            let ds = Dataset::open(&data)?;
            let written = harness::visualize(&ckpt, &ds, &ids, &out)?;
            println!("rendered {} samples into {}", written.len(), out.display());
        }
        Command::Params { config } => {
            let cfg = RunConfig::load(&config)?;
            let ds = Dataset::open(&cfg.dataset).ok();
            let (grid, intr) = match (&cfg.grid, &ds) {
                (Some(g), _) => (g.clone(), synthworld::default_intrinsics()),
                (None, Some(ds)) => (
                    ds.manifest.grid.clone(),
                    ds.manifest.samples.first().map_or_else(synthworld::default_intrinsics, |s| s.intrinsics),
                ),
                (None, None) => (synthworld::default_grid(), synthworld::default_intrinsics()),
            };
            let table = harness::param_table(&cfg.model, &grid, &intr)?;
            println!("{:<10} {:>10} {:>10} {:>10}", "submodule", "cbft_only", "cfft_only", "hybrid");
            for name in hft::net::SUBMODULES {
                let cells: Vec<String> = table.iter().map(|(_, c)| format!("{:>10}", c.get(name))).collect();
                println!("{:<10} {}", name, cells.join(" "));
            }
            let totals: Vec<String> = table.iter().map(|(_, c)| format!("{:>10}", c.total)).collect();
            println!("{:<10} {}", "total", totals.join(" "));
            println!("additivity residual: {}", harness::additivity_residual(&table)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
