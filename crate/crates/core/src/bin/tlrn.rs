use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tlrn::config::Split;
use tlrn::experiment;
use tlrn::{Error, Mode, Result};

#[derive(Parser)]
#[command(name = "tlrn", version, about = "Temporal lagrangian registration of image sequences")]
struct Cli {
    /// Experiment configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base preset applied before the config file.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Overrides both the data and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run on a single worker thread.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train, val and test splits.
    GenData,
    /// Train one model.
    Train {
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Dataset file, defaults to `<out>/train.tlrn`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or compare two.
    Eval {
        /// Defaults to `<out>/<mode>/checkpoint.ckpt`.
        #[arg(long, conflicts_with = "compare")]
        checkpoint: Option<PathBuf>,
        /// Dataset file, defaults to `<out>/test.tlrn`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, num_args = 2, value_names = ["FIRST", "SECOND"])]
        compare: Option<Vec<PathBuf>>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
    },
    /// Render metric curves and sequence strips as SVG.
    ExportPlots {
        /// Summary CSV written by `eval`; repeatable.
        #[arg(long = "summary")]
        summaries: Vec<PathBuf>,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sequence: usize,
    },
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| format!("unknown mode `{s}`, expected tlrn or baseline"))
}

fn run(cli: Cli) -> Result<()> {
    if cli.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot configure the worker pool: {e}")))?;
    }
    let mut cfg = experiment::resolve_config(
        cli.preset.as_deref(),
        cli.config.as_deref(),
        cli.seed,
        cli.out.as_deref(),
    )?;
    let out = PathBuf::from(&cfg.output_dir);
    match cli.command {
        Command::GenData => {
            for path in experiment::gen_data(&cfg)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Train { mode, epochs, resume, data } => {
            if let Some(mode) = mode {
                cfg.train.mode = mode;
            }
            if let Some(epochs) = epochs {
                cfg.train.epochs = epochs;
            }
            cfg.validate()?;
            let data = data.unwrap_or_else(|| experiment::dataset_path(&out, Split::Train));
            let ckpt = experiment::train(&cfg, &data, resume, |log| {
                println!(
                    "epoch {:>5}  loss {:.6e}  sim {:.6e}  smooth {:.6e}  reg {:.6e}  {:.2}s",
                    log.epoch, log.mean_loss, log.similarity, log.smoothness, log.regularity, log.wall_seconds
                );
            })?;
            println!(
                "checkpoint {} at epoch {}",
                experiment::run_dir(&cfg, ckpt.mode()).join(experiment::CHECKPOINT_FILE).display(),
                ckpt.epoch
            );
        }
        Command::Eval { checkpoint, data, compare, mode } => {
            let data = data.unwrap_or_else(|| experiment::dataset_path(&out, Split::Test));
            if let Some(pair) = compare {
                for path in experiment::compare(&cfg, &pair[0], &pair[1], &data)? {
                    println!("wrote {}", path.display());
                }
            } else {
                let mode = mode.unwrap_or(cfg.train.mode);
                let checkpoint = checkpoint
                    .unwrap_or_else(|| experiment::run_dir(&cfg, mode).join(experiment::CHECKPOINT_FILE));
                let (report, written) = experiment::eval(&cfg, &checkpoint, &data)?;
                print_final(&report);
                for path in written {
                    println!("wrote {}", path.display());
                }
            }
        }
        Command::ExportPlots { summaries, checkpoint, data, sequence } => {
            let strip = match (&checkpoint, &data) {
                (Some(c), Some(d)) => Some((c.as_path(), d.as_path(), sequence)),
                _ => None,
            };
            for path in experiment::export_plots(&cfg, &summaries, strip)? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn print_final(report: &tlrn::EvalReport) {
    if let Some(f) = report.summary.last() {
        print!("frame {} over {} sequences: mse {:.4e}", f.frame, f.count, f.mse.mean);
        if let Some(d) = f.dice {
            print!("  dice {:.4}", d.mean);
        }
        if let Some(h) = f.hd {
            print!("  hd {:.3}", h.mean);
        }
        println!("  neg-jac {:.4e}", f.neg_jac_frac.mean);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tlrn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
