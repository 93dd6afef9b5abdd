//! `srepa`: data generation, training, sampling, evaluation, gradient
//! checks, similarity maps and ablation sweeps.
//!
//! Exit codes: 0 success, 1 check failure, 2 configuration or usage error,
//! 3 I/O error, 4 numerical abort.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use srepa_cli::commands::{self, SampleOptions};
use srepa_cli::exit::{code_of, CHECK_FAILED, OK, USAGE};

#[derive(Parser)]
#[command(name = "srepa", version, about = "Structural representation alignment for flow-matching training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset described by a training config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student; writes config.json, metrics.csv and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate images with the EMA student; writes one PGM per image and
    /// a tiled grid.pgm.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Class of every sample; cycles through all classes when absent.
        #[arg(long = "class")]
        class: Option<usize>,
        /// Guidance scale; defaults to the checkpoint config's value.
        #[arg(long)]
        cfg_scale: Option<f64>,
        /// Euler steps; defaults to the checkpoint config's value.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Teacher-space Fréchet distance and Gram discrepancy as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable op and loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Teacher and student similarity maps of one anchor token as PGM.
    Simmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        image_index: usize,
        #[arg(long)]
        anchor: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train and evaluate every cell of a config grid; per-cell runs go to
    /// `<out stem>_cells/` beside the CSV.
    Sweep {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::GenData { config, out } => {
            let data = commands::gen_data(&config, &out)?;
            println!("wrote {} images to {}", data.len(), out.display());
        }
        Command::Train { config, out_dir, resume } => {
            let s = commands::train(&config, &out_dir, resume.as_deref())?;
            match s.last_row {
                Some(row) => println!(
                    "ran {} steps; final loss_total {}; checkpoint {}",
                    s.steps_run,
                    row.loss_total,
                    s.final_checkpoint.display()
                ),
                None => println!("no steps remain; checkpoint {}", s.final_checkpoint.display()),
            }
        }
        Command::Sample {
            ckpt,
            n,
            class,
            cfg_scale,
            steps,
            seed,
            out,
        } => {
            let opts = SampleOptions {
                n,
                class,
                cfg_scale,
                steps,
                seed,
            };
            let files = commands::sample(&ckpt, &opts, &out)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
        Command::Eval { ckpt, data, out } => {
            let r = commands::eval(&ckpt, &data, &out)?;
            println!(
                "frechet {}  gram_discrepancy {}  ({} images, teacher feature space)",
                r.frechet, r.gram_discrepancy, r.eval_images
            );
        }
        Command::Gradcheck { seed, tol } => {
            let (results, table) = commands::gradcheck(seed, tol);
            print!("{table}");
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} of {} checks passed", results.len() - failed, results.len());
            if failed > 0 {
                return Ok(CHECK_FAILED);
            }
        }
        Command::Simmap {
            ckpt,
            data,
            image_index,
            anchor,
            out_dir,
        } => {
            let f = commands::simmap(&ckpt, &data, image_index, anchor, &out_dir)?;
            println!("wrote {} and {}", f.teacher.display(), f.student.display());
        }
        Command::Sweep { base, grid, out } => {
            let failed = commands::sweep(&base, &grid, &out)?;
            println!("wrote {}", out.display());
            if failed > 0 {
                eprintln!("{failed} cells failed");
                return Ok(CHECK_FAILED);
            }
        }
    }
    Ok(OK)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { OK });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code_of(&e))
        }
    }
}
