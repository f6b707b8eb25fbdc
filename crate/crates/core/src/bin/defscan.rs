use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use defscan::harness::bench::{bench_scan, render_csv};
use defscan::harness::checkpoint::Checkpoint;
use defscan::harness::config::RunConfig;
use defscan::harness::data::synth_dataset;
use defscan::harness::gradcheck::{gradcheck, GradcheckOptions, Scope, Verdict, DEFAULT_TOLERANCE};
use defscan::harness::train::{evaluate, thread_pool, train_with};
use defscan::harness::viz::{scan_viz, Ppm};
use defscan::{Error, Tensor};

#[derive(Parser)]
#[command(
    name = "defscan",
    version,
    about = "Deformable state space model toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic data; writes metrics, configuration and a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to train.out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Print a progress line every this many steps (0 disables).
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Accuracy of a checkpoint on the training and evaluation sets of a configuration.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference verification of the analytic gradients.
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Put every sampled coordinate on a lattice point.
        #[arg(long)]
        force_lattice: bool,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Train the branch and component ablation grids and print a CSV table.
    BenchScan {
        #[arg(long)]
        config: PathBuf,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render deformable points and scan-order maps as PPM files.
    ScanViz {
        #[arg(long)]
        ckpt: PathBuf,
        /// A P6 file, or `synth:<index>` for a sample of the configured dataset.
        #[arg(long)]
        image: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure with a machine-readable code prefix.
struct Failure {
    code: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: e.code(),
            message: e.to_string(),
        }
    }
}

fn load_image(spec: &str, cfg: &RunConfig) -> Result<Tensor, Failure> {
    match spec.strip_prefix("synth:") {
        Some(idx) => {
            let idx: usize = idx.parse().map_err(|_| Failure {
                code: "E_INPUT",
                message: format!("bad synthetic sample index {idx:?}"),
            })?;
            let mut samples = synth_dataset(cfg.data.kind, idx + 1, cfg.data.seed)?;
            Ok(samples.swap_remove(idx).image)
        }
        None => Ok(Ppm::load(Path::new(spec))?.to_tensor()),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            log_every,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.train.out_dir));
            let report = train_with(&cfg, Some(&out), |m| {
                if log_every > 0 && (m.step % log_every == 0 || m.step == cfg.train.steps) {
                    eprintln!(
                        "step {:>5}  lr {:.3e}  loss {:.4}  batch_acc {:.3}",
                        m.step, m.lr, m.loss, m.train_acc
                    );
                }
            })?;
            println!("train_acc = {:.4}", report.train_acc);
            println!("eval_acc = {:.4}", report.eval_acc);
            println!("out_dir = {}", out.display());
        }
        Command::Eval { ckpt, config } => {
            let cfg = RunConfig::load(&config)?;
            let (model, saved) = Checkpoint::load(&ckpt)?.to_model()?;
            if saved.model != cfg.model {
                return Err(Failure {
                    code: "E_CONFIG",
                    message: "model section of the configuration does not match the checkpoint"
                        .into(),
                });
            }
            let pool = thread_pool()?;
            let train_set = synth_dataset(cfg.data.kind, cfg.data.train_size, cfg.data.seed)?;
            let eval_set = synth_dataset(
                cfg.data.kind,
                cfg.data.eval_size,
                cfg.data.seed.wrapping_add(1),
            )?;
            println!("train_acc = {:.4}", evaluate(&model, &train_set, &pool)?);
            println!("eval_acc = {:.4}", evaluate(&model, &eval_set, &pool)?);
        }
        Command::Gradcheck {
            scope,
            seed,
            force_lattice,
            tolerance,
        } => {
            let report = gradcheck(
                scope,
                GradcheckOptions {
                    seed,
                    tolerance,
                    force_lattice,
                },
            )?;
            print!("{}", report.render());
            let failed = report
                .results
                .iter()
                .filter(|r| r.verdict == Verdict::Fail)
                .count();
            if failed > 0 {
                return Err(Failure {
                    code: "E_GRADCHECK",
                    message: format!(
                        "{failed} gradient checks exceeded relative error {tolerance:e}"
                    ),
                });
            }
        }
        Command::BenchScan { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let csv = render_csv(&bench_scan(&cfg)?);
            print!("{csv}");
            if let Some(path) = out {
                std::fs::write(&path, &csv).map_err(|e| Failure {
                    code: "E_IO",
                    message: format!("io error on {}: {e}", path.display()),
                })?;
            }
        }
        Command::ScanViz { ckpt, image, out } => {
            let (model, cfg) = Checkpoint::load(&ckpt)?.to_model()?;
            let img = load_image(&image, &cfg)?;
            for p in scan_viz(&model, &img, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("bad arguments");
            eprintln!("E_USAGE: {}", first.trim_start_matches("error: "));
            return ExitCode::FAILURE;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}: {}", f.code, f.message.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
