use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use anystep_core::config::RunConfig;
use anystep_core::run::{cmd_eval, cmd_sweep, cmd_train, EvalOptions, RunDir, SweepAxis};
use anystep_core::verify::{run_all, VerifyOptions};
use anystep_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "anystep", version, about = "Any-step generative training on synthetic mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train {
        #[command(flatten)]
        loc: RunLocation,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Step-count sweep of the latest checkpoint.
    Eval {
        #[command(flatten)]
        loc: RunLocation,
        #[command(flatten)]
        eval: EvalArgs,
        /// Sample from the exact data distribution instead of the model.
        #[arg(long)]
        oracle: bool,
    },
    /// Run the property suite; exits 1 if any property fails.
    Verify {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Finite-difference coordinates per gradient property (default: all).
        #[arg(long)]
        grad_coords: Option<usize>,
    },
    /// Evaluate the latest checkpoint across one sampler axis.
    Sweep {
        #[command(flatten)]
        loc: RunLocation,
        /// One of s_strategy (alias rho), eta, omega, steps.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values (default: the axis preset).
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[command(flatten)]
        eval: EvalArgs,
    },
}

#[derive(Args)]
struct RunLocation {
    /// Run directory; defaults to <out>/<config hash>.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Output root for new runs.
    #[arg(long, env = "ANYSTEP_OUT")]
    out: Option<PathBuf>,
    /// Run config; for eval and sweep it only locates the run directory.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Comma-separated step counts.
    #[arg(long, value_delimiter = ',')]
    steps: Option<Vec<usize>>,
    /// Samples per condition and step count.
    #[arg(long)]
    n: Option<usize>,
    /// Evaluation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Independent evaluation draws averaged per cell.
    #[arg(long)]
    repeats: Option<usize>,
}

impl EvalArgs {
    fn options(&self, oracle: bool) -> EvalOptions {
        EvalOptions {
            steps: self.steps.clone(),
            n: self.n,
            seed: self.seed,
            repeats: self.repeats,
            oracle,
        }
    }
}

fn default_run_dir(cfg: &RunConfig, out: Option<&Path>) -> PathBuf {
    let root = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(cfg.short_hash())
}

fn resolve(loc: &RunLocation) -> anyhow::Result<RunDir> {
    if let Some(dir) = &loc.run_dir {
        return Ok(RunDir::new(dir));
    }
    let path = loc.config.as_deref().context("either --run-dir or --config is required")?;
    let cfg = RunConfig::load(path)?;
    Ok(RunDir::new(default_run_dir(&cfg, loc.out.as_deref())))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. } | Error::ConfigParse(_) | Error::UnknownAxis(_) | Error::Argument(_)) => 2,
        Some(Error::Diverged { .. }) => 3,
        Some(Error::MissingCheckpoint(_)) => 4,
        Some(Error::Locked(_)) => 5,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train { loc, seed } => {
            let mut cfg = match &loc.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let dir = match &loc.run_dir {
                Some(d) => RunDir::new(d),
                None => RunDir::new(default_run_dir(&cfg, loc.out.as_deref())),
            };
            println!("run dir {}", dir.root().display());
            let rec = cmd_train(&cfg, &dir)?;
            println!(
                "completed {} iterations, {} checkpoints, config {}",
                rec.iters_completed,
                rec.checkpoints.len(),
                rec.config_hash
            );
        }
        Command::Eval { loc, eval, oracle } => {
            let dir = resolve(&loc)?;
            let out = cmd_eval(&dir, &eval.options(oracle))?;
            println!("{:>6} {:>10} {:>10}", "steps", "w2", "floor");
            for r in &out.aggregate {
                println!("{:>6} {:>10.4} {:>10.4}", r.steps, r.w2, r.floor);
            }
            for v in &out.verdicts {
                println!("class {} monotone {} worst_rise {:.4}", v.condition, v.monotone, v.worst_rise);
            }
            println!("wrote {} files under {}", out.files.len(), dir.root().display());
        }
        Command::Verify { seed, grad_coords } => {
            let results = run_all(&VerifyOptions {
                seed,
                grad_coords,
                ..Default::default()
            });
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.pass).count();
            println!("{} properties, {} failed", results.len(), failed);
            if failed > 0 {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Sweep { loc, axis, values, eval } => {
            let axis = SweepAxis::parse(&axis)?;
            let dir = resolve(&loc)?;
            let out = cmd_sweep(&dir, axis, values, &eval.options(false))?;
            for (v, rows) in out.values.iter().zip(&out.rows) {
                let agg = anystep_core::evalsuite::aggregate(rows);
                let cells: Vec<String> = agg.iter().map(|r| format!("{}:{:.4}", r.steps, r.w2)).collect();
                println!("{}={v} {}", axis.name(), cells.join(" "));
            }
            for v in &out.verdicts {
                println!("class {} monotone {} worst_rise {:.4}", v.condition, v.monotone, v.worst_rise);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
