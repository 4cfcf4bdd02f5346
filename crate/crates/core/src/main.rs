//! Command-line front end: train / sample / eval / profile / sweep.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use exitdiff::cli;
use exitdiff::config::{load_config, RunConfig};
use exitdiff::error::{Error, Result};

#[derive(Parser)]
#[command(
    name = "exitdiff",
    about = "Early-exit diffusion lab: train, sample and measure adaptive-depth denoisers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Run configuration file (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (defaults to $EXITDIFF_OUT/<command>-seed<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides the config value.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-path config overrides, e.g. --set exit.threshold=0.05.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Dataset kind: gmm | swissroll | checkerboard | tinyimage.
    #[arg(long)]
    dataset: Option<String>,
}

#[derive(Args, Clone)]
struct SampleArgs {
    /// Exit threshold tau; overrides exit.threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// Sampler: ancestral | deterministic.
    #[arg(long)]
    sampler: Option<String>,
    /// Step count for the deterministic sampler.
    #[arg(long)]
    steps: Option<usize>,
    /// Number of samples to generate.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a denoiser, writing checkpoints, loss curves and the timestep
    /// histogram into the run directory.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Resume from a checkpoint (config must match).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate samples from a checkpoint with the adaptive-depth loop.
    Sample {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        sample: SampleArgs,
        /// Trained checkpoint to sample from.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sampling-loop positions to export uncertainty maps at.
        #[arg(long, value_delimiter = ',')]
        map_steps: Vec<usize>,
    },
    /// Score a checkpoint: efficiency, sample quality and the
    /// error-accumulation curve.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        sample: SampleArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Layer-redundancy profile over a timestep grid.
    Profile {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Trade-off curve over a list of exit thresholds.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        sample: SampleArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated threshold list, e.g. 0.2,0.1,0.05,0.02,0.01.
        #[arg(long, value_delimiter = ',', required = true)]
        thresholds: Vec<f64>,
    },
}

fn resolve_config(common: &CommonArgs, sample: Option<&SampleArgs>) -> Result<RunConfig> {
    // Generic --set overrides apply first; dedicated flags win on conflict.
    let mut overrides = common.set.clone();
    if let Some(ds) = &common.dataset {
        let kind = exitdiff::training::DatasetKind::parse(ds)?;
        overrides.push(format!("train.dataset.kind=\"{kind}\""));
    }
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(s) = sample {
        if let Some(tau) = s.threshold {
            overrides.push(format!("exit.threshold={tau}"));
        }
        if let Some(sampler) = &s.sampler {
            match sampler.as_str() {
                "ancestral" | "deterministic" => {
                    overrides.push(format!("eval.sampler=\"{sampler}\""))
                }
                other => {
                    return Err(Error::Config(format!(
                        "unknown sampler {other:?}; expected ancestral|deterministic"
                    )))
                }
            }
        }
        if let Some(steps) = s.steps {
            overrides.push(format!("eval.steps={steps}"));
        }
        if let Some(n) = s.n {
            overrides.push(format!("eval.n_samples={n}"));
        }
    }
    load_config(common.config.as_deref(), &overrides)
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { common, resume } => {
            let cfg = resolve_config(&common, None)?;
            let art = cli::cmd_train(&cfg, common.out.as_deref(), resume.as_deref())?;
            println!(
                "trained {} steps -> {}",
                cfg.train.total_steps,
                art.out_dir.display()
            );
        }
        Command::Sample {
            common,
            sample,
            checkpoint,
            map_steps,
        } => {
            let mut cfg = resolve_config(&common, Some(&sample))?;
            if !map_steps.is_empty() {
                cfg.eval.map_steps = map_steps;
            }
            let art = cli::cmd_sample(&checkpoint, &cfg, common.out.as_deref())?;
            println!(
                "generated {} samples over {} steps -> {}",
                art.run.samples.rows,
                art.run.num_steps,
                art.out_dir.display()
            );
        }
        Command::Eval {
            common,
            sample,
            checkpoint,
        } => {
            let cfg = resolve_config(&common, Some(&sample))?;
            let art = cli::cmd_eval(&checkpoint, &cfg, common.out.as_deref())?;
            println!(
                "mmd {:.6e}, avg layers {:.3}, layers ratio {:.1}% -> {}",
                art.mmd,
                art.report.avg_layers,
                -art.report.layers_ratio_reduction * 100.0,
                art.out_dir.display()
            );
        }
        Command::Profile { common, checkpoint } => {
            let cfg = resolve_config(&common, None)?;
            let art = cli::cmd_profile(&checkpoint, &cfg, common.out.as_deref())?;
            println!(
                "redundancy profile {} layers x {} timesteps -> {}",
                art.profile.rows,
                art.t_grid.len(),
                art.out_dir.display()
            );
        }
        Command::Sweep {
            common,
            sample,
            checkpoint,
            thresholds,
        } => {
            let cfg = resolve_config(&common, Some(&sample))?;
            let art = cli::cmd_sweep(&checkpoint, &cfg, &thresholds, common.out.as_deref())?;
            for p in &art.points {
                println!(
                    "tau {:>6}: layers ratio {:5.1}%, mmd {:.6e}",
                    p.threshold,
                    -p.layers_ratio_reduction * 100.0,
                    p.quality
                );
            }
            println!("-> {}", art.out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
