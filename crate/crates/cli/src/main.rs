use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mpt_core::complexity::{count_macs, plan, Budget, DEFAULT_TOLERANCE};
use mpt_core::eval::{causality_probe, fit_scaling, read_points_csv};
use mpt_core::model::{Model, ModelConfig};
use mpt_core::pipeline::{
    denoise_file, gen_dataset, run_scaling_experiment, split_validation, train, SynthSpec, TrainOptions,
};
use mpt_core::{Error, Result};

/// Multi-path transformer speech enhancement toolkit.
#[derive(Parser, Debug)]
#[command(name = "mpt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pick a configuration for a MACs/s budget and write it to a file.
    Plan {
        #[arg(long)]
        macs: f64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tol: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the cost breakdown of a configuration.
    Macs {
        #[arg(long)]
        config: PathBuf,
        /// Also write the breakdown as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train on synthetic data and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        #[arg(long, default_value_t = 200)]
        clips: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Train on random crops of this many seconds.
        #[arg(long)]
        crop: Option<f64>,
    },
    /// Enhance a 16-bit mono WAV file.
    Denoise {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that outputs before a frame ignore everything after it.
    ProbeCausality {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        t0: usize,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit metric against log2(MACs/s).
    FitScaling {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plan, train and score one model per budget, then fit the trend.
    ScalingRun {
        #[arg(long, value_delimiter = ',', required = true)]
        budgets: Vec<f64>,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        #[arg(long, default_value_t = 200)]
        clips: usize,
        #[arg(long)]
        crop: Option<f64>,
    },
}

fn read_config(path: &Path) -> Result<ModelConfig> {
    ModelConfig::parse(&fs::read_to_string(path)?)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Plan { macs, tol, out } => {
            let cfg = plan(&Budget::with_tolerance(macs, tol)?)?;
            fs::write(&out, format!("{cfg}"))?;
            println!("{cfg}");
            println!("{}", count_macs(&cfg)?);
        }
        Command::Macs { config, csv } => {
            let report = count_macs(&read_config(&config)?)?;
            println!("{report}");
            if let Some(path) = csv {
                fs::write(path, report.to_csv())?;
            }
        }
        Command::Train { config, seed, steps, out, data_seed, clips, lr, crop } => {
            let cfg = read_config(&config)?;
            let data = gen_dataset(&SynthSpec::new(data_seed, clips))?;
            let (tr, va) = split_validation(&data);
            let opts = TrainOptions {
                steps,
                seed,
                lr,
                crop_seconds: crop,
                checkpoint: Some(out.clone()),
                ..TrainOptions::default()
            };
            let outcome = train(&cfg, &opts, tr, va)?;
            if let Some(last) = outcome.history.loss.last() {
                println!("final loss {last:.3} dB");
            }
            for (step, score) in &outcome.history.validation {
                println!("step {step}: validation SI-SNR {score:.3} dB");
            }
            println!("wrote {}", out.display());
        }
        Command::Denoise { config, ckpt, input, out } => {
            denoise_file(&read_config(&config)?, &ckpt, &input, &out)?;
        }
        Command::ProbeCausality { config, ckpt, frames, t0, trials, seed } => {
            let cfg = read_config(&config)?;
            let model = match ckpt {
                Some(path) => Model::from_checkpoint(&cfg, path)?,
                None => Model::build(&cfg, seed)?,
            };
            let report = causality_probe(&model, frames, t0, trials, seed)?;
            println!(
                "max deviation before frame {t0}: {:.3e} ({})",
                report.max_deviation,
                if report.passed { "causal" } else { "NOT causal" }
            );
            if !report.passed {
                return Err(Error::Precondition("causality probe failed".into()));
            }
        }
        Command::FitScaling { csv, out } => {
            let fit = fit_scaling(&read_points_csv(&fs::read_to_string(csv)?)?)?;
            print!("{}", fit.to_csv());
            if let Some(path) = out {
                fs::write(path, fit.to_csv())?;
            }
        }
        Command::ScalingRun { budgets, steps, out, seed, data_seed, clips, crop } => {
            let opts = TrainOptions {
                steps,
                seed,
                crop_seconds: crop,
                ..TrainOptions::default()
            };
            let outcome = run_scaling_experiment(&budgets, &SynthSpec::new(data_seed, clips), &opts, Some(&out))?;
            for p in &outcome.points {
                println!(
                    "budget {:.3e}: {:.3e} MACs/s, SI-SNR {:.3} dB (noisy {:.3} dB)",
                    p.budget, p.macs_per_s, p.si_snr, p.noisy_si_snr
                );
            }
            print!("{}", outcome.fit.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
