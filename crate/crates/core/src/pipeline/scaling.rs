use std::fs;
use std::path::Path;

use super::synth::{gen_dataset, split_validation, SynthSpec};
use super::train::{evaluate, train, TrainOptions};
use crate::complexity::{count_macs, plan, Budget};
use crate::eval::{fit_scaling, write_points_csv, ScalingFit};
use crate::model::ModelConfig;
use crate::{Error, Result};

/// Smallest ratio between the largest and smallest budget.
pub const MIN_BUDGET_SPAN: f64 = 8.0;

#[derive(Clone, Debug)]
pub struct ScalingPoint {
    pub budget: f64,
    pub config: ModelConfig,
    pub macs_per_s: f64,
    /// Mean held-out SI-SNR of the trained model.
    pub si_snr: f64,
    /// Mean held-out SI-SNR of the noisy input.
    pub noisy_si_snr: f64,
}

#[derive(Clone, Debug)]
pub struct ScalingOutcome {
    pub points: Vec<ScalingPoint>,
    pub fit: ScalingFit,
}

impl ScalingOutcome {
    pub fn points_csv(&self) -> String {
        let pts: Vec<(f64, f64)> = self.points.iter().map(|p| (p.macs_per_s, p.si_snr)).collect();
        write_points_csv(&pts)
    }
}

/// Plans, trains and scores one model per budget, then fits held-out SI-SNR
/// against `log2(MACs/s)`.
///
/// With `out_dir`, writes `points.csv`, `fit.csv` and one `budget{i}.cfg` per
/// budget.
pub fn run_scaling_experiment(
    budgets: &[f64],
    data: &SynthSpec,
    opts: &TrainOptions,
    out_dir: Option<&Path>,
) -> Result<ScalingOutcome> {
    if budgets.len() < 3 {
        return Err(Error::Precondition(format!(
            "scaling run needs at least 3 budgets, got {}",
            budgets.len()
        )));
    }
    let lo = budgets.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = budgets.iter().copied().fold(0.0, f64::max);
    if !(hi / lo >= MIN_BUDGET_SPAN) {
        return Err(Error::Precondition(format!(
            "budgets must span at least {MIN_BUDGET_SPAN}x, got {:.2}x",
            hi / lo
        )));
    }
    let configs = budgets
        .iter()
        .map(|&b| plan(&Budget::new(b)?))
        .collect::<Result<Vec<_>>>()?;
    let clips = gen_dataset(data)?;
    let (train_set, valid_set) = split_validation(&clips);
    if valid_set.is_empty() {
        return Err(Error::Precondition("scaling run needs at least 2 clips".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut points = Vec::with_capacity(budgets.len());
    for (i, (&budget, config)) in budgets.iter().zip(configs).enumerate() {
        let run = TrainOptions {
            checkpoint: out_dir.map(|d| d.join(format!("budget{i}.ckpt"))),
            ..opts.clone()
        };
        let outcome = train(&config, &run, train_set, valid_set)?;
        let (si_snr, noisy_si_snr) = evaluate(&outcome.model, valid_set)?;
        if let Some(dir) = out_dir {
            fs::write(dir.join(format!("budget{i}.cfg")), format!("{config}"))?;
        }
        points.push(ScalingPoint {
            budget,
            macs_per_s: count_macs(&config)?.total_macs_per_s(),
            config,
            si_snr,
            noisy_si_snr,
        });
    }
    let pts: Vec<(f64, f64)> = points.iter().map(|p| (p.macs_per_s, p.si_snr)).collect();
    let fit = fit_scaling(&pts)?;
    let outcome = ScalingOutcome { points, fit };
    if let Some(dir) = out_dir {
        fs::write(dir.join("points.csv"), outcome.points_csv())?;
        fs::write(dir.join("fit.csv"), outcome.fit.to_csv())?;
    }
    Ok(outcome)
}
