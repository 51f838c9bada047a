//! Metrics, the causality probe and the scaling-law fit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::Spectrogram;
use crate::layers::Mode;
use crate::model::Model;
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// SI-SNR values are clamped to `±SI_SNR_CLAMP_DB`.
pub const SI_SNR_CLAMP_DB: f64 = 100.0;

/// Energy guard inside the differentiable SI-SNR.
pub const LOSS_EPS: f64 = 1e-8;

/// Largest deviation a causal model may show before the probe point.
pub const PROBE_THRESHOLD: f64 = 1e-6;

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant SNR in dB, clamped to `[-100, 100]`.
pub fn si_snr(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() || est.len() < 2 {
        return Err(Error::Precondition(format!(
            "si_snr needs equal lengths of at least 2, got {} and {}",
            est.len(),
            reference.len()
        )));
    }
    let s = zero_mean(reference);
    let e = zero_mean(est);
    let ss = dot(&s, &s);
    if ss == 0.0 {
        return Err(Error::Precondition("si_snr reference has zero energy".into()));
    }
    let alpha = dot(&e, &s) / ss;
    let target: Vec<f64> = s.iter().map(|v| alpha * v).collect();
    let resid: f64 = e.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum();
    let tt = dot(&target, &target);
    let db = 10.0 * (tt / resid).log10();
    Ok(if db.is_nan() {
        -SI_SNR_CLAMP_DB
    } else {
        db.clamp(-SI_SNR_CLAMP_DB, SI_SNR_CLAMP_DB)
    })
}

/// Negative SI-SNR of a waveform on the tape against a fixed reference.
///
/// Energies are floored by [`LOSS_EPS`] inside the logarithms.
pub fn si_snr_loss(tape: &mut Tape, est: Var, reference: &[f64]) -> Result<Var> {
    let n = reference.len();
    if tape.shape(est) != [n] || n < 2 {
        return Err(Error::Precondition(format!(
            "loss expects an estimate of shape [{n}], got {:?}",
            tape.shape(est)
        )));
    }
    let s = zero_mean(reference);
    let ss = dot(&s, &s);
    if ss == 0.0 {
        return Err(Error::Precondition("loss reference has zero energy".into()));
    }
    let mean = tape.mean(est)?;
    let e = tape.sub(est, mean)?;
    let sv = tape.constant(Tensor::new(vec![n], s)?);
    let es = tape.mul(e, sv)?;
    let proj = tape.sum(es)?;
    let alpha = tape.scale(proj, 1.0 / ss)?;
    let target = tape.mul(sv, alpha)?;
    let resid = tape.sub(e, target)?;
    let tt = tape.square(target)?;
    let tt = tape.sum(tt)?;
    let tt = tape.offset(tt, LOSS_EPS)?;
    let rr = tape.square(resid)?;
    let rr = tape.sum(rr)?;
    let rr = tape.offset(rr, LOSS_EPS)?;
    let lt = tape.log(tt)?;
    let lr = tape.log(rr)?;
    let diff = tape.sub(lr, lt)?;
    Ok(tape.scale(diff, 10.0 / std::f64::consts::LN_10)?)
}

/// Least-squares line of a metric against `log2(MACs/s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingFit {
    /// Metric units per doubling of MACs/s.
    pub slope: f64,
    /// Metric at 1 MAC/s.
    pub intercept: f64,
    pub residuals: Vec<f64>,
    pub r2: f64,
}

impl ScalingFit {
    pub fn predict(&self, macs_per_s: f64) -> f64 {
        self.slope * macs_per_s.log2() + self.intercept
    }

    /// `slope,intercept,r2` with one data row.
    pub fn to_csv(&self) -> String {
        format!("slope,intercept,r2\n{},{},{}\n", self.slope, self.intercept, self.r2)
    }
}

pub fn fit_scaling(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if points.len() < 2 {
        return Err(Error::Precondition(format!(
            "fit needs at least 2 points, got {}",
            points.len()
        )));
    }
    if let Some(p) = points.iter().find(|p| !(p.0 > 0.0 && p.0.is_finite() && p.1.is_finite())) {
        return Err(Error::Precondition(format!(
            "fit points need positive finite MACs and finite metrics, got {p:?}"
        )));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.log2()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 1e-12 * mx.abs().max(1.0) {
        return Err(Error::Precondition("fit is degenerate: all MACs values are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| y - (slope * x + intercept)).collect();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(ScalingFit {
        slope,
        intercept,
        residuals,
        r2,
    })
}

/// Parses `macs_per_s,metric` rows after a header line.
pub fn read_points_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    match lines.next() {
        Some("macs_per_s,metric") => {}
        other => {
            return Err(Error::Format(format!(
                "expected header macs_per_s,metric, got {other:?}"
            )))
        }
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Format(format!("row {}: cannot parse {s:?}", i + 1)))
            };
            match fields.as_slice() {
                [m, v] => Ok((parse(m)?, parse(v)?)),
                _ => Err(Error::Format(format!("row {}: expected 2 fields, got {}", i + 1, fields.len()))),
            }
        })
        .collect()
}

pub fn write_points_csv(points: &[(f64, f64)]) -> String {
    let mut out = String::from("macs_per_s,metric\n");
    for (m, v) in points {
        out += &format!("{m},{v}\n");
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub frames: usize,
    pub t0: usize,
    /// Largest deviation before `t0` in each trial.
    pub deviations: Vec<f64>,
    pub max_deviation: f64,
    pub passed: bool,
}

fn random_spectrogram(template: &Spectrogram, rng: &mut ChaCha8Rng) -> Spectrogram {
    let n = template.frames * template.bins;
    let mut draw = || (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
    let re = draw();
    let im = draw();
    template.with_values(re, im)
}

/// Causality probe over any spectrogram-to-spectrogram map.
///
/// Each trial feeds a random spectrogram and a copy whose frames from `t0`
/// on are redrawn, then measures the largest output difference before `t0`.
pub fn probe_with<F>(template: &Spectrogram, t0: usize, trials: usize, seed: u64, mut f: F) -> Result<ProbeReport>
where
    F: FnMut(&Spectrogram) -> Result<Spectrogram>,
{
    let frames = template.frames;
    if t0 == 0 || t0 >= frames {
        return Err(Error::Precondition(format!("probe needs 0 < t0 < {frames}, got t0 = {t0}")));
    }
    if trials == 0 {
        return Err(Error::Precondition("probe needs at least one trial".into()));
    }
    let cut = t0 * template.bins;
    let mut deviations = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let a = random_spectrogram(template, &mut rng);
        let fresh = random_spectrogram(template, &mut rng);
        let mut b = a.clone();
        b.re[cut..].copy_from_slice(&fresh.re[cut..]);
        b.im[cut..].copy_from_slice(&fresh.im[cut..]);
        let (ya, yb) = (f(&a)?, f(&b)?);
        let dev = ya.re[..cut]
            .iter()
            .zip(&yb.re[..cut])
            .chain(ya.im[..cut].iter().zip(&yb.im[..cut]))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        deviations.push(dev);
    }
    let max_deviation = deviations.iter().copied().fold(0.0, f64::max);
    Ok(ProbeReport {
        frames,
        t0,
        deviations,
        max_deviation,
        passed: max_deviation < PROBE_THRESHOLD,
    })
}

/// Probes a model's spectral path; the model must be in evaluation mode.
pub fn causality_probe(model: &Model, frames: usize, t0: usize, trials: usize, seed: u64) -> Result<ProbeReport> {
    if model.mode() != Mode::Eval {
        return Err(Error::Precondition(
            "causality probe needs evaluation mode so batch norm is frozen".into(),
        ));
    }
    let c = model.config();
    let template = Spectrogram::zeros(frames, c.fft, c.hop, c.sample_rate);
    probe_with(&template, t0, trials, seed, |s| model.enhance_spectrogram(s))
}
