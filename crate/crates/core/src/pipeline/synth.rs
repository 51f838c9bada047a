use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

pub const SAMPLE_RATE: u32 = 16000;

/// RMS level of every generated clean signal.
pub const CLEAN_RMS: f64 = 0.1;

const FRAME: usize = 160;
const NOISE_WARMUP: usize = 2048;

/// Recipe for a synthetic noisy/clean corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_clips: usize,
    pub clip_seconds: f64,
    /// Mixing SNR range in dB, drawn uniformly.
    pub snr_range: (f64, f64),
    /// Fundamental frequency range in Hz.
    pub f0_range: (f64, f64),
}

impl SynthSpec {
    pub fn new(seed: u64, n_clips: usize) -> Self {
        Self {
            seed,
            n_clips,
            clip_seconds: 2.0,
            snr_range: (-5.0, 15.0),
            f0_range: (100.0, 300.0),
        }
    }

    pub fn samples(&self) -> usize {
        (self.clip_seconds * SAMPLE_RATE as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_clips == 0 {
            return fail("n_clips: must be positive".into());
        }
        if !(self.clip_seconds.is_finite() && self.samples() >= 320) {
            return fail(format!("clip_seconds: need at least 320 samples, got {}", self.clip_seconds));
        }
        let (lo, hi) = self.snr_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return fail(format!("snr_range: empty range {lo}..{hi}"));
        }
        let (lo, hi) = self.f0_range;
        if !(lo > 0.0 && lo <= hi && hi < SAMPLE_RATE as f64 / 2.0) {
            return fail(format!("f0_range: invalid range {lo}..{hi}"));
        }
        Ok(())
    }
}

/// One training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub noisy: Vec<f64>,
    pub clean: Vec<f64>,
    /// Drawn mixing SNR in dB.
    pub snr_db: f64,
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn harmonic_stack(n: usize, f0_range: (f64, f64), rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let harmonics = rng.gen_range(8..=12);
    let mut phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let (lo, hi) = (f0_range.0.ln(), f0_range.1.ln());
    let mut log_f0 = rng.gen_range(lo..=hi);
    let env_rate = rng.gen_range(0.5..3.0);
    let env_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut out = vec![0.0; n];
    for (i, v) in out.iter_mut().enumerate() {
        if i % FRAME == 0 && i > 0 {
            let step: f64 = rng.sample(StandardNormal);
            log_f0 = (log_f0 + 0.02 * step).clamp(lo, hi);
        }
        let f0 = log_f0.exp();
        let t = i as f64 / sr;
        let env = 0.55 + 0.45 * (std::f64::consts::TAU * env_rate * t + env_phase).sin();
        let mut s = 0.0;
        for (k, phase) in phases.iter_mut().enumerate() {
            let f = f0 * (k + 1) as f64;
            *phase = (*phase + std::f64::consts::TAU * f / sr) % std::f64::consts::TAU;
            if f < 0.49 * sr {
                s += phase.sin() / (k + 1) as f64;
            }
        }
        *v = env * s;
    }
    let rms = (energy(&out) / n as f64).sqrt();
    out.iter_mut().for_each(|v| *v *= CLEAN_RMS / rms);
    out
}

/// White Gaussian noise through a 1/f shaping filter.
fn pink_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    let mut out = Vec::with_capacity(n);
    for i in 0..n + NOISE_WARMUP {
        let w: f64 = rng.sample(StandardNormal);
        b[0] = 0.99886 * b[0] + w * 0.0555179;
        b[1] = 0.99332 * b[1] + w * 0.0750759;
        b[2] = 0.96900 * b[2] + w * 0.1538520;
        b[3] = 0.86650 * b[3] + w * 0.3104856;
        b[4] = 0.55000 * b[4] + w * 0.5329522;
        b[5] = -0.7616 * b[5] - w * 0.0168980;
        let pink = b.iter().sum::<f64>() + w * 0.5362;
        b[6] = w * 0.115926;
        if i >= NOISE_WARMUP {
            out.push(pink);
        }
    }
    out
}

/// Clip `index` of the corpus; independent of every other index.
pub fn gen_clip(spec: &SynthSpec, index: usize) -> Clip {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let n = spec.samples();
    let (lo, hi) = spec.snr_range;
    let snr_db = if lo < hi { rng.gen_range(lo..hi) } else { lo };
    let clean = harmonic_stack(n, spec.f0_range, &mut rng);
    let noise = pink_noise(n, &mut rng);
    let gain = (energy(&clean) / (energy(&noise) * 10f64.powf(snr_db / 10.0))).sqrt();
    let noisy = clean.iter().zip(&noise).map(|(c, e)| c + gain * e).collect();
    Clip { noisy, clean, snr_db }
}

pub fn gen_dataset(spec: &SynthSpec) -> Result<Vec<Clip>> {
    spec.validate()?;
    Ok((0..spec.n_clips).map(|i| gen_clip(spec, i)).collect())
}

/// Splits off the last 10% of clips (at least one when there are two or
/// more) as the validation set.
pub fn split_validation(clips: &[Clip]) -> (&[Clip], &[Clip]) {
    let n = clips.len();
    let valid = if n < 2 { 0 } else { (n / 10).max(1) };
    clips.split_at(n - valid)
}
