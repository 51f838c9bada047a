use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::tensor::{CustomBackward, Tape, Tensor, Var};
use crate::{Error, Result};

/// Floor on the overlap-add window energy; only the outer edge samples,
/// covered by a single tapered frame, fall below it.
pub const WINDOW_ENERGY_FLOOR: f64 = 0.1;

/// Complex STFT frames, row-major `frames × bins`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop: usize,
}

impl Spectrogram {
    pub fn zeros(frames: usize, fft_size: usize, hop: usize, sample_rate: u32) -> Self {
        let bins = fft_size / 2 + 1;
        Self {
            frames,
            bins,
            re: vec![0.0; frames * bins],
            im: vec![0.0; frames * bins],
            sample_rate,
            fft_size,
            hop,
        }
    }

    pub fn magnitude(&self, t: usize, f: usize) -> f64 {
        let i = t * self.bins + f;
        self.re[i].hypot(self.im[i])
    }

    pub fn phase(&self, t: usize, f: usize) -> f64 {
        let i = t * self.bins + f;
        self.im[i].atan2(self.re[i])
    }

    /// Copy with the same framing metadata but new values.
    pub fn with_values(&self, re: Vec<f64>, im: Vec<f64>) -> Self {
        Self {
            re,
            im,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins != self.fft_size / 2 + 1 || self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::Precondition(format!(
                "inconsistent spectrogram framing: bins {}, fft {}, hop {}",
                self.bins, self.fft_size, self.hop
            )));
        }
        let n = self.frames * self.bins;
        if self.re.len() != n || self.im.len() != n {
            return Err(Error::Precondition("spectrogram value count mismatch".into()));
        }
        Ok(())
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reusable analysis/synthesis state for one (fft size, hop) pair.
#[derive(Clone)]
pub struct StftPlan {
    fft_size: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl StftPlan {
    pub fn new(fft_size: usize, hop: usize) -> Result<Self> {
        if fft_size < 2 || fft_size % 2 != 0 {
            return Err(Error::Precondition(format!("fft size {fft_size} must be even")));
        }
        if hop == 0 || hop > fft_size {
            return Err(Error::Precondition(format!(
                "hop {hop} must be in 1..={fft_size}"
            )));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            fft_size,
            hop,
            window: hann(fft_size),
            forward: planner.plan_fft_forward(fft_size),
            inverse: planner.plan_fft_inverse(fft_size),
        })
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frame_count(&self, samples: usize) -> usize {
        if samples < self.fft_size {
            0
        } else {
            (samples - self.fft_size) / self.hop + 1
        }
    }

    pub fn output_len(&self, frames: usize) -> usize {
        (frames - 1) * self.hop + self.fft_size
    }

    pub fn stft(&self, wave: &[f64], sample_rate: u32) -> Result<Spectrogram> {
        if wave.len() < self.fft_size {
            return Err(Error::Precondition(format!(
                "signal of {} samples is shorter than one {}-sample window",
                wave.len(),
                self.fft_size
            )));
        }
        let frames = self.frame_count(wave.len());
        let bins = self.bins();
        let mut spec = Spectrogram::zeros(frames, self.fft_size, self.hop, sample_rate);
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        for t in 0..frames {
            let seg = &wave[t * self.hop..t * self.hop + self.fft_size];
            for (b, (x, w)) in buf.iter_mut().zip(seg.iter().zip(&self.window)) {
                *b = Complex::new(x * w, 0.0);
            }
            self.forward.process(&mut buf);
            for f in 0..bins {
                spec.re[t * bins + f] = buf[f].re;
                spec.im[t * bins + f] = buf[f].im;
            }
        }
        Ok(spec)
    }

    /// Sum of squared synthesis windows at every output sample.
    fn window_energy(&self, frames: usize) -> Vec<f64> {
        let mut energy = vec![0.0; self.output_len(frames)];
        for t in 0..frames {
            for (m, w) in self.window.iter().enumerate() {
                energy[t * self.hop + m] += w * w;
            }
        }
        energy
    }

    /// Real inverse FFT of one Hermitian half-spectrum.
    fn irfft(&self, re: &[f64], im: &[f64], buf: &mut [Complex<f64>]) {
        let n = self.fft_size;
        let bins = self.bins();
        for f in 0..bins {
            buf[f] = Complex::new(re[f], im[f]);
        }
        for f in bins..n {
            buf[f] = Complex::new(re[n - f], -im[n - f]);
        }
        self.inverse.process(buf);
        let scale = 1.0 / n as f64;
        for b in buf.iter_mut() {
            b.re *= scale;
        }
    }

    fn overlap_add(&self, frames: usize, re: &[f64], im: &[f64]) -> Vec<f64> {
        let bins = self.bins();
        let mut out = vec![0.0; self.output_len(frames)];
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        for t in 0..frames {
            self.irfft(
                &re[t * bins..(t + 1) * bins],
                &im[t * bins..(t + 1) * bins],
                &mut buf,
            );
            for (m, w) in self.window.iter().enumerate() {
                out[t * self.hop + m] += w * buf[m].re;
            }
        }
        let energy = self.window_energy(frames);
        for (o, e) in out.iter_mut().zip(&energy) {
            *o /= e.max(WINDOW_ENERGY_FLOOR);
        }
        out
    }

    /// Least-squares overlap-add inverse; output length `(T − 1)·hop + fft`.
    pub fn istft(&self, spec: &Spectrogram) -> Result<Vec<f64>> {
        spec.validate()?;
        if spec.fft_size != self.fft_size || spec.hop != self.hop {
            return Err(Error::Precondition("spectrogram framing differs from plan".into()));
        }
        if spec.frames == 0 {
            return Err(Error::Precondition("spectrogram has no frames".into()));
        }
        Ok(self.overlap_add(spec.frames, &spec.re, &spec.im))
    }

    /// Differentiable inverse STFT of `[T, F]` real and imaginary parts.
    pub fn istft_on_tape(&self, tape: &mut Tape, re: Var, im: Var) -> Result<Var> {
        let shape = tape.shape(re).to_vec();
        if shape.len() != 2 || shape[1] != self.bins() || tape.shape(im) != shape.as_slice() {
            return Err(Error::Precondition(format!(
                "istft expects [T, {}] inputs, got {:?} and {:?}",
                self.bins(),
                shape,
                tape.shape(im)
            )));
        }
        let frames = shape[0];
        let out = self.overlap_add(frames, tape.value(re).data(), tape.value(im).data());
        let len = out.len();
        let value = Tensor::new(vec![len], out)?;
        Ok(tape.custom(
            &[re, im],
            value,
            Box::new(IstftBackward {
                plan: self.clone(),
                frames,
            }),
        )?)
    }
}

struct IstftBackward {
    plan: StftPlan,
    frames: usize,
}

impl CustomBackward for IstftBackward {
    fn name(&self) -> &'static str {
        "istft"
    }

    fn backward(&self, grad: &[f64], _inputs: &[&Tensor]) -> Vec<Vec<f64>> {
        let plan = &self.plan;
        let n = plan.fft_size;
        let bins = plan.bins();
        let energy = plan.window_energy(self.frames);
        let scaled: Vec<f64> = grad
            .iter()
            .zip(&energy)
            .map(|(g, e)| g / e.max(WINDOW_ENERGY_FLOOR))
            .collect();
        let mut d_re = vec![0.0; self.frames * bins];
        let mut d_im = vec![0.0; self.frames * bins];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for t in 0..self.frames {
            for (m, w) in plan.window.iter().enumerate() {
                buf[m] = Complex::new(scaled[t * plan.hop + m] * w, 0.0);
            }
            plan.forward.process(&mut buf);
            for f in 0..bins {
                let weight = if f == 0 || f == n / 2 { 1.0 } else { 2.0 } / n as f64;
                d_re[t * bins + f] = weight * buf[f].re;
                d_im[t * bins + f] = weight * buf[f].im;
            }
        }
        vec![d_re, d_im]
    }
}

pub fn stft(wave: &[f64], fft_size: usize, hop: usize, sample_rate: u32) -> Result<Spectrogram> {
    StftPlan::new(fft_size, hop)?.stft(wave, sample_rate)
}

pub fn istft(spec: &Spectrogram) -> Result<Vec<f64>> {
    StftPlan::new(spec.fft_size, spec.hop)?.istft(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_without_padding() {
        let plan = StftPlan::new(320, 160).unwrap();
        assert_eq!(plan.stft(&vec![0.0; 1600], 16000).unwrap().frames, 9);
        let zeros = plan.stft(&vec![0.0; 480], 16000).unwrap();
        assert_eq!(zeros.frames, 2);
        assert!(zeros.re.iter().chain(&zeros.im).all(|v| *v == 0.0));
    }

    #[test]
    fn short_signal_is_rejected() {
        assert!(stft(&[0.0; 100], 320, 160, 16000).is_err());
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        let wave: Vec<f64> = (0..3200)
            .map(|n| (2.0 * PI * 1000.0 * n as f64 / 16000.0).sin())
            .collect();
        let spec = stft(&wave, 320, 160, 16000).unwrap();
        for t in 0..spec.frames {
            let argmax = (0..spec.bins)
                .max_by(|&a, &b| spec.magnitude(t, a).total_cmp(&spec.magnitude(t, b)))
                .unwrap();
            assert_eq!(argmax, 20);
        }
    }

    #[test]
    fn zero_spectrogram_gives_silence() {
        let spec = Spectrogram::zeros(5, 320, 160, 16000);
        let wave = istft(&spec).unwrap();
        assert_eq!(wave.len(), 4 * 160 + 320);
        assert!(wave.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn squared_hann_quarter_hop_is_constant_in_interior() {
        let plan = StftPlan::new(320, 80).unwrap();
        let energy = plan.window_energy(10);
        let interior = &energy[320..energy.len() - 320];
        let first = interior[0];
        assert!(interior.iter().all(|e| (e - first).abs() < 1e-12));
        assert!((first - 1.5).abs() < 1e-12);
    }
}
