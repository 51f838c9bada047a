use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::synth::{Clip, SAMPLE_RATE};
use crate::eval::{si_snr, si_snr_loss};
use crate::layers::{BnUpdate, Ctx, Mode, ParamStore};
use crate::model::{rms_scale, Model, ModelConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    /// Seeds both the weights and the batch order.
    pub seed: u64,
    /// Validation period in steps; the last step is always validated.
    pub validate_every: usize,
    /// Random crop length per training example; whole clips when `None`.
    pub crop_seconds: Option<f64>,
    /// Final weights go here, the best-validation weights next to it.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            lr: 1e-3,
            grad_clip: 5.0,
            seed: 0,
            validate_every: 100,
            crop_seconds: None,
            checkpoint: None,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.validate_every == 0 {
            return Err(Error::Config("batch_size and validate_every must be positive".into()));
        }
        if !(self.lr > 0.0 && self.grad_clip > 0.0) {
            return Err(Error::Config(format!(
                "lr and grad_clip must be positive, got {} and {}",
                self.lr, self.grad_clip
            )));
        }
        if let Some(c) = self.crop_seconds {
            if !(c > 0.0) {
                return Err(Error::Config(format!("crop_seconds must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Path of the best-validation checkpoint that accompanies `final_path`.
pub fn best_checkpoint_path(final_path: &Path) -> PathBuf {
    let mut name = final_path.file_name().unwrap_or_default().to_os_string();
    name.push(".best");
    final_path.with_file_name(name)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    /// Mean batch loss (negative SI-SNR in dB) per step.
    pub loss: Vec<f64>,
    /// `(step, mean validation SI-SNR)` after the given number of steps.
    pub validation: Vec<(usize, f64)>,
}

pub struct TrainOutcome {
    /// Weights after the last step.
    pub model: Model,
    /// Weights at the best validation score, with its step.
    pub best: Option<(usize, f64, ParamStore)>,
    pub history: History,
}

/// Adam with bias correction over the trainable tensors of a store.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; `grads` is indexed by parameter slot.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.index()] else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let w = store.get_mut(id);
            for (i, x) in w.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *x -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            w.round_to_f32();
        }
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }
    norm
}

fn average_bn(per_clip: Vec<Vec<BnUpdate>>) -> Vec<BnUpdate> {
    let n = per_clip.len() as f64;
    let mut iter = per_clip.into_iter();
    let Some(mut acc) = iter.next() else { return Vec::new() };
    for clip in iter {
        for (a, u) in acc.iter_mut().zip(clip) {
            a.batch_mean.iter_mut().zip(&u.batch_mean).for_each(|(x, y)| *x += y);
            a.batch_var.iter_mut().zip(&u.batch_var).for_each(|(x, y)| *x += y);
        }
    }
    for a in &mut acc {
        a.batch_mean.iter_mut().for_each(|x| *x /= n);
        a.batch_var.iter_mut().for_each(|x| *x /= n);
    }
    acc
}

/// Mean loss, averaged parameter gradients and batch-norm statistics of a
/// batch of `(noisy, clean)` segments.
pub fn batch_gradients(
    model: &Model,
    batch: &[(&[f64], &[f64])],
) -> Result<(f64, Vec<Option<Vec<f64>>>, Vec<BnUpdate>)> {
    let store = &model.store;
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    let mut bn = Vec::with_capacity(batch.len());
    let mut total = 0.0;
    let inv = 1.0 / batch.len() as f64;
    for (noisy, clean) in batch {
        let mut ctx = Ctx::new(store, Mode::Train, true);
        let out = model.waveform_forward(&mut ctx, noisy, rms_scale(noisy))?;
        let loss = si_snr_loss(&mut ctx.tape, out.wave, clean)?;
        total += ctx.tape.value(loss).item();
        ctx.tape.backward(loss)?;
        for (id, g) in ctx.param_grads() {
            let slot = grads[id.index()].get_or_insert_with(|| vec![0.0; g.len()]);
            slot.iter_mut().zip(g).for_each(|(a, b)| *a += inv * b);
        }
        bn.push(ctx.take_bn_updates());
    }
    Ok((total * inv, grads, average_bn(bn)))
}

/// Mean SI-SNR of model outputs and of the noisy inputs over `clips`.
pub fn evaluate(model: &Model, clips: &[Clip]) -> Result<(f64, f64)> {
    if clips.is_empty() {
        return Err(Error::Precondition("evaluation set is empty".into()));
    }
    let (mut est, mut base) = (0.0, 0.0);
    for c in clips {
        let y = model.forward(&c.noisy)?.wave;
        est += si_snr(&y, &c.clean)?;
        base += si_snr(&c.noisy, &c.clean)?;
    }
    let n = clips.len() as f64;
    Ok((est / n, base / n))
}

fn crop<'a>(clip: &'a Clip, len: Option<usize>, rng: &mut ChaCha8Rng) -> (&'a [f64], &'a [f64]) {
    let n = clip.noisy.len();
    match len {
        Some(l) if l < n => {
            let start = rng.gen_range(0..=n - l);
            (&clip.noisy[start..start + l], &clip.clean[start..start + l])
        }
        _ => (&clip.noisy, &clip.clean),
    }
}

/// Trains a freshly initialized model with Adam on negative SI-SNR.
pub fn train(config: &ModelConfig, opts: &TrainOptions, train_set: &[Clip], valid_set: &[Clip]) -> Result<TrainOutcome> {
    opts.validate()?;
    if train_set.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    let mut model = Model::build(config, opts.seed)?;
    let crop_len = opts
        .crop_seconds
        .map(|s| ((s * SAMPLE_RATE as f64).round() as usize).max(config.fft));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(&model.store, opts.lr);
    let mut history = History::default();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut order: Vec<usize> = Vec::new();

    for step in 0..opts.steps {
        let mut picks = Vec::with_capacity(opts.batch_size);
        while picks.len() < opts.batch_size {
            if order.is_empty() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut rng);
            }
            picks.push(order.pop().unwrap());
        }
        let batch: Vec<_> = picks.iter().map(|&i| crop(&train_set[i], crop_len, &mut rng)).collect();
        let (loss, mut grads, bn) = batch_gradients(&model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        history.loss.push(loss);
        clip_global_norm(&mut grads, opts.grad_clip);
        adam.step(&mut model.store, &grads);
        model.store.apply_bn_updates(&bn);

        let done = step + 1;
        if !valid_set.is_empty() && (done % opts.validate_every == 0 || done == opts.steps) {
            let (score, _) = evaluate(&model, valid_set)?;
            history.validation.push((done, score));
            if best.as_ref().map_or(true, |b| score > b.1) {
                best = Some((done, score, model.store.clone()));
                if let Some(path) = &opts.checkpoint {
                    model.save_checkpoint(best_checkpoint_path(path))?;
                }
            }
        }
    }
    if let Some(path) = &opts.checkpoint {
        model.save_checkpoint(path)?;
    }
    Ok(TrainOutcome { model, best, history })
}
