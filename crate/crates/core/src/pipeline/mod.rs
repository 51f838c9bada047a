//! Synthetic data, training, inference and the scaling experiment.

mod scaling;
mod synth;
mod train;

use std::path::Path;

use crate::dsp::{wav_read, wav_write};
use crate::model::{Model, ModelConfig};
use crate::{Error, Result};

pub use scaling::{run_scaling_experiment, ScalingOutcome, ScalingPoint, MIN_BUDGET_SPAN};
pub use synth::{gen_clip, gen_dataset, split_validation, Clip, SynthSpec, CLEAN_RMS, SAMPLE_RATE};
pub use train::{
    batch_gradients, best_checkpoint_path, clip_global_norm, evaluate, train, Adam, History, TrainOptions,
    TrainOutcome,
};

/// Enhances a waveform; the output has the input's length.
pub fn denoise(model: &Model, wave: &[f64]) -> Result<Vec<f64>> {
    Ok(model.forward(wave)?.wave)
}

/// Reads a WAV file, enhances it with the checkpointed model and writes the result.
pub fn denoise_file(config: &ModelConfig, checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    let model = Model::from_checkpoint(config, checkpoint)?;
    let (wave, rate) = wav_read(input)?;
    if rate != config.sample_rate {
        return Err(Error::Precondition(format!(
            "input is sampled at {rate} Hz, model expects {}",
            config.sample_rate
        )));
    }
    let est = denoise(&model, &wave)?;
    wav_write(output, &est, rate)
}
