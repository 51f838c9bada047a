use rand_chacha::ChaCha8Rng;

use super::params::{BnUpdate, Ctx, Mode, ParamId, ParamStore};
use crate::tensor::{BatchNormMode, Tensor, Var};
use crate::{Error, Result};

/// Affine map over the last axis: `y = x·W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[input, output], input, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[output], input, rng);
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    pub fn param_count(input: usize, output: usize) -> usize {
        input * output + output
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let last = *ctx.tape.shape(x).last().unwrap();
        if last != self.input {
            return Err(Error::Precondition(format!(
                "linear expects {} input features, got shape {:?}",
                self.input,
                ctx.tape.shape(x)
            )));
        }
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let y = ctx.tape.matmul(x, w)?;
        Ok(ctx.tape.add(y, b)?)
    }

    /// Sets weight and bias to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        Ok(ctx.tape.layer_norm(x, g, b)?)
    }
}

/// Channel-last batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[dim]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[dim], 1.0), false),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        match ctx.mode() {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm(x, g, b, BatchNormMode::Train)?;
                let (batch_mean, batch_var) = stats.expect("training mode reports statistics");
                ctx.record_bn(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    batch_mean,
                    batch_var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store();
                let mode = BatchNormMode::Eval {
                    mean: store.get(self.running_mean).data(),
                    var: store.get(self.running_var).data(),
                };
                Ok(ctx.tape.batch_norm(x, g, b, mode)?.0)
            }
        }
    }
}

/// Causal depthwise-separable convolution over `[T, K, E]` features:
/// 3×3 depthwise (with bias), pointwise `E×E` linear, batch norm.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub pointwise: Linear,
    pub norm: BatchNorm,
    pub channels: usize,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let depthwise =
            store.add_uniform(format!("{name}.depthwise.weight"), &[3, 3, channels], 9, rng);
        let depthwise_bias =
            store.add_uniform(format!("{name}.depthwise.bias"), &[channels], 9, rng);
        Self {
            depthwise,
            depthwise_bias,
            pointwise: Linear::new(store, &format!("{name}.pointwise"), channels, channels, rng),
            norm: BatchNorm::new(store, &format!("{name}.bn"), channels),
            channels,
        }
    }

    /// Trainable parameters: depthwise taps and bias, pointwise linear, BN affine.
    pub fn param_count(channels: usize) -> usize {
        10 * channels + Linear::param_count(channels, channels) + 2 * channels
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.channels {
            return Err(Error::Precondition(format!(
                "conv block expects [T, K, {}], got {:?}",
                self.channels, shape
            )));
        }
        let w = ctx.param(self.depthwise);
        let b = ctx.param(self.depthwise_bias);
        let y = ctx.tape.depthwise_conv(x, w)?;
        let y = ctx.tape.add(y, b)?;
        let y = self.pointwise.forward(ctx, y)?;
        self.norm.forward(ctx, y)
    }
}
