use rand_chacha::ChaCha8Rng;

use super::basic::{LayerNorm, Linear};
use super::params::{Ctx, ParamStore};
use super::rnn::{Direction, Rnn};
use crate::tensor::{RnnKind, Var};
use crate::{Error, Result};

/// 4 heads when `dim` is divisible by 4, otherwise a single head.
pub fn head_count(dim: usize) -> usize {
    if dim % 4 == 0 {
        4
    } else {
        1
    }
}

/// Kernel feature map `elu(x) + 1`.
pub fn feature_map(ctx: &mut Ctx, x: Var) -> Result<Var> {
    let e = ctx.tape.elu(x)?;
    Ok(ctx.tape.offset(e, 1.0)?)
}

/// Multi-head linear attention on `[N, L, E]` queries, keys and values that
/// already passed through the feature map (for `q`, `k`).
pub fn multi_head_attention(
    ctx: &mut Ctx,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let shape = ctx.tape.shape(q).to_vec();
    let [n, l, e] = [shape[0], shape[1], shape[2]];
    if heads == 1 {
        return Ok(ctx.tape.linear_attention(q, k, v, causal)?);
    }
    let dh = e / heads;
    let mut split = |x: Var| -> Result<Var> {
        let t = &mut ctx.tape;
        let x = t.reshape(x, &[n, l, heads, dh])?;
        let x = t.permute(x, &[0, 2, 1, 3])?;
        Ok(t.reshape(x, &[n * heads, l, dh])?)
    };
    let (q, k, v) = (split(q)?, split(k)?, split(v)?);
    let t = &mut ctx.tape;
    let y = t.linear_attention(q, k, v, causal)?;
    let y = t.reshape(y, &[n, heads, l, dh])?;
    let y = t.permute(y, &[0, 2, 1, 3])?;
    Ok(t.reshape(y, &[n, l, e])?)
}

/// Pre-norm transformer layer with linear attention and an RNN feed-forward:
/// `x₁ = x + Wo·Attn(LN₁ x)`, `out = x₁ + ff_lin(RNN(LN₂ x₁))`.
///
/// `Uni` uses causal attention and a forward RNN; `Bi` uses full attention
/// and a bidirectional RNN.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub dim: usize,
    pub heads: usize,
    pub direction: Direction,
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ff_rnn: Rnn,
    pub ff_lin: Linear,
}

impl TransformerLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        expansion: usize,
        kind: RnnKind,
        direction: Direction,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hidden = expansion * dim;
        Self {
            dim,
            heads: head_count(dim),
            direction,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, rng),
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim, rng),
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, rng),
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff_rnn: Rnn::new(store, &format!("{name}.ff_rnn"), kind, direction, dim, hidden, rng),
            ff_lin: Linear::new(store, &format!("{name}.ff_lin"), hidden, dim, rng),
        }
    }

    pub fn param_count(dim: usize, expansion: usize, kind: RnnKind, direction: Direction) -> usize {
        let hidden = expansion * dim;
        4 * Linear::param_count(dim, dim)
            + 4 * dim
            + Rnn::param_count(kind, direction, dim, hidden)
            + Linear::param_count(hidden, dim)
    }

    /// `[N, L, E]` → `[N, L, E]`, sequences along `L`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::Precondition(format!(
                "transformer expects [N, L, {}], got {:?}",
                self.dim, shape
            )));
        }
        let a = self.ln1.forward(ctx, x)?;
        let q = self.wq.forward(ctx, a)?;
        let q = feature_map(ctx, q)?;
        let k = self.wk.forward(ctx, a)?;
        let k = feature_map(ctx, k)?;
        let v = self.wv.forward(ctx, a)?;
        let causal = self.direction == Direction::Uni;
        let att = multi_head_attention(ctx, q, k, v, self.heads, causal)?;
        let att = self.wo.forward(ctx, att)?;
        let x1 = ctx.tape.add(x, att)?;
        let b = self.ln2.forward(ctx, x1)?;
        let r = self.ff_rnn.forward(ctx, b)?;
        let f = self.ff_lin.forward(ctx, r)?;
        Ok(ctx.tape.add(x1, f)?)
    }

    /// Zeroes both residual-branch output projections, making the layer an identity.
    pub fn zero_residual(&self, store: &mut ParamStore) {
        self.wo.zero(store);
        self.ff_lin.zero(store);
    }
}
