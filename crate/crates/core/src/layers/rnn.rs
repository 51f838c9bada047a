use rand_chacha::ChaCha8Rng;

use super::basic::Linear;
use super::params::{Ctx, ParamId, ParamStore};
use crate::tensor::{RnnKind, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Uni,
    Bi,
}

/// Weights of one recurrent pass.
///
/// The input projection carries the only bias set; recurrent weights are
/// stored `[h, gates·h]` with gate blocks ordered (r, z, n) for GRU and
/// (i, f, g, o) for LSTM.
#[derive(Clone, Debug)]
pub struct RnnPass {
    pub input_proj: Linear,
    pub recurrent: ParamId,
}

/// Hidden (and for LSTM, cell) state of a batch of sequences, each `[N, h]`.
#[derive(Clone, Copy, Debug)]
pub struct RnnState {
    pub h: Var,
    pub c: Option<Var>,
}

impl RnnPass {
    fn new(
        store: &mut ParamStore,
        name: &str,
        kind: RnnKind,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let g = kind.gates() * hidden;
        Self {
            input_proj: Linear::new(store, &format!("{name}.w_ih"), input, g, rng),
            recurrent: store.add_uniform(format!("{name}.w_hh"), &[hidden, g], hidden, rng),
        }
    }

    fn run(&self, ctx: &mut Ctx, kind: RnnKind, x: Var, reverse: bool) -> Result<Var> {
        let xp = self.input_proj.forward(ctx, x)?;
        let w = ctx.param(self.recurrent);
        Ok(ctx.tape.rnn(kind, xp, w, reverse)?)
    }

    /// Single time step composed from elementwise primitives.
    ///
    /// GRU: `h' = (1 − z)·n + z·h` with `n = tanh(W_in x + b_n + r ⊙ (W_hn h))`.
    /// LSTM: `c' = f ⊙ c + i ⊙ g`, `h' = o ⊙ tanh(c')`.
    pub fn step(&self, ctx: &mut Ctx, kind: RnnKind, x_t: Var, state: RnnState) -> Result<RnnState> {
        let hidden = ctx.store().get(self.recurrent).shape()[0];
        let gi = self.input_proj.forward(ctx, x_t)?;
        let w = ctx.param(self.recurrent);
        let gh = ctx.tape.matmul(state.h, w)?;
        let t = &mut ctx.tape;
        let block = |t: &mut crate::Tape, v: Var, k: usize| t.slice(v, 1, k * hidden, (k + 1) * hidden);
        match kind {
            RnnKind::Gru => {
                let (xr, xz, xn) = (block(t, gi, 0)?, block(t, gi, 1)?, block(t, gi, 2)?);
                let (hr, hz, hn) = (block(t, gh, 0)?, block(t, gh, 1)?, block(t, gh, 2)?);
                let r = t.add(xr, hr)?;
                let r = t.sigmoid(r)?;
                let z = t.add(xz, hz)?;
                let z = t.sigmoid(z)?;
                let rh = t.mul(r, hn)?;
                let n = t.add(xn, rh)?;
                let n = t.tanh(n)?;
                let diff = t.sub(state.h, n)?;
                let zd = t.mul(z, diff)?;
                let h = t.add(n, zd)?;
                Ok(RnnState { h, c: None })
            }
            RnnKind::Lstm => {
                let c = state.c.ok_or_else(|| {
                    Error::Precondition("LSTM step requires a cell state".into())
                })?;
                let mut gates = Vec::with_capacity(4);
                for k in 0..4 {
                    let a = block(t, gi, k)?;
                    let b = block(t, gh, k)?;
                    let s = t.add(a, b)?;
                    gates.push(if k == 2 { t.tanh(s)? } else { t.sigmoid(s)? });
                }
                let fc = t.mul(gates[1], c)?;
                let ig = t.mul(gates[0], gates[2])?;
                let c = t.add(fc, ig)?;
                let tc = t.tanh(c)?;
                let h = t.mul(gates[3], tc)?;
                Ok(RnnState { h, c: Some(c) })
            }
        }
    }
}

/// GRU or LSTM over `[N, L, input]` sequences producing `[N, L, hidden]`.
///
/// The bidirectional form runs a second pass in reverse, concatenates both
/// outputs and merges them back to `hidden` with a linear layer.
#[derive(Clone, Debug)]
pub struct Rnn {
    pub kind: RnnKind,
    pub direction: Direction,
    pub input: usize,
    pub hidden: usize,
    pub forward_pass: RnnPass,
    pub backward_pass: Option<RnnPass>,
    pub merge: Option<Linear>,
}

impl Rnn {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: RnnKind,
        direction: Direction,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let forward_pass = RnnPass::new(store, &format!("{name}.fwd"), kind, input, hidden, rng);
        let (backward_pass, merge) = match direction {
            Direction::Uni => (None, None),
            Direction::Bi => (
                Some(RnnPass::new(store, &format!("{name}.bwd"), kind, input, hidden, rng)),
                Some(Linear::new(store, &format!("{name}.merge"), 2 * hidden, hidden, rng)),
            ),
        };
        Self {
            kind,
            direction,
            input,
            hidden,
            forward_pass,
            backward_pass,
            merge,
        }
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(kind: RnnKind, direction: Direction, input: usize, hidden: usize) -> usize {
        let g = kind.gates() * hidden;
        let pass = g * (input + hidden) + g;
        match direction {
            Direction::Uni => pass,
            Direction::Bi => 2 * pass + Linear::param_count(2 * hidden, hidden),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.input {
            return Err(Error::Precondition(format!(
                "rnn expects [N, L, {}], got {:?}",
                self.input, shape
            )));
        }
        let fwd = self.forward_pass.run(ctx, self.kind, x, false)?;
        match (&self.backward_pass, &self.merge) {
            (Some(bp), Some(merge)) => {
                let bwd = bp.run(ctx, self.kind, x, true)?;
                let both = ctx.tape.concat(&[fwd, bwd], 2)?;
                merge.forward(ctx, both)
            }
            _ => Ok(fwd),
        }
    }

    pub fn zero_state(&self, ctx: &mut Ctx, batch: usize) -> RnnState {
        let zeros = crate::Tensor::zeros(&[batch, self.hidden]);
        let h = ctx.input(zeros.clone());
        let c = match self.kind {
            RnnKind::Gru => None,
            RnnKind::Lstm => Some(ctx.input(zeros)),
        };
        RnnState { h, c }
    }

    /// One step of the forward-direction pass on `[N, input]`.
    pub fn step(&self, ctx: &mut Ctx, x_t: Var, state: RnnState) -> Result<RnnState> {
        self.forward_pass.step(ctx, self.kind, x_t, state)
    }
}
