use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{Ctx, Mode, ParamStore};
use crate::tensor::{CheckReport, Tensor, Var};
use crate::{Error, Result};

fn pick(len: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= count {
        (0..len).collect()
    } else {
        let mut idx = sample(rng, len, count).into_vec();
        idx.sort_unstable();
        idx
    }
}

fn evaluate<F>(store: &ParamStore, inputs: &[Tensor], mode: Mode, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Ctx, &[Var]) -> Result<Var>,
{
    let mut ctx = Ctx::new(store, mode, false);
    let vars: Vec<Var> = inputs.iter().map(|t| ctx.input(t.clone())).collect();
    let out = f(&mut ctx, &vars)?;
    Ok(ctx.tape.value(out).item())
}

/// Finite-difference check of a scalar function of stored parameters and
/// explicit inputs.
///
/// Up to `per_tensor` coordinates of every trainable parameter and every
/// input are checked. Report entries index parameters first (in store
/// order), then inputs.
#[allow(clippy::too_many_arguments)]
pub fn grad_check_params<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    mut f: F,
    mode: Mode,
    per_tensor: usize,
    seed: u64,
    h: f64,
    tol: f64,
) -> Result<CheckReport>
where
    F: FnMut(&mut Ctx, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Precondition(format!("step {h} must be positive")));
    }
    let mut ctx = Ctx::new(store, mode, true);
    let vars: Vec<Var> = inputs.iter().map(|t| ctx.tape.leaf(t.clone(), true)).collect();
    let out = f(&mut ctx, &vars)?;
    ctx.tape.backward(out)?;
    let mut param_grads: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    for (id, g) in ctx.param_grads() {
        param_grads[id.index()] = Some(g.to_vec());
    }
    let input_grads: Vec<Option<Vec<f64>>> = vars
        .iter()
        .map(|&v| ctx.tape.grad(v).map(<[f64]>::to_vec))
        .collect();
    drop(ctx);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    let mut work = store.clone();
    for (slot, id) in store.ids().enumerate() {
        if !store.is_trainable(id) {
            continue;
        }
        for index in pick(store.get(id).len(), per_tensor, &mut rng) {
            let analytic = param_grads[slot].as_ref().map_or(0.0, |g| g[index]);
            let orig = store.get(id).data()[index];
            work.get_mut(id).data_mut()[index] = orig + h;
            let plus = evaluate(&work, inputs, mode, &mut f)?;
            work.get_mut(id).data_mut()[index] = orig - h;
            let minus = evaluate(&work, inputs, mode, &mut f)?;
            work.get_mut(id).data_mut()[index] = orig;
            pairs.push((slot, index, analytic, (plus - minus) / (2.0 * h)));
        }
    }
    let mut points = inputs.to_vec();
    for (i, grads) in input_grads.iter().enumerate() {
        for index in pick(inputs[i].len(), per_tensor, &mut rng) {
            let analytic = grads.as_ref().map_or(0.0, |g| g[index]);
            let orig = inputs[i].data()[index];
            points[i].data_mut()[index] = orig + h;
            let plus = evaluate(store, &points, mode, &mut f)?;
            points[i].data_mut()[index] = orig - h;
            let minus = evaluate(store, &points, mode, &mut f)?;
            points[i].data_mut()[index] = orig;
            pairs.push((store.len() + i, index, analytic, (plus - minus) / (2.0 * h)));
        }
    }
    if pairs.iter().any(|p| !p.3.is_finite()) {
        return Err(Error::Numeric("non-finite numeric gradient".into()));
    }
    Ok(CheckReport::from_pairs(pairs, tol))
}
