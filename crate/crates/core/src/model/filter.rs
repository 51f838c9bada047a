use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Scales real and imaginary parts by a real gain, all `[T, F]`.
pub fn apply_real_mask(tape: &mut Tape, gain: Var, re: Var, im: Var) -> Result<(Var, Var)> {
    Ok((tape.mul(re, gain)?, tape.mul(im, gain)?))
}

/// Complex product `(mr + i·mi)(re + i·im)`, all `[T, F]`.
pub fn apply_complex_mask(tape: &mut Tape, mr: Var, mi: Var, re: Var, im: Var) -> Result<(Var, Var)> {
    complex_mul(tape, mr, mi, re, im)
}

fn complex_mul(tape: &mut Tape, ar: Var, ai: Var, br: Var, bi: Var) -> Result<(Var, Var)> {
    let rr = tape.mul(ar, br)?;
    let ii = tape.mul(ai, bi)?;
    let ri = tape.mul(ar, bi)?;
    let ir = tape.mul(ai, br)?;
    Ok((tape.sub(rr, ii)?, tape.add(ri, ir)?))
}

/// Delays a `[T, F]` sequence by `tau` frames with zero fill.
fn delay(tape: &mut Tape, x: Var, tau: usize) -> Result<Var> {
    if tau == 0 {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    let zeros = tape.constant(Tensor::zeros(&[tau, shape[1]]));
    let head = tape.slice(x, 0, 0, shape[0] - tau)?;
    Ok(tape.concat(&[zeros, head], 0)?)
}

/// Causal per-bin complex FIR along time:
/// `y(t, f) = Σ_τ H(t, f, τ)·x(t − τ, f)` with zero history before `t = 0`.
///
/// `taps` is `[T, F, 2N]` holding (re, im) pairs for `τ = 0..N`; `re`/`im`
/// are `[T, F]`.
pub fn deep_filter(tape: &mut Tape, taps: Var, re: Var, im: Var) -> Result<(Var, Var)> {
    let ts = tape.shape(taps).to_vec();
    let xs = tape.shape(re).to_vec();
    if ts.len() != 3 || ts[2] % 2 != 0 || ts[..2] != xs[..] || tape.shape(im) != xs.as_slice() {
        return Err(Error::Precondition(format!(
            "deep filter expects taps [T, F, 2N] and spectra [T, F], got {ts:?} and {xs:?}"
        )));
    }
    let (frames, bins, n) = (ts[0], ts[1], ts[2] / 2);
    let mut acc: Option<(Var, Var)> = None;
    for tau in 0..n.min(frames) {
        let hr = tape.slice(taps, 2, 2 * tau, 2 * tau + 1)?;
        let hr = tape.reshape(hr, &[frames, bins])?;
        let hi = tape.slice(taps, 2, 2 * tau + 1, 2 * tau + 2)?;
        let hi = tape.reshape(hi, &[frames, bins])?;
        let sr = delay(tape, re, tau)?;
        let si = delay(tape, im, tau)?;
        let (yr, yi) = complex_mul(tape, hr, hi, sr, si)?;
        acc = Some(match acc {
            None => (yr, yi),
            Some((ar, ai)) => (tape.add(ar, yr)?, tape.add(ai, yi)?),
        });
    }
    Ok(acc.expect("at least one tap"))
}
