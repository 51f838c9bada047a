use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct CoordinateCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub coords: Vec<CoordinateCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckReport {
    /// Builds a report from `(input, index, analytic, numeric)` tuples.
    ///
    /// Coordinates whose gradient is tiny relative to the largest one are
    /// judged against a floor of 1e-3 of that magnitude.
    pub fn from_pairs(pairs: Vec<(usize, usize, f64, f64)>, tol: f64) -> Self {
        let scale = pairs
            .iter()
            .map(|p| p.2.abs().max(p.3.abs()))
            .fold(0.0, f64::max);
        let floor = (1e-3 * scale).max(1e-10);
        let coords: Vec<CoordinateCheck> = pairs
            .into_iter()
            .map(|(input, index, analytic, numeric)| {
                let denom = analytic.abs().max(numeric.abs()).max(floor);
                CoordinateCheck {
                    input,
                    index,
                    analytic,
                    numeric,
                    rel_err: (analytic - numeric).abs() / denom,
                }
            })
            .collect();
        let max_rel_err = coords.iter().map(|c| c.rel_err).fold(0.0, f64::max);
        Self {
            coords,
            max_rel_err,
            tol,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Compares the tape gradient of a scalar function against central
/// differences at every coordinate of `point`.
pub fn grad_check<F>(mut f: F, point: &Tensor, h: f64, tol: f64) -> Result<CheckReport>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    check_inputs(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(point),
        &[coords],
        h,
        tol,
    )
}

/// Multi-input variant that checks at most `per_input` randomly chosen
/// coordinates of each input.
pub fn grad_check_sampled<F>(
    f: F,
    points: &[Tensor],
    per_input: usize,
    seed: u64,
    h: f64,
    tol: f64,
) -> Result<CheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<Vec<usize>> = points
        .iter()
        .map(|p| {
            if p.len() <= per_input {
                (0..p.len()).collect()
            } else {
                let mut idx = sample(&mut rng, p.len(), per_input).into_vec();
                idx.sort_unstable();
                idx
            }
        })
        .collect();
    check_inputs(f, points, &coords, h, tol)
}

fn evaluate<F>(f: &mut F, points: &[Tensor], requires_grad: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points
        .iter()
        .map(|p| tape.leaf(p.clone(), requires_grad))
        .collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(TensorError::NotScalar(tape.shape(out).to_vec()));
    }
    Ok((tape, vars, out))
}

fn check_inputs<F>(
    mut f: F,
    points: &[Tensor],
    coords: &[Vec<usize>],
    h: f64,
    tol: f64,
) -> Result<CheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            msg: format!("step {h} must be positive"),
        });
    }
    let (mut tape, vars, out) = evaluate(&mut f, points, true)?;
    tape.backward(out)?;
    let mut pairs = Vec::new();
    let mut work = points.to_vec();
    for (input, idx) in coords.iter().enumerate() {
        let grad = tape.grad(vars[input]).map(<[f64]>::to_vec);
        for &index in idx {
            let analytic = grad.as_ref().map_or(0.0, |g| g[index]);
            let orig = work[input].data()[index];
            work[input].data_mut()[index] = orig + h;
            let (t, _, o) = evaluate(&mut f, &work, false)?;
            let plus = t.value(o).item();
            work[input].data_mut()[index] = orig - h;
            let (t, _, o) = evaluate(&mut f, &work, false)?;
            let minus = t.value(o).item();
            work[input].data_mut()[index] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(TensorError::NonFinite { op: "grad_check" });
            }
            pairs.push((input, index, analytic, numeric));
        }
    }
    Ok(CheckReport::from_pairs(pairs, tol))
}
