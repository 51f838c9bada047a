#![allow(dead_code)]

use mpt_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    uniform(shape, -1.0, 1.0, rng)
}

pub fn random_wave(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

fn phi(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// Explicit-weight linear attention on raw `[T, d]` rows:
/// `out_t = Σ_s w_ts v_s / (Σ_s w_ts + 1e-6)` with `w_ts = φ(q_t)·φ(k_s)`.
pub fn attention_oracle(q: &[f64], k: &[f64], v: &[f64], t: usize, d: usize, causal: bool) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        let last = if causal { i + 1 } else { t };
        let mut den = 0.0;
        for s in 0..last {
            let w: f64 = (0..d).map(|j| phi(q[i * d + j]) * phi(k[s * d + j])).sum();
            den += w;
            for j in 0..d {
                out[i * d + j] += w * v[s * d + j];
            }
        }
        for j in 0..d {
            out[i * d + j] /= den + 1e-6;
        }
    }
    out
}

/// Reference operating points: MACs/s, parameter count and the configuration.
pub struct TableRow {
    pub macs: f64,
    pub params: f64,
    pub config: mpt_core::model::ModelConfig,
}

pub fn table_rows() -> Vec<TableRow> {
    use mpt_core::model::{InputKind, MaskKind, ModelConfig, Variant};
    use mpt_core::tensor::RnnKind;
    let row = |macs: f64, params: f64, causal, variant, rnn, bands, blocks, dim, expansion| {
        let complex = variant != Variant::TwoThree;
        TableRow {
            macs,
            params,
            config: ModelConfig {
                causal,
                variant,
                rnn,
                bands,
                blocks,
                dim,
                expansion,
                input: if complex { InputKind::Complex } else { InputKind::Lps },
                mask: if complex { MaskKind::Complex } else { MaskKind::Real },
                ..ModelConfig::default()
            },
        }
    };
    use RnnKind::{Gru, Lstm};
    use Variant::{OneTwoThree as V123, TwoThree as V23};
    vec![
        row(50e6, 287e3, true, V23, Gru, 28, 2, 16, 1),
        row(102e6, 385e3, true, V23, Gru, 30, 2, 28, 1),
        row(195e6, 492e3, true, V23, Gru, 31, 2, 42, 1),
        row(301e6, 447e3, true, V123, Gru, 31, 2, 24, 2),
        row(502e6, 545e3, true, V123, Gru, 31, 2, 32, 2),
        row(1.0e9, 931e3, true, V123, Gru, 30, 4, 36, 2),
        row(4.1e9, 4.4e6, true, V123, Lstm, 30, 5, 56, 2),
        row(14.0e9, 12.0e6, true, V123, Lstm, 30, 6, 96, 2),
        row(23.2e9, 14.2e6, false, V123, Lstm, 30, 6, 96, 2),
    ]
}

/// Larger over smaller of two positive values.
pub fn fold_ratio(a: f64, b: f64) -> f64 {
    (a / b).max(b / a)
}
