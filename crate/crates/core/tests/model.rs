mod common;

use common::{randn, random_wave, rng};
use mpt_core::dsp::Spectrogram;
use mpt_core::layers::{Ctx, Mode};
use mpt_core::model::{deep_filter, InputKind, MaskKind, Model, ModelConfig, Variant};
use mpt_core::tensor::RnnKind;
use mpt_core::Tape;
use rand::Rng;

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        bands: 8,
        blocks: 1,
        dim: 8,
        variant,
        df_hidden: 8,
        ..ModelConfig::default()
    }
}

fn random_spec(frames: usize, seed: u64) -> Spectrogram {
    let mut r = rng(seed);
    let mut s = Spectrogram::zeros(frames, 320, 160, 16000);
    for v in s.re.iter_mut().chain(s.im.iter_mut()) {
        *v = r.gen_range(-1.0..1.0);
    }
    s
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn census_matches_store() {
    for variant in [Variant::OneTwo, Variant::TwoThree, Variant::OneTwoThree] {
        let m = Model::build(&small(variant), 1).unwrap();
        let total: usize = m.census().iter().map(|(_, n)| n).sum();
        assert_eq!(total, m.param_count());
        assert_eq!(m.transformers_per_block(), vec![variant.transformer_count()]);
    }
}

#[test]
fn default_model_preserves_length() {
    let m = Model::build(&ModelConfig::default(), 3).unwrap();
    let wave = random_wave(8000 + 77, &mut rng(4));
    let out = m.forward(&wave).unwrap();
    assert_eq!(out.wave.len(), wave.len());
    assert!(out.wave.iter().all(|v| v.is_finite()));
    assert_eq!(out.spec.bins, 161);
}

#[test]
fn short_input_rejected() {
    let m = Model::build(&small(Variant::TwoThree), 0).unwrap();
    assert!(m.forward(&[0.1; 100]).is_err());
}

#[test]
fn build_is_seed_deterministic() {
    let cfg = small(Variant::OneTwoThree);
    let a = Model::build(&cfg, 9).unwrap();
    let b = Model::build(&cfg, 9).unwrap();
    let c = Model::build(&cfg, 10).unwrap();
    let wave = random_wave(3200, &mut rng(1));
    let ya = a.forward(&wave).unwrap().wave;
    assert_eq!(ya, b.forward(&wave).unwrap().wave);
    assert_ne!(ya, c.forward(&wave).unwrap().wave);
}

#[test]
fn causal_variants_ignore_future_frames() {
    for variant in [Variant::OneTwo, Variant::TwoThree, Variant::OneTwoThree] {
        for rnn in [RnnKind::Gru, RnnKind::Lstm] {
            let cfg = ModelConfig { rnn, ..small(variant) };
            let m = Model::build(&cfg, 5).unwrap();
            let a = random_spec(12, 6);
            let mut b = random_spec(12, 7);
            let t0 = 7 * 161;
            b.re[..t0].copy_from_slice(&a.re[..t0]);
            b.im[..t0].copy_from_slice(&a.im[..t0]);
            let ya = m.enhance_spectrogram(&a).unwrap();
            let yb = m.enhance_spectrogram(&b).unwrap();
            assert!(max_diff(&ya.re[..t0], &yb.re[..t0]) < 1e-9, "{variant} {rnn:?}");
            assert!(max_diff(&ya.im[..t0], &yb.im[..t0]) < 1e-9);
            assert!(max_diff(&ya.re[t0..], &yb.re[t0..]) > 1e-6);
        }
    }
}

#[test]
fn noncausal_model_sees_future() {
    let cfg = ModelConfig { causal: false, ..small(Variant::TwoThree) };
    let m = Model::build(&cfg, 5).unwrap();
    let a = random_spec(10, 6);
    let mut b = a.clone();
    for v in &mut b.re[9 * 161..] {
        *v += 1.0;
    }
    let ya = m.enhance_spectrogram(&a).unwrap();
    let yb = m.enhance_spectrogram(&b).unwrap();
    assert!(max_diff(&ya.re[..161], &yb.re[..161]) > 1e-9);
}

#[test]
fn fixed_scale_waveform_is_causal() {
    let m = Model::build(&small(Variant::OneTwoThree), 2).unwrap();
    let a = random_wave(4800, &mut rng(1));
    let mut b = a.clone();
    let s0 = 3000;
    for (i, v) in b[s0..].iter_mut().enumerate() {
        *v = (i as f64 * 0.37).sin();
    }
    let ya = m.forward_scaled(&a, 0.3).unwrap().wave;
    let yb = m.forward_scaled(&b, 0.3).unwrap().wave;
    let safe = (s0 / 160 - 1) * 160;
    assert!(max_diff(&ya[..safe], &yb[..safe]) < 1e-9);
}

#[test]
fn identity_bypass_passes_spectrum_through() {
    for variant in [Variant::OneTwo, Variant::OneTwoThree] {
        let cfg = ModelConfig { input: InputKind::Complex, mask: MaskKind::Complex, ..small(variant) };
        let mut m = Model::build(&cfg, 8).unwrap();
        m.set_identity_bypass().unwrap();
        let wave = random_wave(6400, &mut rng(2));
        let out = m.forward(&wave).unwrap();
        let spec = m.stft_plan().stft(&wave, 16000).unwrap();
        assert!(max_diff(&out.spec.re, &spec.re) < 1e-9);
        assert!(max_diff(&out.spec.im, &spec.im) < 1e-9);
        let interior = 320..wave.len() - 320;
        assert!(max_diff(&out.wave[interior.clone()], &wave[interior]) < 1e-9);
    }
}

#[test]
fn identity_bypass_needs_complex_mask() {
    let mut m = Model::build(&small(Variant::TwoThree), 0).unwrap();
    assert!(m.set_identity_bypass().is_err());
}

#[test]
fn checkpoint_round_trip_reproduces_output() {
    let cfg = small(Variant::OneTwoThree);
    let m = Model::build(&cfg, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ckpt");
    m.save_checkpoint(&path).unwrap();
    let restored = Model::from_checkpoint(&cfg, &path).unwrap();
    let wave = random_wave(3200, &mut rng(3));
    assert_eq!(m.forward(&wave).unwrap().wave, restored.forward(&wave).unwrap().wave);

    let other = ModelConfig { dim: 12, ..cfg };
    assert!(Model::from_checkpoint(&other, &path).is_err());
}

#[test]
fn deep_filter_matches_direct_sum() {
    let (t, f, n) = (6, 4, 3);
    let mut r = rng(12);
    let taps = randn(&[t, f, 2 * n], &mut r);
    let re = randn(&[t, f], &mut r);
    let im = randn(&[t, f], &mut r);
    let mut tape = Tape::new();
    let (vt, vr, vi) = (
        tape.constant(taps.clone()),
        tape.constant(re.clone()),
        tape.constant(im.clone()),
    );
    let (yr, yi) = deep_filter(&mut tape, vt, vr, vi).unwrap();
    for ti in 0..t {
        for fi in 0..f {
            let (mut sr, mut si) = (0.0, 0.0);
            for tau in 0..n.min(ti + 1) {
                let h = &taps.data()[(ti * f + fi) * 2 * n + 2 * tau..];
                let x = (ti - tau) * f + fi;
                let (xr, xi) = (re.data()[x], im.data()[x]);
                sr += h[0] * xr - h[1] * xi;
                si += h[0] * xi + h[1] * xr;
            }
            assert!((tape.value(yr).data()[ti * f + fi] - sr).abs() < 1e-12);
            assert!((tape.value(yi).data()[ti * f + fi] - si).abs() < 1e-12);
        }
    }
}

#[test]
fn training_forward_has_gradients_for_every_parameter() {
    let m = Model::build(&small(Variant::OneTwoThree), 4).unwrap();
    let wave = random_wave(3200, &mut rng(5));
    let mut ctx = Ctx::new(&m.store, Mode::Train, true);
    let out = m.waveform_forward(&mut ctx, &wave, 0.3).unwrap();
    let sq = ctx.tape.square(out.wave).unwrap();
    let loss = ctx.tape.mean(sq).unwrap();
    ctx.tape.backward(loss).unwrap();
    let grads = ctx.param_grads();
    let with_grad = grads.len();
    assert_eq!(with_grad, m.store.ids().filter(|&id| m.store.is_trainable(id)).count());
    assert!(!ctx.bn_updates().is_empty());
}
