mod common;

use common::{random_wave, rng};
use mpt_core::dsp::Spectrogram;
use mpt_core::eval::{
    causality_probe, fit_scaling, probe_with, read_points_csv, si_snr, si_snr_loss, write_points_csv,
};
use mpt_core::layers::{ConvBlock, Ctx, Mode, ParamStore};
use mpt_core::model::{Model, ModelConfig, Variant};
use mpt_core::{Error, Tape, Tensor};
use proptest::prelude::*;

const REFERENCE_MACS: [f64; 7] = [50e6, 102e6, 301e6, 502e6, 1.0e9, 4.1e9, 14.0e9];

fn tiny(variant: Variant, causal: bool) -> ModelConfig {
    ModelConfig {
        bands: 8,
        blocks: 1,
        dim: 8,
        df_hidden: 8,
        variant,
        causal,
        ..ModelConfig::default()
    }
}

#[test]
fn perfect_estimate_hits_the_clamp() {
    let s = random_wave(400, &mut rng(1));
    assert_eq!(si_snr(&s, &s).unwrap(), 100.0);
}

#[test]
fn residual_equal_to_target_is_zero_db() {
    let s = [1.0, -1.0, 1.0, -1.0];
    let est = [2.0, 0.0, 0.0, -2.0];
    assert!(si_snr(&est, &s).unwrap().abs() < 1e-12);
    assert_eq!(si_snr(&[2.0, 0.0], &[1.0, -1.0]).unwrap(), 100.0);
}

#[test]
fn scale_invariance() {
    let mut r = rng(2);
    let s = random_wave(500, &mut r);
    let e = random_wave(500, &mut r);
    let est: Vec<f64> = s.iter().zip(&e).map(|(a, b)| a + 0.3 * b).collect();
    let base = si_snr(&est, &s).unwrap();
    for alpha in [0.1, 3.0, -2.0] {
        let scaled: Vec<f64> = est.iter().map(|v| alpha * v).collect();
        assert!((si_snr(&scaled, &s).unwrap() - base).abs() < 1e-9);
    }
}

#[test]
fn si_snr_errors() {
    assert!(matches!(si_snr(&[1.0, 2.0], &[0.0, 0.0]), Err(Error::Precondition(_))));
    assert!(si_snr(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    assert!(si_snr(&[1.0], &[1.0]).is_err());
}

#[test]
fn loss_is_negative_metric_with_matching_gradient() {
    let mut r = rng(3);
    let s = random_wave(64, &mut r);
    let noise = random_wave(64, &mut r);
    let est: Vec<f64> = s.iter().zip(&noise).map(|(a, b)| a + 0.5 * b).collect();
    let eval = |x: &[f64]| {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::new(vec![64], x.to_vec()).unwrap(), true);
        let l = si_snr_loss(&mut tape, v, &s).unwrap();
        tape.backward(l).unwrap();
        (tape.value(l).item(), tape.grad(v).unwrap().to_vec())
    };
    let (loss, grad) = eval(&est);
    assert!((loss + si_snr(&est, &s).unwrap()).abs() < 1e-6);
    let h = 1e-6;
    for i in [0, 17, 63] {
        let mut p = est.clone();
        p[i] += h;
        let mut m = est.clone();
        m[i] -= h;
        let num = (eval(&p).0 - eval(&m).0) / (2.0 * h);
        assert!((num - grad[i]).abs() < 1e-5 * grad[i].abs().max(1.0), "{num} vs {}", grad[i]);
    }
}

fn line_points(slope: f64, intercept: f64) -> Vec<(f64, f64)> {
    REFERENCE_MACS.iter().map(|&x| (x, slope * x.log2() + intercept)).collect()
}

#[test]
fn recovers_reference_pesq_line() {
    let fit = fit_scaling(&line_points(0.092, 2.077)).unwrap();
    assert!((fit.slope - 0.092).abs() < 1e-9);
    assert!((fit.intercept - 2.077).abs() < 1e-9);
    assert!(fit.residuals.iter().all(|r| r.abs() < 1e-9));
    assert!((fit.r2 - 1.0).abs() < 1e-12);
}

#[test]
fn recovers_reference_si_snr_line() {
    let fit = fit_scaling(&line_points(0.36, 13.87)).unwrap();
    assert!((fit.slope - 0.36).abs() < 1e-9);
    assert!((fit.intercept - 13.87).abs() < 1e-9);
}

#[test]
fn exact_two_point_line() {
    let fit = fit_scaling(&[(1024.0, 1.0), (1048576.0, 2.0)]).unwrap();
    assert!((fit.slope - 0.1).abs() < 1e-12);
    assert!(fit.intercept.abs() < 1e-12);
}

#[test]
fn constant_metric_has_zero_slope() {
    let fit = fit_scaling(&[(1e6, 4.5), (2e6, 4.5), (8e6, 4.5)]).unwrap();
    assert!(fit.slope.abs() < 1e-12);
    assert!((fit.intercept - 4.5).abs() < 1e-12);
}

#[test]
fn degenerate_fits_rejected() {
    assert!(fit_scaling(&[(1e6, 1.0), (1e6, 2.0)]).is_err());
    assert!(fit_scaling(&[(1e6, 1.0)]).is_err());
    assert!(fit_scaling(&[(0.0, 1.0), (1e6, 2.0)]).is_err());
}

#[test]
fn points_csv_round_trip() {
    let pts = line_points(0.36, 13.87);
    assert_eq!(read_points_csv(&write_points_csv(&pts)).unwrap(), pts);
}

proptest! {
    #[test]
    fn fit_is_affine_equivariant(
        ys in prop::collection::vec(-20.0f64..20.0, 4),
        a in -5.0f64..5.0,
    ) {
        let pts: Vec<(f64, f64)> = REFERENCE_MACS[..4].iter().copied().zip(ys).collect();
        let fit = fit_scaling(&pts).unwrap();
        let scaled: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x, a * y)).collect();
        let sf = fit_scaling(&scaled).unwrap();
        prop_assert!((sf.slope - a * fit.slope).abs() < 1e-9);
        prop_assert!((sf.intercept - a * fit.intercept).abs() < 1e-9);
    }

    #[test]
    fn refitting_predictions_reproduces_line(ys in prop::collection::vec(-20.0f64..20.0, 5)) {
        let pts: Vec<(f64, f64)> = REFERENCE_MACS[..5].iter().copied().zip(ys).collect();
        let fit = fit_scaling(&pts).unwrap();
        let again: Vec<(f64, f64)> = pts.iter().map(|&(x, _)| (x, fit.predict(x))).collect();
        let refit = fit_scaling(&again).unwrap();
        prop_assert!((refit.slope - fit.slope).abs() < 1e-9);
        prop_assert!((refit.intercept - fit.intercept).abs() < 1e-9);
    }

    #[test]
    fn offset_does_not_change_si_snr(seed in 0u64..1000, c in -3.0f64..3.0) {
        let mut r = rng(seed);
        let s = random_wave(200, &mut r);
        let est = random_wave(200, &mut r);
        let shifted: Vec<f64> = est.iter().map(|v| v + c).collect();
        prop_assert!((si_snr(&shifted, &s).unwrap() - si_snr(&est, &s).unwrap()).abs() < 1e-9);
    }
}

#[test]
fn causal_models_pass_probe() {
    for variant in [Variant::OneTwo, Variant::TwoThree, Variant::OneTwoThree] {
        let m = Model::build(&tiny(variant, true), 1).unwrap();
        let report = causality_probe(&m, 16, 8, 2, 5).unwrap();
        assert!(report.passed, "{variant}: {}", report.max_deviation);
        assert_eq!(report.deviations.len(), 2);
    }
}

#[test]
fn noncausal_model_fails_probe() {
    let m = Model::build(&tiny(Variant::TwoThree, false), 1).unwrap();
    let report = causality_probe(&m, 16, 8, 2, 5).unwrap();
    assert!(!report.passed);
    assert!(report.max_deviation > 1e-3);
}

#[test]
fn probe_is_deterministic() {
    let m = Model::build(&tiny(Variant::OneTwoThree, false), 2).unwrap();
    assert_eq!(
        causality_probe(&m, 12, 4, 2, 9).unwrap(),
        causality_probe(&m, 12, 4, 2, 9).unwrap()
    );
}

#[test]
fn probe_rejects_training_mode_and_bad_cut() {
    let mut m = Model::build(&tiny(Variant::TwoThree, true), 1).unwrap();
    assert!(causality_probe(&m, 16, 0, 1, 0).is_err());
    assert!(causality_probe(&m, 16, 16, 1, 0).is_err());
    m.set_mode(Mode::Train);
    assert!(matches!(causality_probe(&m, 16, 8, 1, 0), Err(Error::Precondition(_))));
}

#[test]
fn conv_block_alone_passes_probe() {
    let mut store = ParamStore::new();
    let conv = ConvBlock::new(&mut store, "conv", 1, &mut rng(4));
    let template = Spectrogram::zeros(20, 320, 160, 16000);
    let report = probe_with(&template, 9, 3, 1, |s| {
        let mut ctx = Ctx::new(&store, Mode::Eval, false);
        let x = ctx.input(Tensor::new(vec![s.frames, s.bins, 1], s.re.clone())?);
        let y = conv.forward(&mut ctx, x)?;
        Ok(s.with_values(ctx.tape.value(y).data().to_vec(), vec![0.0; s.re.len()]))
    })
    .unwrap();
    assert!(report.passed, "{}", report.max_deviation);
}
