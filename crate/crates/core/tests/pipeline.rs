use std::fs;

use mpt_core::eval::si_snr;
use mpt_core::model::{Model, ModelConfig};
use mpt_core::pipeline::{
    best_checkpoint_path, clip_global_norm, denoise, gen_clip, gen_dataset, run_scaling_experiment,
    split_validation, train, SynthSpec, TrainOptions,
};
use mpt_core::Error;

fn tiny() -> ModelConfig {
    ModelConfig {
        bands: 8,
        blocks: 1,
        dim: 8,
        df_hidden: 8,
        ..ModelConfig::default()
    }
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

#[test]
fn dataset_is_deterministic_and_sized() {
    let spec = SynthSpec::new(7, 100);
    let a = gen_dataset(&spec).unwrap();
    assert_eq!(a.len(), 100);
    assert!(a.iter().all(|c| c.noisy.len() == 32000 && c.clean.len() == 32000));
    assert_eq!(a, gen_dataset(&spec).unwrap());
    assert_eq!(a[42], gen_clip(&spec, 42));
    assert_ne!(a[0].clean, a[1].clean);
    assert_ne!(a[0], gen_clip(&SynthSpec::new(8, 1), 0));
}

#[test]
fn mixing_snr_matches_draw() {
    let spec = SynthSpec::new(3, 20);
    for c in gen_dataset(&spec).unwrap() {
        let noise: Vec<f64> = c.noisy.iter().zip(&c.clean).map(|(n, s)| n - s).collect();
        let measured = 10.0 * (energy(&c.clean) / energy(&noise)).log10();
        assert!((measured - c.snr_db).abs() < 0.1, "{measured} vs {}", c.snr_db);
        assert!((-5.0..=15.0).contains(&c.snr_db));
    }
}

#[test]
fn invalid_specs_rejected() {
    let base = SynthSpec::new(0, 1);
    for bad in [
        SynthSpec { n_clips: 0, ..base.clone() },
        SynthSpec { clip_seconds: 0.01, ..base.clone() },
        SynthSpec { snr_range: (5.0, -5.0), ..base.clone() },
        SynthSpec { f0_range: (300.0, 100.0), ..base.clone() },
    ] {
        assert!(matches!(gen_dataset(&bad), Err(Error::Config(_))));
    }
}

#[test]
fn validation_split_takes_last_tenth() {
    let clips = gen_dataset(&SynthSpec { clip_seconds: 0.1, ..SynthSpec::new(0, 30) }).unwrap();
    let (tr, va) = split_validation(&clips);
    assert_eq!((tr.len(), va.len()), (27, 3));
    assert_eq!(va[0], clips[27]);
}

#[test]
fn global_norm_clip() {
    let mut g = vec![Some(vec![3.0, 0.0]), None, Some(vec![4.0])];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    let g0 = g[0].as_ref().unwrap();
    assert!((g0[0] - 0.6).abs() < 1e-15 && g0[1] == 0.0);
    assert!((g[2].as_ref().unwrap()[0] - 0.8).abs() < 1e-15);
}

#[test]
fn overfits_a_fixed_batch() {
    let data = gen_dataset(&SynthSpec { clip_seconds: 1.0, ..SynthSpec::new(11, 4) }).unwrap();
    let opts = TrainOptions { steps: 200, seed: 1, ..TrainOptions::default() };
    let out = train(&tiny(), &opts, &data, &[]).unwrap();
    let loss = &out.history.loss;
    assert_eq!(loss.len(), 200);
    assert!(loss.iter().all(|l| l.is_finite()));
    assert!(loss[199] < loss[0] - 3.0, "{} -> {}", loss[0], loss[199]);
}

#[test]
fn zero_steps_keep_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("init.ckpt");
    let data = gen_dataset(&SynthSpec { clip_seconds: 0.5, ..SynthSpec::new(0, 2) }).unwrap();
    let opts = TrainOptions { steps: 0, seed: 5, checkpoint: Some(path.clone()), ..TrainOptions::default() };
    let out = train(&tiny(), &opts, &data, &[]).unwrap();
    assert!(out.history.loss.is_empty());
    let fresh = dir.path().join("fresh.ckpt");
    Model::build(&tiny(), 5).unwrap().save_checkpoint(&fresh).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&fresh).unwrap());
}

#[test]
fn training_is_deterministic_and_checkpoints_restore() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(&SynthSpec { clip_seconds: 0.5, ..SynthSpec::new(2, 10) }).unwrap();
    let (tr, va) = split_validation(&data);
    let run = |name: &str| {
        let path = dir.path().join(name);
        let opts = TrainOptions {
            steps: 6,
            seed: 3,
            validate_every: 3,
            checkpoint: Some(path.clone()),
            ..TrainOptions::default()
        };
        (train(&tiny(), &opts, tr, va).unwrap(), path)
    };
    let (a, pa) = run("a.ckpt");
    let (b, pb) = run("b.ckpt");
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.validation.len(), 2);
    assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap());
    assert!(best_checkpoint_path(&pa).exists());

    let restored = Model::from_checkpoint(&tiny(), &pa).unwrap();
    let x = &va[0].noisy;
    assert_eq!(denoise(&a.model, x).unwrap(), denoise(&restored, x).unwrap());
}

#[test]
fn denoise_preserves_length_and_silence() {
    let m = Model::build(&tiny(), 0).unwrap();
    let clip = gen_clip(&SynthSpec { clip_seconds: 1.7, ..SynthSpec::new(0, 1) }, 0);
    assert_eq!(denoise(&m, &clip.noisy).unwrap().len(), 27200);
    let silent = denoise(&m, &vec![0.0; 8000]).unwrap();
    assert!(energy(&silent) < 1e-6);
}

#[test]
fn mismatched_checkpoint_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ckpt");
    Model::build(&tiny(), 0).unwrap().save_checkpoint(&path).unwrap();
    let other = ModelConfig { bands: 10, ..tiny() };
    assert!(Model::from_checkpoint(&other, &path).is_err());
}

#[test]
fn trained_model_beats_noisy_input() {
    let data = gen_dataset(&SynthSpec::new(4, 40)).unwrap();
    let (tr, va) = split_validation(&data);
    let opts = TrainOptions { steps: 150, seed: 0, crop_seconds: Some(1.0), ..TrainOptions::default() };
    let out = train(&tiny(), &opts, tr, va).unwrap();
    let c = &va[0];
    let est = denoise(&out.model, &c.noisy).unwrap();
    assert!(si_snr(&est, &c.clean).unwrap() > si_snr(&c.noisy, &c.clean).unwrap());
}

#[test]
fn scaling_run_preconditions() {
    let spec = SynthSpec { clip_seconds: 0.5, ..SynthSpec::new(0, 4) };
    let opts = TrainOptions { steps: 1, ..TrainOptions::default() };
    assert!(matches!(
        run_scaling_experiment(&[5e6], &spec, &opts, None),
        Err(Error::Precondition(_))
    ));
    assert!(matches!(
        run_scaling_experiment(&[5e6, 1e7, 2e7], &spec, &opts, None),
        Err(Error::Precondition(_))
    ));
    assert!(run_scaling_experiment(&[1e3, 1e7, 8e7], &spec, &opts, None).is_err());
}

#[test]
fn scaling_run_is_reproducible() {
    let spec = SynthSpec { clip_seconds: 0.5, ..SynthSpec::new(1, 4) };
    let opts = TrainOptions { steps: 2, ..TrainOptions::default() };
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let budgets = [5e6, 1e7, 4e7];
    let ra = run_scaling_experiment(&budgets, &spec, &opts, Some(&a)).unwrap();
    run_scaling_experiment(&budgets, &spec, &opts, Some(&b)).unwrap();
    assert_eq!(ra.points.len(), 3);
    for f in ["points.csv", "fit.csv", "budget0.cfg", "budget2.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let cfg = fs::read_to_string(a.join("budget1.cfg")).unwrap();
    assert_eq!(ModelConfig::parse(&cfg).unwrap(), ra.points[1].config);
}
