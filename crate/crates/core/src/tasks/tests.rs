use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diff::gradient_check;
use crate::programs::{evaluate_program, AttributeProgram};
use crate::trajectory::{FrameState, Keypoint};
use crate::tvae::standard_normal;

fn mouse_window(rng: &mut ChaCha8Rng, len: usize) -> Window {
    let mut centers = [(rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)); 2];
    centers[1].0 += 0.1;
    let mut heading = [
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    ];
    let frames = (0..len)
        .map(|_| {
            let agents: Vec<Vec<Keypoint>> = (0..2)
                .map(|a| {
                    centers[a].0 += rng.random_range(-0.01..0.01);
                    centers[a].1 += rng.random_range(-0.01..0.01);
                    heading[a] += rng.random_range(-0.1..0.1);
                    let (s, c) = f64::sin_cos(heading[a]);
                    (0..7)
                        .map(|k| {
                            let along = 0.05 - 0.015 * k as f64;
                            let side = if k % 2 == 1 { 0.01 } else { -0.01 }
                                * (k > 0 && k < 6) as i32 as f64;
                            let (ox, oy) = (along + rng.random_range(-0.002..0.002), side);
                            Keypoint::new(
                                centers[a].0 + c * ox - s * oy,
                                centers[a].1 + s * ox + c * oy,
                            )
                        })
                        .collect()
                })
                .collect();
            FrameState::from_agents(&agents).unwrap()
        })
        .collect();
    Window {
        frames,
        center_index: len / 2,
    }
}

fn toy_cfg() -> TvaeConfig {
    TvaeConfig {
        state_dim: 28,
        window_len: 4,
        latent_dim: 4,
        hidden: 8,
    }
}

fn layout() -> Layout {
    Layout::new(2, 7)
}

fn fitted_programs(rng: &mut ChaCha8Rng) -> ProgramSet {
    let mut ps = ProgramSet::from_spec("all_mouse").unwrap();
    let rows: Vec<Vec<f64>> = (0..200)
        .map(|_| ps.evaluate_values(&mouse_window(rng, 4)).unwrap())
        .collect();
    ps.fit(&rows).unwrap();
    ps
}

#[test]
fn consistency_is_zero_for_identical_trajectory() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ps = fitted_programs(&mut rng);
    let m = EmbeddingModel::<f64>::new(
        layout(),
        toy_cfg(),
        LossConfig::with_terms("tvae,consistency").unwrap(),
        Some(ps),
        0,
    )
    .unwrap();
    let ws: Vec<Window> = (0..3).map(|_| mouse_window(&mut rng, 4)).collect();
    let refs: Vec<&Window> = ws.iter().collect();
    let batch = LossBatch::<f64>::new(&refs, None, m.programs.as_ref(), false).unwrap();
    let mut tape = Tape::new();
    let frames = batch.frames.input_nodes(&mut tape);
    let err = m
        .consistency_errors(&mut tape, &frames, 2, &batch.attrs)
        .unwrap();
    assert!(tape.value(err).iter().all(|v| v.abs() < 1e-20));
}

#[test]
fn frozen_decoder_consistency_matches_attribute_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ps = fitted_programs(&mut rng);
    let mut cfg = LossConfig::with_terms("consistency").unwrap();
    cfg.augmentation = false;
    let mut m = EmbeddingModel::<f64>::new(layout(), toy_cfg(), cfg, Some(ps.clone()), 0).unwrap();
    let out = m.tvae.decoder_output();
    m.store.get_mut(out.weight).fill(0.0);
    let w = mouse_window(&mut rng, 4);
    let still = Window {
        frames: vec![w.frames[0].clone(); 4],
        center_index: 2,
    };
    let a = ps.evaluate_values(&w).unwrap();
    let b = ps.evaluate_values(&still).unwrap();
    let expected = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    let batch = LossBatch::<f64>::new(&[&w], None, Some(&ps), false).unwrap();
    let mut tape = Tape::new();
    let nodes = m
        .loss_nodes(&mut tape, &batch, Array2::zeros((1, 4)))
        .unwrap();
    assert!((tape.scalar(nodes.total) - expected).abs() < 1e-12);
}

#[test]
fn decoding_zero_output_unit_targets_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ps = fitted_programs(&mut rng);
    let mut m = EmbeddingModel::<f64>::new(
        layout(),
        toy_cfg(),
        LossConfig::with_terms("decoding").unwrap(),
        Some(ps),
        0,
    )
    .unwrap();
    let head = m.heads.decode.unwrap();
    m.store.get_mut(head.out.weight).fill(0.0);
    let mut tape = Tape::new();
    let mu = tape.input(Array2::from_elem((3, 4), 0.5));
    let err = m
        .decoding_errors(&mut tape, mu, &Array2::ones((3, 10)))
        .unwrap();
    let loss = tape.mean(err);
    assert_eq!(tape.scalar(loss), 1.0);
}

#[test]
fn tvae_only_objective_equals_elbo() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cfg = LossConfig::with_terms("tvae").unwrap();
    cfg.augmentation = false;
    let m = EmbeddingModel::<f64>::new(layout(), toy_cfg(), cfg, None, 7).unwrap();
    let ws: Vec<Window> = (0..4).map(|_| mouse_window(&mut rng, 4)).collect();
    let refs: Vec<&Window> = ws.iter().collect();
    let batch = LossBatch::<f64>::new(&refs, None, None, false).unwrap();
    let eps = standard_normal::<f64, _>(&mut rng, 4, 4);
    let mut t1 = Tape::new();
    let total = m.loss_nodes(&mut t1, &batch, eps.clone()).unwrap().total;
    let mut t2 = Tape::new();
    let frames = batch.frames.input_nodes(&mut t2);
    let elbo = m
        .tvae
        .elbo_nodes(&mut t2, &m.store, &frames, eps)
        .unwrap()
        .total;
    assert!((t1.scalar(total) - t2.scalar(elbo)).abs() < 1e-12);
}

#[test]
fn augmentation_doubles_decoder_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ps = fitted_programs(&mut rng);
    let count = |aug: bool, rng: &mut ChaCha8Rng| {
        let mut cfg = LossConfig::with_terms("tvae,consistency,decoding").unwrap();
        cfg.augmentation = aug;
        let m = EmbeddingModel::<f64>::new(layout(), toy_cfg(), cfg, Some(ps.clone()), 0).unwrap();
        let ws: Vec<Window> = (0..3).map(|_| mouse_window(rng, 4)).collect();
        let refs: Vec<&Window> = ws.iter().collect();
        let aug_refs = if aug { Some(refs.as_slice()) } else { None };
        let batch = LossBatch::<f64>::new(&refs, aug_refs, Some(&ps), false).unwrap();
        let mut tape = Tape::new();
        let eps = Array2::zeros((batch.rows(), 4));
        m.loss_nodes(&mut tape, &batch, eps).unwrap().terms.len()
    };
    assert_eq!(count(false, &mut rng), 3);
    assert_eq!(count(true, &mut rng), 6);
}

#[test]
fn ablation_rows_are_expressible() {
    let rows = [
        ("tvae", "TVAE"),
        ("tvae,unsup_contrastive", "TVAE+Unsup. Contrast"),
        ("tvae,consistency", "TVAE+Consist"),
        ("tvae,contrastive", "TVAE+Contrast"),
        ("tvae,decoding", "TVAE+Decode"),
        ("tvae,contrastive,consistency", "TVAE+Contrast+Consist"),
        ("tvae,decoding,consistency", "TVAE+Decode+Consist"),
        ("tvae,contrastive,decoding", "TVAE+Contrast+Decode"),
        (
            "tvae,contrastive,decoding,consistency",
            "TVAE+Contrast+Decode+Consist",
        ),
        ("unsup_contrastive", "Unsup. Contrast alone"),
    ];
    for (spec, label) in rows {
        assert_eq!(LossConfig::with_terms(spec).unwrap().label(), label);
    }
    let mut c = LossConfig::with_terms("unsup_contrastive").unwrap();
    c.augmentation = false;
    assert!(c.validate().is_err());
    assert!(LossConfig::with_terms("").is_err());
}

#[test]
fn full_objective_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ps = fitted_programs(&mut rng);
    let cfg = LossConfig::with_terms("tvae,contrastive,decoding,consistency").unwrap();
    let m = EmbeddingModel::<f64>::new(layout(), toy_cfg(), cfg, Some(ps.clone()), 3).unwrap();
    let ws: Vec<Window> = (0..4).map(|_| mouse_window(&mut rng, 4)).collect();
    let aug: Vec<Window> = ws
        .iter()
        .map(|w| {
            crate::augment::apply_augmentation(
                crate::augment::Augmentation::Rotation { angle: 1.0 },
                w,
            )
            .unwrap()
        })
        .collect();
    let refs: Vec<&Window> = ws.iter().collect();
    let arefs: Vec<&Window> = aug.iter().collect();
    let batch = LossBatch::<f64>::new(&refs, Some(&arefs), Some(&ps), true).unwrap();
    let eps = standard_normal::<f64, _>(&mut rng, 8, 4);
    let report = gradient_check(&m.store, 1e-4, |tape, st| {
        let mut mm = m.clone();
        mm.store = st.clone();
        mm.loss_nodes(tape, &batch, eps.clone()).unwrap().total
    });
    assert!(report.passed(), "{:?}", report.worst());
}

#[test]
fn constant_program_approximated_immediately() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base = mouse_window(&mut rng, 3);
    let windows = vec![base; MIN_APPROX_WINDOWS];
    let p = AttributeProgram::constant("const", 0.7);
    let cfg = ApproxConfig {
        hidden: 8,
        ..ApproxConfig::default()
    };
    let a = train_program_approximator(&p, &windows, &cfg).unwrap();
    assert_eq!(a.steps_trained, 0);
    assert!(a.val_error < 1e-6);
    let pred = a.predict(&windows[..5]);
    let truth = evaluate_program(&p, &windows[0]).unwrap().value;
    assert!(pred.iter().all(|v| (v - truth).abs() < 1e-6));
    assert!(matches!(
        train_program_approximator(&p, &windows[..10], &cfg),
        Err(TaskError::TooFewWindows { .. })
    ));
}
