use super::*;
use crate::geometry::dist3;
use crate::model::{Layer, Param};
use crate::pipeline::TdoaVector;
use crate::scenario::{DisplacementPair, Scenario};
use proptest::prelude::*;
use rand::SeedableRng;

/// One RU of four TRPs on the corners of a 10 m square.
fn square() -> Scenario {
    let mut s = Scenario::desk();
    s.trp_positions = vec![[0.0, 0.0, 8.0], [10.0, 0.0, 8.0], [10.0, 10.0, 8.0], [0.0, 10.0, 8.0]];
    s.ru_assignment = vec![0; 4];
    s.ref_trp_per_ru = vec![0];
    s.bounds = Bounds::new([0.0, 0.0], [10.0, 10.0]);
    s
}

fn tiny_widths() -> ModelWidths {
    ModelWidths { conv1_channels: 3, conv2_channels: 2, fc1_units: 6, fc2_units: 5 }
}

fn exact_tdoa(s: &Scenario, u: [f64; 2]) -> TdoaVector {
    let p = s.ue_point(u);
    let mps = s.meters_per_sample();
    let values = s
        .tdoa_layout()
        .entries
        .iter()
        .map(|e| (dist3(s.trp_positions[e.trp], p) - dist3(s.trp_positions[e.reference], p)) / mps)
        .collect::<Vec<_>>();
    TdoaVector { valid: vec![true; values.len()], values }
}

fn frames(s: &Scenario, n: usize, c: usize, seed: u64) -> Vec<PreprocessedFrame> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let u = [rng.random_range(1.0..9.0), rng.random_range(1.0..9.0)];
            PreprocessedFrame {
                h_norm: Array2::from_shape_fn((s.num_trps(), c), |_| rng.random_range(0.0..1.0)),
                tdoa: exact_tdoa(s, u),
                timestamp: i as f64 * 0.5,
                source_index: i,
            }
        })
        .collect()
}

fn all_pairs(n: usize, eps_frames: usize, d: f64) -> DisplacementSet {
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..(i + eps_frames + 1).min(n) {
            pairs.push(DisplacementPair { i, j, d_hat: d * (j - i) as f64 });
        }
    }
    DisplacementSet { pairs, epsilon_s: 0.5 * eps_frames as f64, noise_sigma_m: 0.0, bias_rate_m_per_s: 0.0 }
}

fn dataset(n: usize, c: usize, seed: u64) -> TrainingDataset {
    let s = square();
    TrainingDataset::from_frames(frames(&s, n, c, seed), &s, MaskPolicy::None, None, Some(all_pairs(n, 4, 0.7))).unwrap()
}

fn tiny_model(c: usize, seed: u64) -> ChartModel<f64> {
    let mut m = ChartModel::<f64>::new(tiny_widths().model_config(4, c), seed).unwrap();
    for (i, v) in m.params_mut().iter_mut().enumerate() {
        *v += 0.02 * ((i % 5) as f64 - 2.0);
    }
    m.set_output_frame(OutputFrame { center: [5.0, 5.0], scale: 5.0 });
    m
}

/// A model whose output is the constant `u` for every input.
fn constant_model(c: usize, u: [f64; 2]) -> ChartModel<f64> {
    let mut m = ChartModel::<f64>::new(tiny_widths().model_config(4, c), 0).unwrap();
    m.params_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut b = m.param_mut(Param::Bias(Layer::Fc3));
    b[[0, 0]] = u[0];
    b[[0, 1]] = u[1];
    m
}

/// Finite-difference check over every parameter; returns the worst
/// relative error after asserting that few parameters sit near a ReLU kink.
fn max_rel_fd(
    model: &ChartModel<f64>,
    analytic: &Gradients<f64>,
    inputs: &[ArrayView2<f64>],
    step: f64,
    f: impl Fn(&ChartModel<f64>) -> f64,
) -> f64 {
    let report = crate::model::gradcheck::check_gradients(model, analytic, step, 1e-6, f, |m| {
        m.forward_batch(inputs).unwrap().1.relu_pattern()
    });
    assert!(report.skipped_kinks * 20 < model.num_params(), "{report:?}");
    report.max_rel_error
}

#[test]
fn perfect_embedding_has_zero_loss_and_gradient() {
    let s = square();
    let mut f = frames(&s, 1, 6, 0);
    // equidistant from all four TRPs, so every range difference is exactly zero
    f[0].tdoa = TdoaVector { values: vec![0.0; 3], valid: vec![true; 3] };
    let data = TrainingDataset::from_frames(f, &s, MaskPolicy::None, None, None).unwrap();
    let model = constant_model(6, [5.0, 5.0]);
    let ctx = LossContext::new(&data, LossNormalization::Retained);
    let out = ctx.tdoa_loss(&model, &[0]).unwrap();
    assert_eq!(out.tdoa, 0.0);
    assert_eq!(out.grads.max_abs(), 0.0);
}

#[test]
fn fully_masked_batch_has_zero_loss() {
    let s = square();
    let f = frames(&s, 3, 6, 1);
    let masks = f.iter().map(|_| MaskVector { mu: vec![false; 4], nu: vec![false; 3] }).collect();
    let data = TrainingDataset::new(f, masks, &s, None).unwrap();
    let ctx = LossContext::new(&data, LossNormalization::Retained);
    let out = ctx.tdoa_loss(&tiny_model(6, 0), &[0, 1, 2]).unwrap();
    assert_eq!(out.tdoa, 0.0);
    assert_eq!(out.grads.max_abs(), 0.0);
}

#[test]
fn tdoa_loss_gradient_matches_finite_differences() {
    let mut data = dataset(4, 8, 2);
    // perturbed measurements keep residuals away from the |.| kink
    for (k, f) in data.frames.iter_mut().enumerate() {
        for v in &mut f.tdoa.values {
            *v += 0.9 + 0.3 * k as f64;
        }
    }
    data.masks[1].nu[2] = false;
    for norm in [LossNormalization::Retained, LossNormalization::Fixed] {
        let ctx = LossContext::new(&data, norm);
        let model = tiny_model(8, 3);
        let batch = [0, 1, 3];
        let out = ctx.tdoa_loss(&model, &batch).unwrap();
        let inputs: Vec<_> = batch.iter().map(|&b| data.frames[b].h_norm.view()).collect();
        let worst = max_rel_fd(&model, &out.grads, &inputs, 1e-4, |m| ctx.tdoa_loss(m, &batch).unwrap().tdoa);
        assert!(worst < 1e-4, "{norm:?}: {worst}");
    }
}

#[test]
fn joint_loss_gradient_matches_finite_differences() {
    let mut data = dataset(5, 8, 4);
    for f in data.frames.iter_mut() {
        for v in &mut f.tdoa.values {
            *v -= 1.3;
        }
    }
    let ctx = LossContext::new(&data, LossNormalization::Retained);
    let mut model = tiny_model(8, 5);
    // spread the embeddings so pair distances are meters, not centimeters;
    // the norm's curvature would otherwise dominate the difference quotient
    model.set_output_frame(OutputFrame { center: [5.0, 5.0], scale: 60.0 });
    let pairs = [(0, 1, 3.1), (2, 4, 0.4), (3, 1, 7.0)];
    let out = ctx.joint_loss(&model, &pairs, 2.0).unwrap();
    assert!(out.displacement > 0.0 && out.tdoa > 0.0);
    let inputs: Vec<_> = data.frames.iter().map(|f| f.h_norm.view()).collect();
    let worst = max_rel_fd(&model, &out.grads, &inputs, 2e-5, |m| ctx.joint_loss(m, &pairs, 2.0).unwrap().total);
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn zero_beta_reduces_to_pairwise_tdoa_loss() {
    let data = dataset(6, 8, 6);
    for norm in [LossNormalization::Retained, LossNormalization::Fixed] {
        let ctx = LossContext::new(&data, norm);
        let model = tiny_model(8, 7);
        let pairs = [(0, 1, 1.0), (2, 5, 2.0)];
        let joint = ctx.joint_loss(&model, &pairs, 0.0).unwrap();
        let single = ctx.tdoa_loss(&model, &[0, 2, 1, 5]).unwrap();
        assert!((joint.total - single.tdoa).abs() < 1e-12);
        let diff = joint.grads.as_slice().iter().zip(single.grads.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}

#[test]
fn perfect_pairs_have_zero_joint_loss() {
    let s = square();
    let mut f = frames(&s, 2, 6, 9);
    for x in &mut f {
        x.tdoa = TdoaVector { values: vec![0.0; 3], valid: vec![true; 3] };
    }
    let data = TrainingDataset::from_frames(f, &s, MaskPolicy::None, None, None).unwrap();
    let ctx = LossContext::new(&data, LossNormalization::Retained);
    let out = ctx.joint_loss(&constant_model(6, [5.0, 5.0]), &[(0, 1, 0.0)], 2.0).unwrap();
    assert_eq!(out.total, 0.0);
    assert_eq!(out.grads.max_abs(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn masked_tdoas_have_no_effect(delta in -50.0f64..50.0, which in 0usize..3, frame in 0usize..3) {
        let mut data = dataset(3, 6, 11);
        data.masks[frame].nu[which] = false;
        let ctx = LossContext::new(&data, LossNormalization::Retained);
        let model = tiny_model(6, 1);
        let a = ctx.tdoa_loss(&model, &[0, 1, 2]).unwrap();
        let mut perturbed = data.clone();
        perturbed.frames[frame].tdoa.values[which] += delta;
        let ctx2 = LossContext::new(&perturbed, LossNormalization::Retained);
        let b = ctx2.tdoa_loss(&model, &[0, 1, 2]).unwrap();
        prop_assert_eq!(a.tdoa, b.tdoa);
        prop_assert_eq!(a.grads.as_slice(), b.grads.as_slice());
    }
}

#[test]
fn siamese_branches_share_parameters() {
    let data = dataset(3, 6, 12);
    let ctx = LossContext::new(&data, LossNormalization::Retained);
    let model = tiny_model(6, 2);
    let (u, _) = model.forward_batch(&[data.frames[1].h_norm.view(), data.frames[1].h_norm.view()]).unwrap();
    assert_eq!(u.row(0), u.row(1));
    // a pair of a frame with itself pulls both branches into one gradient
    let out = ctx.joint_loss(&model, &[(1, 1, 0.0)], 1.0).unwrap();
    assert_eq!(out.displacement, 0.0);
}

#[test]
fn pairs_respect_the_window() {
    let ts: Vec<f64> = (0..100).map(|i| i as f64).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let pairs = sample_pairs(&ts, 4.0, 5000, &mut rng).unwrap();
    assert_eq!(pairs.len(), 5000);
    assert!(pairs.iter().all(|&(i, j)| i != j && (ts[i] - ts[j]).abs() <= 4.0));

    // |dt| in {1,2,3,4}: admissible ordered pairs per offset are 2 * (100 - d)
    let mut counts = [0f64; 4];
    for &(i, j) in &pairs {
        counts[(ts[i] - ts[j]).abs() as usize - 1] += 1.0;
    }
    let weights: Vec<f64> = (1..=4).map(|d| (100 - d) as f64).collect();
    let total: f64 = weights.iter().sum();
    let chi2: f64 = counts
        .iter()
        .zip(&weights)
        .map(|(o, w)| {
            let e = 5000.0 * w / total;
            (o - e).powi(2) / e
        })
        .sum();
    // 3 degrees of freedom, 99.9% quantile is 16.27
    assert!(chi2 < 16.27, "chi2 {chi2}");
}

#[test]
fn no_admissible_pair_is_an_error() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(sample_pairs(&[0.0, 10.0], 4.0, 3, &mut rng), Err(Error::NoAdmissiblePair { .. })));
    assert!(sample_pairs(&[0.0], 4.0, 3, &mut rng).is_err());
}

fn quick_config(mode: TrainMode, epochs: usize) -> TrainConfig {
    TrainConfig {
        mode,
        mask: MaskPolicy::None,
        epochs,
        batch_size: 8,
        epsilon_s: 2.0,
        widths: tiny_widths(),
        rng_seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let data = dataset(10, 6, 13);
    let cfg = quick_config(TrainMode::TdoaOnly, 0);
    let out = train::<f64>(&data, &cfg).unwrap();
    let mut init = ChartModel::<f64>::new(tiny_widths().model_config(4, 6), derive_seed(3, "init")).unwrap();
    init.set_output_frame(area_output_frame(&data.bounds));
    assert_eq!(out.model, init);
    assert_eq!(out.history.len(), 1);
}

#[test]
fn training_is_deterministic() {
    let data = dataset(24, 6, 14);
    for mode in [TrainMode::TdoaOnly, TrainMode::TdoaPlusDisplacement] {
        let cfg = quick_config(mode, 3);
        let a = train::<f32>(&data, &cfg).unwrap();
        let b = train::<f32>(&data, &cfg).unwrap();
        let bits = |m: &ChartModel<f32>| m.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.model), bits(&b.model));
        assert_eq!(a.history, b.history);
    }
}

#[test]
fn displacement_mode_requires_measurements() {
    let s = square();
    let data = TrainingDataset::from_frames(frames(&s, 5, 6, 0), &s, MaskPolicy::None, None, None).unwrap();
    assert!(train::<f32>(&data, &quick_config(TrainMode::TdoaPlusDisplacement, 1)).is_err());
}

#[test]
fn divergence_reports_the_epoch() {
    let mut data = dataset(8, 6, 15);
    data.frames[3].tdoa.values[0] = f64::NAN;
    let err = train::<f64>(&data, &quick_config(TrainMode::TdoaOnly, 2)).unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 1 }), "{err:?}");
}

#[test]
fn invalid_configs_rejected() {
    let mut cfg = TrainConfig::default();
    cfg.beta = -1.0;
    assert!(cfg.validate().is_err());
    let mut cfg = TrainConfig::default();
    cfg.epsilon_s = 0.0;
    assert!(cfg.validate().is_err());
    let mut cfg = TrainConfig::default();
    cfg.batch_size = 0;
    assert!(cfg.validate().is_err());
    assert!(TrainConfig::default().validate().is_ok());
}

#[test]
fn training_reduces_the_loss() {
    let data = dataset(48, 6, 16);
    let mut cfg = quick_config(TrainMode::TdoaOnly, 60);
    cfg.widths = ModelWidths { conv1_channels: 4, conv2_channels: 4, fc1_units: 32, fc2_units: 16 };
    cfg.optimizer.learning_rate = 3e-3;
    let out = train::<f32>(&data, &cfg).unwrap();
    let first = out.history[0].tdoa;
    let last = out.history.last().unwrap().tdoa;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn predict_is_elementwise_and_order_equivariant() {
    let data = dataset(7, 6, 17);
    let model = tiny_model(6, 9);
    let views: Vec<_> = data.frames.iter().map(|f| f.h_norm.view()).collect();
    let all = predict(&model, &views).unwrap();
    for (k, v) in views.iter().enumerate() {
        let one = model.forward(*v).unwrap();
        assert!((one[0] - all[k][0]).abs() < 1e-12 && (one[1] - all[k][1]).abs() < 1e-12);
    }
    let rev: Vec<_> = views.iter().rev().cloned().collect();
    let back = predict(&model, &rev).unwrap();
    for k in 0..7 {
        assert!((back[6 - k][0] - all[k][0]).abs() < 1e-12);
    }
    // bare matrices, no TDoA or mask data needed
    let raw = vec![Array2::<f64>::zeros((4, 6))];
    let views: Vec<_> = raw.iter().map(|h| h.view()).collect();
    assert_eq!(predict(&model, &views).unwrap().len(), 1);
}

