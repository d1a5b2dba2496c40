mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taflab::attack::{
    argmax, attack_batch, temporal_attack, vanilla_attack, AttackConfig, InclusionPolicy, LabelPolicy,
    LossKind,
};
use taflab::nn::VideoModel;
use taflab::tensor::Graph;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// CAM loss with channel weights frozen at `x0`, recomputed from scratch:
/// for the pooled linear head the CE gradient at each feature is the
/// constant `Σ_k (s_k − [k = ŷ]) W_kc / (T·h·w)`.
fn frozen_cam_loss(model: &VideoModel<f64>, x0: &[f64], x: &[f64], target: usize, n: usize) -> f64 {
    let features = |x: &[f64]| {
        let mut g = Graph::new();
        let b = model.bind(&mut g, false);
        let v = g.input(&model.input_shape(1), x.to_vec(), false).unwrap();
        let out = model.forward_inference(&mut g, &b, v).unwrap();
        (g.value(out.features).to_vec(), g.shape(out.features).to_vec(), g.value(out.logits).to_vec())
    };
    let (_, shape, logits) = features(x0);
    let (t, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let zmax = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - zmax).exp()).collect();
    let total: f64 = e.iter().sum();
    let fc = model.fc_weight.data();
    let weight: Vec<f64> = (0..c)
        .map(|ch| {
            (0..logits.len())
                .map(|k| (e[k] / total - f64::from(k == target)) * fc[k * c + ch])
                .sum::<f64>()
                / (t * hw) as f64
        })
        .collect();
    let (f, _, _) = features(x);
    let raw: Vec<f64> = (0..t * hw)
        .map(|i| {
            let (tt, p) = (i / hw, i % hw);
            (0..c).map(|ch| weight[ch] * f[(tt * c + ch) * hw + p]).sum()
        })
        .collect();
    common::brute_force_cam(&raw, t, n).2
}

#[test]
fn one_step_follows_the_sign_of_the_frozen_weight_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    for seed in 0..30 {
        let model = VideoModel::<f64>::new(common::tiny_model_config(), seed).unwrap();
        let len: usize = model.input_shape(1).iter().product();
        let x0 = uniform(&mut rng, len, 0.2, 0.8);
        let target = rng.gen_range(0..3);
        let n = rng.gen_range(1..=2);
        let cfg = AttackConfig { epsilon: 0.1, beta: 0.05, steps: 1, n_frames: n, ..AttackConfig::default() };
        let (x1, flat) = temporal_attack(&model, &x0, &[target], &cfg).unwrap();
        if flat > 0 {
            continue;
        }
        for j in 0..len {
            let (mut p, mut m) = (x0.clone(), x0.clone());
            p[j] += common::H;
            m[j] -= common::H;
            let fd = (frozen_cam_loss(&model, &x0, &p, target, n) - frozen_cam_loss(&model, &x0, &m, target, n))
                / (2.0 * common::H);
            if fd.abs() < 1e-7 {
                continue;
            }
            let want = x0[j] + 0.05 * fd.signum();
            assert!((x1[j] - want).abs() < 1e-12, "seed {seed} pixel {j}: {} vs {want}", x1[j]);
            checked += 1;
        }
    }
    assert!(checked > 500, "only {checked} pixels had a clear gradient sign");
}

#[test]
fn cross_entropy_attack_on_a_linear_head_has_closed_form() {
    // Two classes, features = input: ∇ₓ CE(y) = s_other·(W_other − W_y)/n,
    // so every pixel moves by sign(W_other − W_y)·min(Kβ, ε).
    let model = common::identity_feature_model(2, 3, 3, &[0.7, -0.4], &[0.1, -0.2]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (y, steps) in [(0usize, 1usize), (1, 1), (0, 3), (1, 3)] {
        let x0 = uniform(&mut rng, 2 * 9, 0.3, 0.7);
        let cfg = AttackConfig { epsilon: 0.1, beta: 0.04, steps, n_frames: 2, ..AttackConfig::default() };
        let x = vanilla_attack(&model, &x0, &[y], &cfg).unwrap();
        let dir = if y == 0 { -1.1f64 } else { 1.1 }.signum();
        let mag = (steps as f64 * 0.04).min(0.1);
        for (a, b) in x.iter().zip(&x0) {
            assert!((a - b - dir * mag).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_budget_returns_the_clean_batch() {
    let model = VideoModel::<f64>::new(common::tiny_model_config(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = uniform(&mut rng, 3 * model.input_shape(1).iter().product::<usize>(), 0.0, 1.0);
    let cfg = AttackConfig { epsilon: 0.0, beta: 0.0, n_frames: 2, inclusion: InclusionPolicy::All, ..AttackConfig::default() };
    let out = attack_batch(&model, &x, &[0, 1, 2], &cfg, &mut rng).unwrap();
    assert_eq!(out.data, x);
    assert!(out.deltas.iter().all(|&d| d == 0.0));
}

#[test]
fn paper_rule_on_a_mixed_batch() {
    let model = VideoModel::<f64>::new(common::tiny_model_config(), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let clips = 8;
    let x = uniform(&mut rng, clips * model.input_shape(1).iter().product::<usize>(), 0.0, 1.0);
    let preds: Vec<usize> = model.predict_logits(&x, clips).unwrap().chunks(3).map(argmax).collect();
    let labels: Vec<usize> = preds.iter().enumerate().map(|(b, &p)| if b % 2 == 0 { p } else { (p + 1) % 3 }).collect();
    let cfg = AttackConfig { n_frames: 2, inclusion: InclusionPolicy::All, ..AttackConfig::default() };
    let out = attack_batch(&model, &x, &labels, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(out.predictions, preds);
    for b in 0..clips {
        if b % 2 == 0 {
            assert_ne!(out.targets[b], labels[b]);
        } else {
            assert_eq!(out.targets[b], labels[b]);
        }
    }
}

fn policy() -> impl Strategy<Value = InclusionPolicy> {
    prop_oneof![Just(InclusionPolicy::All), Just(InclusionPolicy::CorrectOnly), Just(InclusionPolicy::IncorrectOnly)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn budget_range_and_inclusion_hold(
        seed in 0u64..1000,
        eps in 0.0f64..0.5,
        ratio in 0.05f64..1.0,
        steps in 1usize..=3,
        ce in any::<bool>(),
        inclusion in policy(),
    ) {
        let model = VideoModel::<f64>::new(common::tiny_model_config(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clips = 4;
        let x = uniform(&mut rng, clips * model.input_shape(1).iter().product::<usize>(), 0.0, 1.0);
        let labels: Vec<usize> = (0..clips).map(|_| rng.gen_range(0..3)).collect();
        let cfg = AttackConfig {
            epsilon: eps,
            beta: eps * ratio,
            steps,
            n_frames: 2,
            inclusion,
            loss: if ce { LossKind::CrossEntropy } else { LossKind::Cam },
            label_policy: LabelPolicy::PaperRule,
            seed,
        };
        let out = attack_batch(&model, &x, &labels, &cfg, &mut rng).unwrap();
        prop_assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        for b in 0..clips {
            prop_assert!(out.max_abs_delta(b) <= eps + 1e-6);
            let want = match inclusion {
                InclusionPolicy::All => true,
                InclusionPolicy::CorrectOnly => out.predictions[b] == labels[b],
                InclusionPolicy::IncorrectOnly => out.predictions[b] != labels[b],
            };
            prop_assert_eq!(out.included[b], want);
            if !want {
                prop_assert_eq!(out.max_abs_delta(b), 0.0);
                prop_assert_eq!(out.targets[b], labels[b]);
            }
        }
    }
}
