mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taflab::cam::{cam_loss, compute_cam, rank_frames, CamStack};
use taflab::tensor::Tensor;

fn raw_stack() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..=8, 1usize..=4).prop_flat_map(|(t, s)| (Just(t), Just(s), prop::collection::vec(-2.0f64..2.0, t * s * s)))
}

proptest! {
    #[test]
    fn normalization_anchors_min_and_max((t, s, v) in raw_stack()) {
        let stack = CamStack::from_raw(Tensor::new(&[t, s, s], v.clone()).unwrap(), 0).unwrap();
        prop_assume!(!stack.degenerate);
        let arg = (0..v.len()).min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        prop_assert_eq!(stack.maps.data()[arg], 0.0);
        let (mn, mx) = (v[arg], v.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let top = stack.maps.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((top - (mx - mn) / mx).abs() < 1e-6);
    }

    #[test]
    fn ranking_is_a_permutation_sorted_by_mass(mass in prop::collection::vec(-5.0f64..5.0, 1..16)) {
        let pi = rank_frames(&mass);
        let mut seen = pi.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..mass.len()).collect::<Vec<_>>());
        for w in pi.windows(2) {
            prop_assert!(mass[w[0]] < mass[w[1]] || (mass[w[0]] == mass[w[1]] && w[0] < w[1]));
        }
    }

    #[test]
    fn cam_loss_is_monotone_in_the_prefix((t, s, v) in raw_stack()) {
        let stack = CamStack::from_raw(Tensor::new(&[t, s, s], v).unwrap(), 0).unwrap();
        let losses: Vec<f64> = (1..=t).map(|n| cam_loss(&stack, n).unwrap()).collect();
        for w in losses.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12);
        }
    }
}

#[test]
fn brute_force_agrees_on_200_random_stacks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..200 {
        let (t, s) = (rng.gen_range(1..=8), rng.gen_range(1..=5));
        let n = rng.gen_range(1..=t);
        // Every tenth stack has repeated frames to exercise tie order.
        let v: Vec<f64> = if i % 10 == 0 {
            let f: Vec<f64> = (0..s * s).map(|_| rng.gen_range(0.0..1.0)).collect();
            (0..t).flat_map(|_| f.clone()).collect()
        } else {
            (0..t * s * s).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let stack = CamStack::from_raw(Tensor::new(&[t, s, s], v.clone()).unwrap(), 0).unwrap();
        let (maps, pi, loss) = common::brute_force_cam(&v, t, n);
        assert_eq!(stack.pi, pi, "stack {i}");
        assert_eq!(rank_frames(&stack.frame_mass), pi);
        for (a, b) in stack.maps.data().iter().zip(&maps) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((cam_loss(&stack, n).unwrap() - loss).abs() < 1e-12);
    }
}

#[test]
fn hand_derived_two_frame_map() {
    // Features equal the input, pooled logits z = (0.45, −0.45). For target 1
    // the CE gradient at every feature is s₀/4, so raw = (s₀/4)·x and the
    // normalized map is (x − 0.1)/0.8 whatever s₀ is.
    let model = common::identity_feature_model(2, 2, 2, &[1.0, -1.0], &[0.0, 0.0]);
    let x = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
    let clip = Tensor::new(&[2, 1, 2, 2], x.clone()).unwrap();
    let stack = compute_cam(&model, &clip, 1).unwrap();
    let s0 = 1.0 / (1.0 + (-0.9f64).exp());
    for (r, v) in stack.raw_maps.data().iter().zip(&x) {
        assert!((r - s0 / 4.0 * v).abs() < 1e-12, "{r} vs {}", s0 / 4.0 * v);
    }
    for (m, v) in stack.maps.data().iter().zip(&x) {
        assert!((m - (v - 0.1) / 0.8).abs() < 1e-12);
    }
    assert!((stack.frame_mass[0] - 0.75).abs() < 1e-12);
    assert!((stack.frame_mass[1] - 2.75).abs() < 1e-12);
    assert_eq!(stack.pi, vec![0, 1]);
    assert!((cam_loss(&stack, 1).unwrap() - 0.75 / 4.0).abs() < 1e-12);
}

#[test]
fn cam_gradient_reaches_the_input() {
    use taflab::cam::cam_objective;
    use taflab::nn::VideoModel;
    use taflab::tensor::Graph;
    let model = VideoModel::<f64>::new(common::tiny_model_config(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Vec<f64> = (0..model.input_shape(1).iter().product()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut g = Graph::new();
    let input = g.input(&model.input_shape(1), x, true).unwrap();
    let obj = cam_objective(&model, &mut g, input, &[1], 2).unwrap();
    g.backward(obj.losses[0]).unwrap();
    let grad = g.grad_or_zeros(input);
    assert!(grad.iter().any(|v| v.abs() > 0.0));
}
