mod common;

use assemblynet::nn3d::ops::{conv3d_forward, dropout_mask, mul_elementwise};
use assemblynet::nn3d::{
    adam_step, backward, dice_loss, forward_with_cache, unet_forward, AdamConfig, AdamState, Dropout, Mode, Tensor,
    UNetConfig, UNetParams,
};
use assemblynet::rng::seeded;
use common::*;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;

#[test]
fn conv_gradients_match_finite_differences() {
    let s = conv_check(40, H, 1);
    assert!(s.max_rel_err < 1e-5, "{s:?}");
}

#[test]
fn maxpool_gradients_match_finite_differences() {
    let s = maxpool_check(40, H, 2);
    assert!(s.max_rel_err < 1e-5, "{s:?}");
}

#[test]
fn upsample_conv_gradients_match_finite_differences() {
    let s = upsample_conv_check(40, H, 3);
    assert!(s.max_rel_err < 1e-5, "{s:?}");
}

#[test]
fn relu_and_softmax_gradients_match_finite_differences() {
    let s = relu_check(40, H, 4);
    assert!(s.max_rel_err < 1e-5, "{s:?}");
    let s = softmax_check(40, H, 5);
    assert!(s.max_rel_err < 1e-4, "{s:?}");
}

#[test]
fn dice_gradient_matches_finite_differences() {
    let s = dice_check(60, H, 6);
    assert!(s.max_rel_err < 1e-5, "{s:?}");
}

#[test]
fn full_unet_gradient_with_replayed_mask() {
    let s = unet_check(100, 1e-5, 7);
    assert!(s.max_rel_err < 1e-4, "{s:?}");
}

fn cfg(base: usize, depth: usize, dropout: f64) -> UNetConfig {
    UNetConfig {
        in_channels: 2,
        num_classes: 3,
        base_filters: base,
        depth,
        dropout_rate: dropout,
    }
}

#[test]
fn probabilities_sum_to_one_and_eval_is_pure() {
    let mut rng = seeded(11);
    let p = UNetParams::<f32>::init(cfg(4, 2, 0.5), &mut rng).unwrap();
    let x = random_tensor(&[2, 8, 4, 8], &mut rng).cast::<f32>();
    for mode in [Mode::Train, Mode::EvalStochastic, Mode::EvalDeterministic] {
        let probs = unet_forward(&p, &x, mode, &mut rng).unwrap();
        assert_eq!(probs.shape(), &[3, 8, 4, 8]);
        for v in 0..probs.voxels() {
            let s: f64 = (0..3).map(|c| probs.channel(c)[v] as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
    let a = unet_forward(&p, &x, Mode::EvalDeterministic, &mut seeded(1)).unwrap();
    let b = unet_forward(&p, &x, Mode::EvalDeterministic, &mut seeded(2)).unwrap();
    assert_eq!(a, b);
    let c = unet_forward(&p, &x, Mode::EvalStochastic, &mut seeded(1)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn shape_violations_are_errors() {
    let mut rng = seeded(12);
    let p = UNetParams::<f32>::init(cfg(2, 2, 0.0), &mut rng).unwrap();
    let wrong_channels = Tensor::<f32>::zeros(&[3, 4, 4, 4]);
    assert!(unet_forward(&p, &wrong_channels, Mode::EvalDeterministic, &mut rng).is_err());
    let not_divisible = Tensor::<f32>::zeros(&[2, 4, 6, 4]);
    assert!(unet_forward(&p, &not_divisible, Mode::EvalDeterministic, &mut rng).is_err());
    assert!(UNetParams::<f32>::init(cfg(0, 1, 0.0), &mut rng).is_err());
    assert!(UNetParams::<f32>::init(cfg(2, 0, 0.0), &mut rng).is_err());
    assert!(UNetParams::<f32>::init(cfg(2, 1, 1.0), &mut rng).is_err());
}

#[test]
fn parameter_count_scales_with_square_of_base_filters() {
    // Every conv except the first and the head is quadratic in the base width.
    let small = cfg(8, 2, 0.5);
    let large = cfg(16, 2, 0.5);
    let ratio = large.param_count() as f64 / small.param_count() as f64;
    assert!(ratio > 3.5 && ratio <= 4.0, "{ratio}");
    let p = UNetParams::<f32>::init(small, &mut seeded(0)).unwrap();
    assert_eq!(p.num_params(), small.param_count());
    let full = UNetConfig::mri_fine(5, 3);
    assert_eq!(full.filters(1), 48);
}

#[test]
fn dropout_expectation_matches_deterministic_linear_map() {
    // Linear net: one conv applied to a dropped-out input. The mean over many
    // stochastic passes must match the deterministic pass within 3 standard errors.
    let mut rng = seeded(13);
    let x = random_tensor(&[2, 4, 4, 4], &mut rng);
    let w = random_tensor(&[1, 2, 3, 3, 3], &mut rng);
    let b = Tensor::zeros(&[1]);
    let proj = random_tensor(&[1, 4, 4, 4], &mut rng);
    let score = |t: &Tensor<f64>| -> f64 { t.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum() };
    let exact = score(&conv3d_forward(&x, &w, &b).unwrap());
    let n = 1000;
    let samples: Vec<f64> = (0..n)
        .map(|_| {
            let m = dropout_mask::<f64, ChaCha8Rng>(x.shape(), 0.5, &mut rng);
            score(&conv3d_forward(&mul_elementwise(&x, &m), &w, &b).unwrap())
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((mean - exact).abs() < 3.0 * se, "mean {mean} exact {exact} se {se}");
}

#[test]
fn one_adam_step_decreases_loss_for_almost_all_seeds() {
    let config = UNetConfig {
        in_channels: 1,
        num_classes: 2,
        base_filters: 2,
        depth: 1,
        dropout_rate: 0.0,
    };
    let mut decreased = 0;
    for seed in 0..100 {
        let mut rng = seeded(seed);
        let mut p = UNetParams::<f64>::init(config, &mut rng).unwrap();
        let x = random_tensor(&[1, 4, 4, 4], &mut rng);
        let labels = x.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let mut target = Tensor::zeros(&[2, 4, 4, 4]);
        target.channel_mut(1).copy_from_slice(labels.data());
        target
            .channel_mut(0)
            .iter_mut()
            .zip(labels.data())
            .for_each(|(t, l)| *t = 1.0 - l);
        let cache = forward_with_cache::<f64, ChaCha8Rng>(&p, &x, Dropout::Off).unwrap();
        let (before, g) = dice_loss(&cache.probs, &target).unwrap();
        let grads = backward(&p, &cache, &g).unwrap();
        let mut state = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &grads, &mut state).unwrap();
        let after = forward_with_cache::<f64, ChaCha8Rng>(&p, &x, Dropout::Off).unwrap();
        let (after, _) = dice_loss(&after.probs, &target).unwrap();
        if after < before {
            decreased += 1;
        }
    }
    assert!(decreased >= 95, "{decreased}/100");
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let run = || {
        let config = cfg(2, 1, 0.5);
        let mut rng = seeded(5);
        let mut p = UNetParams::<f32>::init(config, &mut rng).unwrap();
        let x = random_tensor(&[2, 4, 4, 4], &mut seeded(6)).cast::<f32>();
        let target = assemblynet::nn3d::ops::softmax_channels(&random_tensor(&[3, 4, 4, 4], &mut seeded(7)))
            .unwrap()
            .cast::<f32>();
        let mut state = AdamState::new(&p, AdamConfig::default());
        for _ in 0..3 {
            let cache = forward_with_cache(&p, &x, Dropout::Sample(&mut rng)).unwrap();
            let (_, g) = dice_loss(&cache.probs, &target).unwrap();
            let grads = backward(&p, &cache, &g).unwrap();
            adam_step(&mut p, &grads, &mut state).unwrap();
        }
        p
    };
    assert_eq!(run(), run());
}
