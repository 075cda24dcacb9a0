#![allow(dead_code)]

use assemblynet::nn3d::ops::{
    conv3d_backward, conv3d_forward, maxpool3d, maxpool3d_backward, relu, relu_backward, softmax_channels,
    softmax_channels_backward, upsample_conv, upsample_conv_backward,
};
use assemblynet::nn3d::{backward, dice_loss, forward_with_cache, Dropout, Tensor, UNetConfig, UNetParams};
use assemblynet::rng::seeded;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Worst relative error over a set of probes.
#[derive(Debug, Clone, Copy)]
pub struct ProbeStats {
    pub probes: usize,
    pub max_rel_err: f64,
}

impl ProbeStats {
    fn merge(self, o: ProbeStats) -> ProbeStats {
        ProbeStats {
            probes: self.probes + o.probes,
            max_rel_err: self.max_rel_err.max(o.max_rel_err),
        }
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Compare `analytic` against central differences of `f` at `count` random positions of `x`.
pub fn check<Fn_>(
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    count: usize,
    h: f64,
    rng: &mut ChaCha8Rng,
    f: Fn_,
) -> ProbeStats
where
    Fn_: Fn(&Tensor<f64>) -> f64,
{
    let count = count.min(x.len());
    let mut worst: f64 = 0.0;
    for i in sample(rng, x.len(), count) {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let numeric = (f(&xp) - f(&xm)) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    ProbeStats {
        probes: count,
        max_rel_err: worst,
    }
}

/// `L = sum(out * r)` for a fixed random `r`, so `dL/dout = r`.
fn project(out: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

pub fn conv_check(probes: usize, h: f64, seed: u64) -> ProbeStats {
    let mut rng = seeded(seed);
    let x = random_tensor(&[2, 4, 4, 4], &mut rng);
    let w = random_tensor(&[3, 2, 3, 3, 3], &mut rng);
    let b = random_tensor(&[3], &mut rng);
    let r = random_tensor(&[3, 4, 4, 4], &mut rng);
    let g = conv3d_backward(&x, &w, &r).unwrap();
    let s1 = check(&x, g.input.as_ref().unwrap(), probes, h, &mut rng, |x| {
        project(&conv3d_forward(x, &w, &b).unwrap(), &r)
    });
    let s2 = check(&w, &g.weight, probes, h, &mut rng, |w| {
        project(&conv3d_forward(&x, w, &b).unwrap(), &r)
    });
    let s3 = check(&b, &g.bias, probes, h, &mut rng, |b| {
        project(&conv3d_forward(&x, &w, b).unwrap(), &r)
    });
    s1.merge(s2).merge(s3)
}

pub fn maxpool_check(probes: usize, h: f64, seed: u64) -> ProbeStats {
    let mut rng = seeded(seed);
    // A shuffled grid of well-separated values keeps every window away from ties.
    let n = 2 * 4 * 4 * 4;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let x = Tensor::from_vec(&[2, 4, 4, 4], vals).unwrap();
    let r = random_tensor(&[2, 2, 2, 2], &mut rng);
    let (_, arg) = maxpool3d(&x).unwrap();
    let g = maxpool3d_backward(x.shape(), &arg, &r).unwrap();
    check(&x, &g, probes, h, &mut rng, |x| project(&maxpool3d(x).unwrap().0, &r))
}

pub fn upsample_conv_check(probes: usize, h: f64, seed: u64) -> ProbeStats {
    let mut rng = seeded(seed);
    let x = random_tensor(&[2, 2, 2, 2], &mut rng);
    let w = random_tensor(&[3, 2, 3, 3, 3], &mut rng);
    let b = random_tensor(&[3], &mut rng);
    let r = random_tensor(&[3, 4, 4, 4], &mut rng);
    let (_, up) = upsample_conv(&x, &w, &b).unwrap();
    let g = upsample_conv_backward(&up, &w, &r).unwrap();
    let s1 = check(&x, g.input.as_ref().unwrap(), probes, h, &mut rng, |x| {
        project(&upsample_conv(x, &w, &b).unwrap().0, &r)
    });
    let s2 = check(&w, &g.weight, probes, h, &mut rng, |w| {
        project(&upsample_conv(&x, w, &b).unwrap().0, &r)
    });
    let s3 = check(&b, &g.bias, probes, h, &mut rng, |b| {
        project(&upsample_conv(&x, &w, b).unwrap().0, &r)
    });
    s1.merge(s2).merge(s3)
}

pub fn relu_check(probes: usize, h: f64, seed: u64) -> ProbeStats {
    let mut rng = seeded(seed);
    // Keep inputs at least 10h away from the kink.
    let x = random_tensor(&[2, 4, 4, 4], &mut rng).map(|v| if v.abs() < 10.0 * h { v + 20.0 * h } else { v });
    let r = random_tensor(&[2, 4, 4, 4], &mut rng);
    let g = relu_backward(&relu(&x), &r);
    check(&x, &g, probes, h, &mut rng, |x| project(&relu(x), &r))
}

pub fn softmax_check(probes: usize, h: f64, seed: u64) -> ProbeStats {
    let mut rng = seeded(seed);
    let x = random_tensor(&[4, 3, 3, 4], &mut rng).map(|v| 3.0 * v);
    let r = random_tensor(&[4, 3, 3, 4], &mut rng);
    let g = softmax_channels_backward(&softmax_channels(&x).unwrap(), &r);
    check(&x, &g, probes, h, &mut rng, |x| {
        project(&softmax_channels(x).unwrap(), &r)
    })
}

pub fn dice_check(probes: usize, h: f64, seed: u64) -> ProbeStats {
    let mut rng = seeded(seed);
    let p = softmax_channels(&random_tensor(&[3, 4, 4, 4], &mut rng)).unwrap();
    let t = softmax_channels(&random_tensor(&[3, 4, 4, 4], &mut rng).map(|v| 4.0 * v)).unwrap();
    let (_, g) = dice_loss(&p, &t).unwrap();
    check(&p, &g, probes, h, &mut rng, |p| dice_loss(p, &t).unwrap().0)
}

pub fn tiny_unet_config() -> UNetConfig {
    UNetConfig {
        in_channels: 3,
        num_classes: 3,
        base_filters: 4,
        depth: 1,
        dropout_rate: 0.5,
    }
}

/// Full network: Dice loss of the U-Net output with a recorded dropout mask replayed,
/// differentiated with respect to randomly chosen parameters.
pub fn unet_check(probes: usize, h: f64, seed: u64) -> ProbeStats {
    let mut rng = seeded(seed);
    let cfg = tiny_unet_config();
    let params = UNetParams::<f64>::init(cfg, &mut rng).unwrap();
    let input = random_tensor(&[3, 8, 8, 8], &mut rng);
    let target = softmax_channels(&random_tensor(&[3, 8, 8, 8], &mut rng).map(|v| 6.0 * v)).unwrap();
    let cache = forward_with_cache(&params, &input, Dropout::Sample(&mut rng)).unwrap();
    let masks = cache.masks();
    let (_, g_probs) = dice_loss(&cache.probs, &target).unwrap();
    let grads = backward(&params, &cache, &g_probs).unwrap();

    let loss = |p: &UNetParams<f64>| {
        let c = forward_with_cache::<f64, ChaCha8Rng>(p, &input, Dropout::Replay(&masks)).unwrap();
        dice_loss(&c.probs, &target).unwrap().0
    };
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut worst: f64 = 0.0;
    for flat in sample(&mut rng, total, probes.min(total)) {
        let (mut t, mut i) = (0, flat);
        while i >= sizes[t] {
            i -= sizes[t];
            t += 1;
        }
        let mut pp = params.clone();
        pp.tensors_mut()[t].data_mut()[i] += h;
        let mut pm = params.clone();
        pm.tensors_mut()[t].data_mut()[i] -= h;
        let numeric = (loss(&pp) - loss(&pm)) / (2.0 * h);
        worst = worst.max(rel_err(grads.tensors()[t].data()[i], numeric));
    }
    ProbeStats {
        probes: probes.min(total),
        max_rel_err: worst,
    }
}
