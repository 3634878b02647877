//! Per-layer forward/backward cost of the two CNNs at batch size 32.

use std::time::Instant;

use aad_core::model::{CnnConfig, LayerPlan};
use aad_core::tensor::conv::{conv2d_backward, conv2d_forward};
use aad_core::tensor::norm::{batchnorm_train_backward, batchnorm_train_forward};
use aad_core::tensor::pool::{maxpool2d_backward, maxpool2d_forward};
use aad_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn run(name: &str, plan: &[LayerPlan], input: (usize, usize), b: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut t = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0));
    let mut x = t(&[b, 1, input.0, input.1]);
    for (i, l) in plan.iter().enumerate() {
        let w = t(&l.conv.weight_shape());
        let bias = t(&[l.conv.out_channels]);
        let s = Instant::now();
        let y = conv2d_forward(&x, &w, &bias, &l.conv).unwrap();
        let conv_f = s.elapsed();
        let s = Instant::now();
        let (p, arg) = maxpool2d_forward(&y, &l.pool).unwrap();
        let pool_f = s.elapsed();
        let g = Tensor::full(&[l.conv.out_channels], 1.0f32);
        let s = Instant::now();
        let (n, cache) = batchnorm_train_forward(&p, &g, &g).unwrap();
        let bn_f = s.elapsed();
        let s = Instant::now();
        let bg = batchnorm_train_backward(&p, &g, &cache, &n).unwrap();
        let bn_b = s.elapsed();
        let s = Instant::now();
        let gy = maxpool2d_backward(&bg.dx, &arg, y.shape());
        let pool_b = s.elapsed();
        let s = Instant::now();
        conv2d_backward(&x, &w, &gy, &l.conv, i > 0).unwrap();
        let conv_b = s.elapsed();
        let macs = l.conv.weight_count() as f64 * (l.conv_out.0 * l.conv_out.1 * b) as f64;
        println!(
            "{name} layer {}: conv fwd {conv_f:?} ({:.1} GMAC/s) bwd {conv_b:?} | pool {pool_f:?}/{pool_b:?} | bn {bn_f:?}/{bn_b:?}",
            i + 1,
            macs / conv_f.as_secs_f64() / 1e9
        );
        x = n;
    }
}

fn main() {
    aad_core::tensor::retain_heap();
    let b = 32;
    run("eeg", &CnnConfig::eeg().plan((192, 10)).unwrap(), (192, 10), b);
    run("audio", &CnnConfig::audio().plan((151, 257)).unwrap(), (151, 257), b);
}
