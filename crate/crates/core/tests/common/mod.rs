//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use freqfocus::net::{softmax_cross_entropy, Network, Tensor3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely; the central
/// difference itself carries roughly 1e-10 of rounding noise.
pub const FLOOR: f64 = 1e-6;

pub fn batch(seed: u64, n: usize, c: usize, len: usize) -> (Tensor3, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * c * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|i| i % 3).collect();
    (Tensor3::from_channel_major(n, c, len, data).unwrap(), labels)
}

pub fn loss_at(net: &Network, x: &Tensor3, y: &[usize]) -> f64 {
    // Training-mode statistics; the clone keeps running stats untouched.
    let mut probe = net.clone();
    let (logits, _) = probe.forward_train(x).unwrap();
    softmax_cross_entropy(&logits, y, net.spec().classes).0
}

pub fn max_rel_error(mut net: Network, x: &Tensor3, y: &[usize]) -> f64 {
    let (logits, tape) = net.clone().forward_train(x).unwrap();
    let (_, dlogits) = softmax_cross_entropy(&logits, y, net.spec().classes);
    let analytic = net.backward(&tape, &dlogits);
    let mut worst: f64 = 0.0;
    for i in 0..net.param_count() {
        let orig = net.params()[i];
        net.params_mut()[i] = orig + STEP;
        let up = loss_at(&net, x, y);
        net.params_mut()[i] = orig - STEP;
        let down = loss_at(&net, x, y);
        net.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max(err);
    }
    worst
}

/// `O(T²)` one-sided amplitude spectrum with `1/T` normalisation. Angles are
/// reduced modulo `T` before the trig calls to keep them accurate.
pub fn naive_amplitudes(x: &[f64]) -> Vec<f64> {
    let t = x.len();
    (0..=(t - 1) / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in x.iter().enumerate() {
                let ang = -std::f64::consts::TAU * ((k * n) % t) as f64 / t as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            re.hypot(im) / t as f64
        })
        .collect()
}
