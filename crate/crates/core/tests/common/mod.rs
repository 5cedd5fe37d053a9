//! Shared test oracles.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-4;

pub fn random_vec(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Central differences of a scalar function, one coordinate at a time.
pub fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = v[i];
            v[i] = orig + GRAD_STEP;
            let up = f(&v);
            v[i] = orig - GRAD_STEP;
            let down = f(&v);
            v[i] = orig;
            (up - down) / (2.0 * GRAD_STEP)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, 1e-3)`; the floor keeps near-zero
/// gradients from dominating.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3)).fold(0.0, f64::max)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Time-domain attenuation of a filter in dB, measured on the middle half of
/// the output to skip edge effects. Returns (gain dB, phase shift degrees).
pub fn tone_response(filter: impl Fn(&[f64]) -> Vec<f64>, f_hz: f64, fs_hz: f64, n: usize) -> (f64, f64) {
    let x: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * f_hz * i as f64 / fs_hz).sin()).collect();
    let y = filter(&x);
    let (lo, hi) = (n / 4, 3 * n / 4);
    // Project onto sin and cos over the interval.
    let (mut s, mut c, mut norm) = (0.0, 0.0, 0.0);
    for (i, &v) in y.iter().enumerate().take(hi).skip(lo) {
        let w = 2.0 * std::f64::consts::PI * f_hz * i as f64 / fs_hz;
        s += v * w.sin();
        c += v * w.cos();
        norm += w.sin() * w.sin();
    }
    let amp = (s * s + c * c).sqrt() / norm;
    (20.0 * amp.log10(), c.atan2(s).to_degrees())
}
