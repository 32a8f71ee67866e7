#![allow(dead_code)]

use megre_core::autodiff::{ComplexTensor, Graph, Tensor, Var};
use megre_core::phantom::make_coils;
use megre_core::{CoilSensitivities, MultiEchoImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

pub fn random_complex(shape: &[usize], seed: u64) -> ComplexTensor {
    let mut r = rng(seed);
    ComplexTensor::from_fn(shape, |_| (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)))
}

pub fn random_image(n: usize, h: usize, w: usize, seed: u64) -> MultiEchoImage {
    MultiEchoImage::new(random_complex(&[n, h, w], seed)).unwrap()
}

/// Random complex maps without any normalization.
pub fn random_coils(c: usize, h: usize, w: usize, seed: u64) -> CoilSensitivities {
    CoilSensitivities::new(random_complex(&[c, h, w], seed)).unwrap()
}

/// Smooth maps with unit root-sum-of-squares.
pub fn unit_rss_coils(c: usize, size: usize, seed: u64) -> CoilSensitivities {
    make_coils(c, size, seed).unwrap()
}

pub fn random_mask(shape: &[usize], keep: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| if r.random::<f64>() < keep { 1.0 } else { 0.0 })
}

pub fn rel_err(a: &ComplexTensor, b: &ComplexTensor) -> f64 {
    a.sub(b).unwrap().norm() / b.norm().max(1e-30)
}

/// Central-difference check of a scalar-valued graph function along every
/// coordinate of `inputs[which]` (or a subset of `coords`). Returns the
/// norm-wise relative error.
pub fn gradcheck_scalar(
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
    inputs: &[Tensor],
    which: usize,
    coords: &[usize],
    step: f32,
) -> f64 {
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).data()[0] as f64
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let analytic = g.backward(out).unwrap().tensor(vars[which]);
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for &i in coords {
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[i] += step;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[i] -= step;
        let h = plus[which].data()[i] as f64 - minus[which].data()[i] as f64;
        let fd = (eval(&plus) - eval(&minus)) / h;
        let a = analytic.data()[i] as f64;
        num += (fd - a).powi(2);
        den += a.powi(2).max(fd.powi(2));
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}
