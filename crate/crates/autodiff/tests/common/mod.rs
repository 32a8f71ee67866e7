#![allow(dead_code)]

use megre_autodiff::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn weighted_output(
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
    inputs: &[Tensor],
    weights: &Tensor,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.value(out).dot(weights).unwrap()
}

/// Compares reverse-mode gradients of `<w, f(inputs)>` against central differences.
/// Returns the worst norm-wise relative error over all inputs.
pub fn gradcheck(
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
    inputs: &[Tensor],
    step: f32,
    seed: u64,
) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let weights = random_tensor(g.shape(out), seed, -1.0, 1.0);
    let grads = g.backward_from(out, &weights).unwrap();

    let mut worst = 0.0f64;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.tensor(*var);
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= step;
            let h = plus[k].data()[i] as f64 - minus[k].data()[i] as f64;
            let fd = (weighted_output(build, &plus, &weights)
                - weighted_output(build, &minus, &weights))
                / h;
            let a = analytic.data()[i] as f64;
            num += (fd - a).powi(2);
            den += a.powi(2).max(fd.powi(2));
        }
        let rel = if den == 0.0 { num.sqrt() } else { (num / den).sqrt() };
        worst = worst.max(rel);
    }
    worst
}
