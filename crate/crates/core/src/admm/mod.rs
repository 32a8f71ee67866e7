//! Unrolled ADMM reconstruction: a learned residual denoiser stands in for
//! the proximal step, conjugate gradient enforces data consistency, and the
//! scaled dual variable is updated in between. An optional recurrent cell
//! (temporal feature fusion, TFF) sweeps the echoes and feeds its hidden
//! states to the denoiser.

mod cg;

use std::collections::BTreeMap;

use megre_autodiff::{CVar, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cg::{cg_solve, CgOutput, CgSettings};

use crate::error::{invalid, Error, Result};
use crate::forward_model::EncodingOp;

pub const LEAKY_SLOPE: f32 = 0.1;
const KERNEL: usize = 3;
const DENOISER_LAYERS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdmmConfig {
    pub n_echoes: usize,
    pub unrolls: usize,
    /// Hidden channels of the denoiser before the multiplier is applied.
    pub width: usize,
    /// Widens the denoiser, e.g. to match the parameter budget of a TFF model.
    pub width_multiplier: usize,
    pub tff: bool,
    pub tff_hidden: usize,
    /// One denoiser for all unrolls (true) or one per unroll.
    pub share_weights: bool,
    pub cg_iters: usize,
    pub cg_tol: f64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            n_echoes: 4,
            unrolls: 3,
            width: 32,
            width_multiplier: 1,
            tff: false,
            tff_hidden: 8,
            share_weights: true,
            cg_iters: 8,
            cg_tol: 1e-6,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_echoes == 0 || self.width == 0 || self.width_multiplier == 0 {
            return invalid("echo count, width and width multiplier must be positive");
        }
        if self.tff && self.tff_hidden == 0 {
            return invalid("TFF hidden width must be positive");
        }
        if !(self.cg_tol >= 0.0) {
            return invalid("CG tolerance must be non-negative");
        }
        Ok(())
    }

    pub fn hidden_width(&self) -> usize {
        self.width * self.width_multiplier
    }

    pub fn cg(&self) -> CgSettings {
        CgSettings {
            max_iters: self.cg_iters,
            tol: self.cg_tol,
        }
    }

    fn denoiser_prefix(&self, k: usize) -> String {
        if self.share_weights {
            "denoiser.shared".to_string()
        } else {
            format!("denoiser.{k}")
        }
    }

    fn denoiser_in(&self) -> usize {
        if self.tff {
            self.n_echoes * self.tff_hidden
        } else {
            2 * self.n_echoes
        }
    }

    /// `(name, shape)` of every parameter, in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let c = self.hidden_width();
        let copies = if self.share_weights { 1 } else { self.unrolls };
        for k in 0..copies {
            let prefix = self.denoiser_prefix(k);
            for l in 0..DENOISER_LAYERS {
                let cin = if l == 0 { self.denoiser_in() } else { c };
                let cout = if l + 1 == DENOISER_LAYERS { 2 * self.n_echoes } else { c };
                out.push((format!("{prefix}.conv{l}.weight"), vec![cout, cin, KERNEL, KERNEL]));
                out.push((format!("{prefix}.conv{l}.bias"), vec![cout]));
            }
        }
        if self.tff {
            let h = self.tff_hidden;
            out.push(("tff.weight".into(), vec![h, 2 + h, KERNEL, KERNEL]));
            out.push(("tff.bias".into(), vec![h]));
        }
        out.push(("rho_raw".into(), vec![self.unrolls]));
        out
    }
}

/// `softplus^-1(1)`, so every penalty starts at 1.
pub fn rho_raw_init() -> f32 {
    (std::f32::consts::E - 1.0).ln()
}

fn softplus(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// All learnable tensors of the reconstruction network, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmmModel {
    config: AdmmConfig,
    params: BTreeMap<String, Tensor>,
}

impl AdmmModel {
    /// Kaiming-uniform convolution weights, zero biases, zero final denoiser
    /// layer (the untrained denoiser is the identity) and unit penalties.
    pub fn new(config: AdmmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let mut params = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let last = name.ends_with(&format!("conv{}.weight", DENOISER_LAYERS - 1));
            let t = if name == "rho_raw" {
                Tensor::full(&shape, rho_raw_init())
            } else if name.ends_with(".weight") && !last {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
                let bound = gain * (3.0 / fan_in).sqrt();
                Tensor::from_fn(&shape, |_| rng.random_range(-bound..=bound))
            } else {
                Tensor::zeros(&shape)
            };
            params.insert(name, t);
        }
        Ok(AdmmModel { config, params })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes.
    pub fn from_params(config: AdmmConfig, mut params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut checked = BTreeMap::new();
        for (name, shape) in config.parameter_shapes() {
            let t = params
                .remove(&name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return invalid(format!("parameter `{name}` has shape {:?}, expected {shape:?}", t.shape()));
            }
            checked.insert(name, t);
        }
        if let Some(extra) = params.keys().next() {
            return invalid(format!("unexpected parameter `{extra}`"));
        }
        Ok(AdmmModel {
            config,
            params: checked,
        })
    }

    pub fn config(&self) -> &AdmmConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn n_parameters(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Current penalties `rho_k = softplus(raw_k)`.
    pub fn rhos(&self) -> Vec<f32> {
        self.params["rho_raw"].data().iter().map(|&r| softplus(r)).collect()
    }

    /// Places every parameter on `g`; trainable when `trainable` is set.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel<'_> {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundModel { model: self, vars }
    }
}

/// A model whose parameters live on a particular graph.
#[derive(Clone, Debug)]
pub struct BoundModel<'a> {
    model: &'a AdmmModel,
    vars: BTreeMap<String, Var>,
}

impl BoundModel<'_> {
    pub fn config(&self) -> &AdmmConfig {
        &self.model.config
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter `{name}`")))
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Substitutes an existing node for parameter `name` (same shape).
    pub fn replace_var(&mut self, g: &Graph, name: &str, var: Var) -> Result<()> {
        let old = self.var(name)?;
        if g.shape(old) != g.shape(var) {
            return invalid(format!("replacement for `{name}` has shape {:?}, expected {:?}", g.shape(var), g.shape(old)));
        }
        self.vars.insert(name.to_string(), var);
        Ok(())
    }

    fn check_image(&self, g: &Graph, s: CVar) -> Result<[usize; 3]> {
        let shape = g.shape(s.re);
        if shape.len() != 3 || shape[0] != self.config().n_echoes {
            return invalid(format!(
                "model expects {} echoes, got image shape {shape:?}",
                self.config().n_echoes
            ));
        }
        Ok([shape[0], shape[1], shape[2]])
    }

    /// Concatenated hidden states `h_2 .. h_{N+1}`, shape `(N * C_h, y, x)`.
    /// `h_1 = 0` and `h_{j+1} = leaky(conv([re s_j, im s_j, h_j]))`.
    pub fn tff_forward(&self, g: &mut Graph, s: CVar) -> Result<Var> {
        if !self.config().tff {
            return Err(Error::Contract("temporal feature fusion is disabled in this model".into()));
        }
        let [n, h, w] = self.check_image(g, s)?;
        let (weight, bias) = (self.var("tff.weight")?, self.var("tff.bias")?);
        let mut state = g.constant(Tensor::zeros(&[self.config().tff_hidden, h, w]));
        let mut states = Vec::with_capacity(n);
        for j in 0..n {
            let re = g.slice0(s.re, j, j + 1)?;
            let im = g.slice0(s.im, j, j + 1)?;
            let input = g.concat0(&[re, im, state])?;
            let pre = g.conv2d(input, weight, Some(bias))?;
            state = g.leaky_relu(pre, LEAKY_SLOPE);
            states.push(state);
        }
        Ok(g.concat0(&states)?)
    }

    /// `D(v)` for unroll `k`: the echo stack (or its TFF features) through five
    /// 3x3 convolutions, added back onto the input.
    pub fn denoise(&self, g: &mut Graph, k: usize, v: CVar) -> Result<CVar> {
        let [n, _, _] = self.check_image(g, v)?;
        let prefix = self.config().denoiser_prefix(k);
        let mut x = if self.config().tff {
            self.tff_forward(g, v)?
        } else {
            g.concat0(&[v.re, v.im])?
        };
        for l in 0..DENOISER_LAYERS {
            let weight = self.var(&format!("{prefix}.conv{l}.weight"))?;
            let bias = self.var(&format!("{prefix}.conv{l}.bias"))?;
            x = g.conv2d(x, weight, Some(bias))?;
            if l + 1 < DENOISER_LAYERS {
                x = g.leaky_relu(x, LEAKY_SLOPE);
            }
        }
        let correction = CVar {
            re: g.slice0(x, 0, n)?,
            im: g.slice0(x, n, 2 * n)?,
        };
        Ok(g.cadd(v, correction)?)
    }

    /// `rho_k` as a one-element node.
    pub fn rho(&self, g: &mut Graph, k: usize) -> Result<Var> {
        if k >= self.config().unrolls {
            return invalid(format!("unroll {k} out of range"));
        }
        let raw = self.var("rho_raw")?;
        let raw_k = g.slice0(raw, k, k + 1)?;
        Ok(g.softplus(raw_k))
    }
}

/// Primal, auxiliary and dual iterates.
#[derive(Clone, Copy, Debug)]
pub struct AdmmState {
    pub s: CVar,
    pub v: CVar,
    pub u: CVar,
    pub k: usize,
}

/// `s + u / rho`.
pub fn tilde_v(g: &mut Graph, s: CVar, u: CVar, rho: Var) -> Result<CVar> {
    let inv = g.recip(rho);
    let scaled = g.crow_scale(u, inv)?;
    Ok(g.cadd(s, scaled)?)
}

/// Starting point: `s = v = A^H b`, `u = 0`.
pub fn initial_state(g: &mut Graph, atb: CVar) -> AdmmState {
    let u = g.cscale(atb, 0.0);
    AdmmState { s: atb, v: atb, u, k: 0 }
}

/// One unrolled iteration. Returns the new state and the CG residual trace.
pub fn admm_step(
    g: &mut Graph,
    model: &BoundModel,
    op: &EncodingOp,
    atb: CVar,
    state: AdmmState,
) -> Result<(AdmmState, Vec<f64>)> {
    let k = state.k;
    let rho = model.rho(g, k)?;
    let vt = tilde_v(g, state.s, state.u, rho)?;
    let v = model.denoise(g, k, vt)?;
    let inv = g.recip(rho);
    let u_scaled = g.crow_scale(state.u, inv)?;
    let st = g.csub(v, u_scaled)?;
    let half = g.scale(rho, 0.5);
    let reg = g.crow_scale(st, half)?;
    let rhs = g.cadd(atb, reg)?;
    let out = cg_solve(g, op, rhs, half, model.config().cg())?;
    let s = out.solution;
    let gap = g.csub(s, v)?;
    let du = g.crow_scale(gap, rho)?;
    let u = g.cadd(state.u, du)?;
    Ok((AdmmState { s, v, u, k: k + 1 }, out.residuals))
}

/// All `K` primal iterates for measured data `b` `(echo, coil, ky, kx)`.
/// `K = 0` yields an empty list; the zero-filled image is then the output.
pub fn admm_forward(g: &mut Graph, model: &BoundModel, op: &EncodingOp, b: CVar) -> Result<Vec<CVar>> {
    let atb = op.adjoint(g, b)?;
    let mut state = initial_state(g, atb);
    let mut iterates = Vec::with_capacity(model.config().unrolls);
    for _ in 0..model.config().unrolls {
        let (next, _) = admm_step(g, model, op, atb, state)?;
        iterates.push(next.s);
        state = next;
    }
    Ok(iterates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use megre_autodiff::ComplexTensor;

    fn small(tff: bool) -> AdmmConfig {
        AdmmConfig {
            n_echoes: 3,
            unrolls: 2,
            width: 4,
            tff,
            tff_hidden: 2,
            ..AdmmConfig::default()
        }
    }

    fn image(n: usize, seed: u64) -> ComplexTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexTensor::from_fn(&[n, 8, 8], |_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn untrained_denoiser_is_identity() {
        for tff in [false, true] {
            let model = AdmmModel::new(small(tff), 1).unwrap();
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false);
            let x = g.complex_constant(image(3, 2));
            let y = bound.denoise(&mut g, 0, x).unwrap();
            assert_eq!(g.complex_value(y), g.complex_value(x));
        }
    }

    #[test]
    fn parameter_layout() {
        let model = AdmmModel::new(small(true), 0).unwrap();
        assert_eq!(model.param("tff.weight").unwrap().shape(), &[2, 4, 3, 3]);
        assert_eq!(model.param("denoiser.shared.conv0.weight").unwrap().shape(), &[4, 6, 3, 3]);
        assert_eq!(model.param("denoiser.shared.conv4.weight").unwrap().shape(), &[6, 4, 3, 3]);
        for r in model.rhos() {
            assert!((r - 1.0).abs() < 1e-6);
        }
        let per_iter = AdmmModel::new(AdmmConfig { share_weights: false, ..small(false) }, 0).unwrap();
        assert!(per_iter.param("denoiser.1.conv2.bias").is_some());
        let wide = AdmmConfig { width_multiplier: 2, ..small(false) };
        assert_eq!(wide.hidden_width(), 8);
    }

    #[test]
    fn tff_requires_flag() {
        let model = AdmmModel::new(small(false), 0).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let x = g.complex_constant(image(3, 0));
        assert!(matches!(bound.tff_forward(&mut g, x), Err(Error::Contract(_))));
    }

    #[test]
    fn echo_count_checked() {
        let model = AdmmModel::new(small(false), 0).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let x = g.complex_constant(image(2, 0));
        assert!(bound.denoise(&mut g, 0, x).is_err());
    }

    #[test]
    fn from_params_round_trip() {
        let model = AdmmModel::new(small(true), 5).unwrap();
        let again = AdmmModel::from_params(model.config().clone(), model.params().clone()).unwrap();
        assert_eq!(model, again);
        let mut missing = model.params().clone();
        missing.remove("tff.bias");
        assert!(AdmmModel::from_params(model.config().clone(), missing).is_err());
    }
}
