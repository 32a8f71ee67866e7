//! Undersampling masks: a hand-designed variable-density baseline and the
//! learnable sigmoid/renormalize/binarize sampler (LOUPE with a
//! straight-through estimator), either shared across echoes or per echo.
//!
//! K-space arrays use the unshifted FFT layout, so DC sits at index `[0, 0]`
//! and negative frequencies wrap to the end of each axis.

use std::str::FromStr;

use megre_autodiff::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_SLOPE: f32 = 5.0;
pub const DEFAULT_RATIO: f32 = 0.23;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    Manual,
    SpoSingle,
    SpoMulti,
}

impl FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "manual" => Ok(SamplingMode::Manual),
            "spo-single" => Ok(SamplingMode::SpoSingle),
            "spo-multi" => Ok(SamplingMode::SpoMulti),
            other => invalid(format!("unknown sampling mode `{other}`")),
        }
    }
}

fn check_ratio(target_ratio: f32) -> Result<()> {
    if !(target_ratio > 0.0 && target_ratio < 1.0) {
        return invalid(format!("target ratio must lie in (0, 1), got {target_ratio}"));
    }
    Ok(())
}

/// Signed frequency index of position `i` on an axis of length `n`.
pub fn signed_freq(i: usize, n: usize) -> i64 {
    if i < n.div_ceil(2) {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// `p = sigmoid(slope * w)` followed by per-row rescaling so every leading-axis
/// row of `P` has mean `target_ratio`. Rows whose mean is at or above the target
/// are scaled down; rows below it have `1 - p` scaled down instead, which keeps
/// `P` inside `[0, 1]` either way.
pub fn weights_to_probabilities(g: &mut Graph, w: Var, slope: f32, target_ratio: f32) -> Result<Var> {
    check_ratio(target_ratio)?;
    if !(slope > 0.0) {
        return invalid(format!("sigmoid slope must be positive, got {slope}"));
    }
    let shape = g.shape(w).to_vec();
    if shape.len() != 3 {
        return invalid(format!("sampling weights must be (echo, ky, kx), got {shape:?}"));
    }
    let scaled = g.scale(w, slope);
    let p = g.sigmoid(scaled);
    let mut rows = Vec::with_capacity(shape[0]);
    for j in 0..shape[0] {
        let pj = g.slice0(p, j, j + 1)?;
        let mean = g.mean(pj);
        let row = if g.value(mean).data()[0] >= target_ratio {
            let inv = g.recip(mean);
            let factor = g.scale(inv, target_ratio);
            g.row_scale(pj, factor)?
        } else {
            let neg = g.scale(pj, -1.0);
            let q = g.add_scalar(neg, 1.0);
            let neg_mean = g.scale(mean, -1.0);
            let one_minus_mean = g.add_scalar(neg_mean, 1.0);
            let inv = g.recip(one_minus_mean);
            let factor = g.scale(inv, 1.0 - target_ratio);
            let shrunk = g.row_scale(q, factor)?;
            let neg_shrunk = g.scale(shrunk, -1.0);
            g.add_scalar(neg_shrunk, 1.0)
        };
        rows.push(row);
    }
    Ok(g.concat0(&rows)?)
}

/// Value-level [`weights_to_probabilities`].
pub fn probabilities(w: &Tensor, slope: f32, target_ratio: f32) -> Result<Tensor> {
    let mut g = Graph::new();
    let wv = g.constant(w.clone());
    let p = weights_to_probabilities(&mut g, wv, slope, target_ratio)?;
    Ok(g.value(p).clone())
}

/// Uniform `[0, 1)` draws of the given shape from a seeded stream.
pub fn uniform_noise(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random::<f32>())
}

/// Clamps a probability node into `[0, 1]` so rounding in the renormalization
/// can never trip the binarizer's range check.
fn clamp_unit(g: &mut Graph, p: Var) -> Var {
    let lower = g.leaky_relu(p, 0.0);
    let neg = g.scale(lower, -1.0);
    let headroom = g.add_scalar(neg, 1.0);
    let headroom = g.leaky_relu(headroom, 0.0);
    let neg = g.scale(headroom, -1.0);
    g.add_scalar(neg, 1.0)
}

/// One stochastic draw `U = 1{z < P}` on the graph with straight-through
/// gradients to `P`.
pub fn sample_mask_on_graph(g: &mut Graph, p: Var, seed: u64) -> Result<Var> {
    let z = uniform_noise(g.shape(p), seed);
    let p = clamp_unit(g, p);
    Ok(g.straight_through(p, &z)?)
}

/// Value-level single draw.
pub fn sample_mask(p: &Tensor, seed: u64) -> Result<Tensor> {
    let mut g = Graph::new();
    let pv = g.constant(p.clone());
    let u = sample_mask_on_graph(&mut g, pv, seed)?;
    Ok(g.value(u).clone())
}

/// Indicator `(ky, kx)` of the central `acs x acs` block (wrapped around DC);
/// `include_dc` adds the DC bin even when `acs == 0`.
pub fn forced_region(height: usize, width: usize, acs: usize, include_dc: bool) -> Tensor {
    let half = acs as i64 / 2;
    let inside = |f: i64| f >= -half && f < acs as i64 - half;
    Tensor::from_fn(&[height, width], |i| {
        let (ky, kx) = (signed_freq(i / width, height), signed_freq(i % width, width));
        let dc = include_dc && ky == 0 && kx == 0;
        if dc || (acs > 0 && inside(ky) && inside(kx)) {
            1.0
        } else {
            0.0
        }
    })
}

/// `U (1 - R) + R`: sets every bin of the region `R` (`(ky, kx)`) to one.
fn force_region(g: &mut Graph, u: Var, region: &Tensor) -> Result<Var> {
    let shape = g.shape(u).to_vec();
    let keep = region.map(|r| 1.0 - r).reshape(&[1, shape[1], shape[2]])?;
    let keep = g.constant(keep);
    let keep = g.expand(keep, &shape)?;
    let add = g.constant(region.clone().reshape(&[1, shape[1], shape[2]])?);
    let add = g.expand(add, &shape)?;
    let kept = g.mul(u, keep)?;
    Ok(g.add(kept, add)?)
}

/// Radial power-law variable-density mask `(ky, kx)` with exactly
/// `round(target_ratio * H * W)` samples: the ACS block (and DC) first, the
/// rest drawn without replacement with weights `(1 + |k| / k_max)^-decay`.
pub fn manual_variable_density(
    height: usize,
    width: usize,
    target_ratio: f32,
    decay_power: f32,
    acs_lines: usize,
    seed: u64,
) -> Result<Tensor> {
    check_ratio(target_ratio)?;
    if acs_lines > height.min(width) {
        return invalid(format!("ACS block of {acs_lines} lines does not fit {height}x{width}"));
    }
    let n = height * width;
    let budget = (target_ratio as f64 * n as f64).round() as usize;
    let mut mask = forced_region(height, width, acs_lines, true);
    let forced = mask.data().iter().filter(|&&v| v == 1.0).count();
    if forced > budget {
        return invalid(format!(
            "ACS region holds {forced} samples but the {target_ratio} budget is {budget}"
        ));
    }
    let k_max = ((height as f64 / 2.0).powi(2) + (width as f64 / 2.0).powi(2)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Weighted sampling without replacement: keep the largest ln(u) / weight keys.
    let mut keys: Vec<(f64, usize)> = (0..n)
        .filter(|&i| mask.data()[i] == 0.0)
        .map(|i| {
            let ky = signed_freq(i / width, height) as f64;
            let kx = signed_freq(i % width, width) as f64;
            let weight = (1.0 + (ky * ky + kx * kx).sqrt() / k_max).powf(-(decay_power as f64));
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            (u.ln() / weight, i)
        })
        .collect();
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let data = mask.data_mut();
    for &(_, i) in keys.iter().take(budget - forced) {
        data[i] = 1.0;
    }
    Ok(mask)
}

/// Sampling state for one reconstruction model. Learned modes keep their
/// weights `(rows, ky, kx)` (`rows` is 1 for the shared mode); once frozen, or
/// for the manual mode, fixed masks `(echo, ky, kx)` are used instead.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPattern {
    mode: SamplingMode,
    n_echoes: usize,
    height: usize,
    width: usize,
    target_ratio: f32,
    slope: f32,
    force_dc: bool,
    acs_lines: usize,
    weights: Option<Tensor>,
    fixed_masks: Option<Tensor>,
}

impl SamplingPattern {
    /// Learnable pattern with weights drawn i.i.d. uniform in `[-0.5, 0.5]`.
    pub fn learned(
        mode: SamplingMode,
        n_echoes: usize,
        height: usize,
        width: usize,
        target_ratio: f32,
        seed: u64,
    ) -> Result<Self> {
        check_ratio(target_ratio)?;
        let rows = match mode {
            SamplingMode::SpoSingle => 1,
            SamplingMode::SpoMulti => n_echoes,
            SamplingMode::Manual => return invalid("manual patterns have no learnable weights"),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = Tensor::from_fn(&[rows, height, width], |_| rng.random_range(-0.5..=0.5));
        Ok(SamplingPattern {
            mode,
            n_echoes,
            height,
            width,
            target_ratio,
            slope: DEFAULT_SLOPE,
            force_dc: true,
            acs_lines: 0,
            weights: Some(weights),
            fixed_masks: None,
        })
    }

    /// Fixed pattern reusing one `(ky, kx)` mask for every echo.
    pub fn manual(mask: &Tensor, n_echoes: usize) -> Result<Self> {
        let s = mask.shape();
        if s.len() != 2 {
            return invalid(format!("manual mask must be (ky, kx), got {s:?}"));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return invalid("mask entries must be 0 or 1");
        }
        let (h, w) = (s[0], s[1]);
        let ratio = mask.sum() / (h * w) as f32;
        let masks = Tensor::from_fn(&[n_echoes, h, w], |i| mask.data()[i % (h * w)]);
        Ok(SamplingPattern {
            mode: SamplingMode::Manual,
            n_echoes,
            height: h,
            width: w,
            target_ratio: ratio,
            slope: DEFAULT_SLOPE,
            force_dc: false,
            acs_lines: 0,
            weights: None,
            fixed_masks: Some(masks),
        })
    }

    /// Restores a pattern from stored parts (checkpoints).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        mode: SamplingMode,
        n_echoes: usize,
        target_ratio: f32,
        slope: f32,
        force_dc: bool,
        acs_lines: usize,
        weights: Option<Tensor>,
        fixed_masks: Option<Tensor>,
    ) -> Result<Self> {
        let shape = match (&weights, &fixed_masks) {
            (_, Some(m)) => m.shape().to_vec(),
            (Some(w), None) => w.shape().to_vec(),
            (None, None) => return invalid("pattern needs weights or fixed masks"),
        };
        if shape.len() != 3 {
            return invalid(format!("pattern arrays must be rank 3, got {shape:?}"));
        }
        let p = SamplingPattern {
            mode,
            n_echoes,
            height: shape[1],
            width: shape[2],
            target_ratio,
            slope,
            force_dc,
            acs_lines,
            weights,
            fixed_masks,
        };
        if let Some(w) = &p.weights {
            if w.shape() != [p.weight_rows(), p.height, p.width] {
                return invalid(format!("weights shape {:?} inconsistent with mode", w.shape()));
            }
        }
        if let Some(m) = &p.fixed_masks {
            if m.shape() != [n_echoes, p.height, p.width] {
                return invalid(format!("mask shape {:?} inconsistent with {n_echoes} echoes", m.shape()));
            }
        }
        Ok(p)
    }

    pub fn with_slope(mut self, slope: f32) -> Result<Self> {
        if !(slope > 0.0) {
            return invalid(format!("sigmoid slope must be positive, got {slope}"));
        }
        self.slope = slope;
        Ok(self)
    }

    pub fn with_forced(mut self, force_dc: bool, acs_lines: usize) -> Self {
        self.force_dc = force_dc;
        self.acs_lines = acs_lines;
        self
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    pub fn n_echoes(&self) -> usize {
        self.n_echoes
    }

    pub fn target_ratio(&self) -> f32 {
        self.target_ratio
    }

    pub fn slope(&self) -> f32 {
        self.slope
    }

    pub fn force_dc(&self) -> bool {
        self.force_dc
    }

    pub fn acs_lines(&self) -> usize {
        self.acs_lines
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn weight_rows(&self) -> usize {
        if self.mode == SamplingMode::SpoSingle {
            1
        } else {
            self.n_echoes
        }
    }

    pub fn weights(&self) -> Option<&Tensor> {
        self.weights.as_ref()
    }

    pub fn weights_mut(&mut self) -> Option<&mut Tensor> {
        self.weights.as_mut()
    }

    pub fn fixed_masks(&self) -> Option<&Tensor> {
        self.fixed_masks.as_ref()
    }

    /// True when masks no longer depend on the weights.
    pub fn is_fixed(&self) -> bool {
        self.fixed_masks.is_some()
    }

    /// Renormalized probabilities `(rows, ky, kx)`.
    pub fn probabilities(&self) -> Result<Tensor> {
        match &self.weights {
            Some(w) => probabilities(w, self.slope, self.target_ratio),
            None => invalid("pattern has no learnable weights"),
        }
    }

    /// Masks `(echo, ky, kx)` on the graph. `weights` must be the graph node
    /// holding this pattern's weights when the pattern is learnable and not
    /// frozen; fixed patterns ignore it and `seed`.
    pub fn masks_on_graph(&self, g: &mut Graph, weights: Option<Var>, seed: u64) -> Result<Var> {
        if let Some(m) = &self.fixed_masks {
            return Ok(g.constant(m.clone()));
        }
        let Some(w) = weights else {
            return invalid("learnable pattern needs its weight node");
        };
        if g.shape(w) != [self.weight_rows(), self.height, self.width] {
            return invalid(format!("weight node shape {:?} does not match pattern", g.shape(w)));
        }
        let p = weights_to_probabilities(g, w, self.slope, self.target_ratio)?;
        let mut u = sample_mask_on_graph(g, p, seed)?;
        if self.force_dc || self.acs_lines > 0 {
            let region = forced_region(self.height, self.width, self.acs_lines, self.force_dc);
            u = force_region(g, u, &region)?;
        }
        if self.mode == SamplingMode::SpoSingle {
            u = g.expand(u, &[self.n_echoes, self.height, self.width])?;
        }
        Ok(u)
    }

    /// One draw of the masks `(echo, ky, kx)` as values.
    pub fn sample(&self, seed: u64) -> Result<Tensor> {
        let mut g = Graph::new();
        let w = self.weights.clone().map(|w| g.constant(w));
        let u = self.masks_on_graph(&mut g, w, seed)?;
        Ok(g.value(u).clone())
    }

    /// Draws one set of masks and fixes them; weights are kept for export.
    pub fn freeze(&self, seed: u64) -> Result<SamplingPattern> {
        let masks = self.sample(seed)?;
        Ok(SamplingPattern {
            fixed_masks: Some(masks),
            ..self.clone()
        })
    }
}

/// Moves DC from `[0, 0]` to the image center for display.
pub fn fftshift(plane: &Tensor) -> Result<Tensor> {
    let s = plane.shape();
    if s.len() != 2 {
        return invalid(format!("fftshift expects a 2D plane, got {s:?}"));
    }
    let (h, w) = (s[0], s[1]);
    Ok(Tensor::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        plane.data()[((y + h.div_ceil(2)) % h) * w + (x + w.div_ceil(2)) % w]
    }))
}
