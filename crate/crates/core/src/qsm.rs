//! Downstream susceptibility mapping: per-voxel nonlinear fit of the
//! multi-echo signal model for the field map, then closed-form Tikhonov
//! dipole inversion.

use megre_autodiff::fft::{fft2, ifft2};
use megre_autodiff::{ComplexTensor, Tensor};
use nalgebra::{Matrix4, Vector4};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MultiEchoImage;
use crate::error::{invalid, Result};
use crate::sampling::signed_freq;

/// Unknowns per voxel: `m0`, `R2*`, `phi0`, `f`.
pub const N_PARAMS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    pub max_iters: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub tol: f64,
    /// Voxels whose first-echo magnitude is below this are skipped.
    pub magnitude_threshold: f64,
    pub initial_lambda: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            max_iters: 100,
            tol: 1e-12,
            magnitude_threshold: 1e-3,
            initial_lambda: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VoxelStatus {
    Converged,
    MaxIters,
    /// Outside the caller's mask or below the magnitude threshold.
    Skipped,
}

impl VoxelStatus {
    pub fn code(self) -> u8 {
        match self {
            VoxelStatus::Converged => 0,
            VoxelStatus::MaxIters => 1,
            VoxelStatus::Skipped => 2,
        }
    }
}

/// `(m0, r2star, phi0, field)`.
pub type SignalParams = [f64; N_PARAMS];

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelFit {
    pub params: SignalParams,
    /// Residual norm `||s - model||`.
    pub residual: f64,
    /// Half squared residual after the initial guess and after every accepted step.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub status: VoxelStatus,
}

pub fn model_signal(p: &SignalParams, t: f64) -> Complex64 {
    let [m0, r2, phi0, f] = *p;
    Complex64::from_polar(m0 * (-r2 * t).exp(), phi0 + f * t)
}

fn cost(samples: &[Complex64], tes: &[f64], p: &SignalParams) -> f64 {
    0.5 * samples
        .iter()
        .zip(tes)
        .map(|(s, &t)| (s - model_signal(p, t)).norm_sqr())
        .sum::<f64>()
}

fn wrap_phase(phi: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let w = phi - two_pi * (phi / two_pi).round();
    if w <= -std::f64::consts::PI {
        w + two_pi
    } else {
        w
    }
}

/// Log-linear magnitude fit for `(m0, R2*)`; phase of the first two echoes
/// for `(phi0, f)`.
pub fn initial_guess(samples: &[Complex64], tes: &[f64]) -> SignalParams {
    let pts: Vec<(f64, f64)> = samples
        .iter()
        .zip(tes)
        .filter(|(s, _)| s.norm() > 0.0)
        .map(|(s, &t)| (t, s.norm().ln()))
        .collect();
    let n = pts.len() as f64;
    let (m0, r2) = if pts.len() >= 2 {
        let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - ml)).sum();
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        ((ml - slope * mt).exp(), -slope)
    } else {
        (samples[0].norm(), 0.0)
    };
    let f = (samples[1] * samples[0].conj()).arg() / (tes[1] - tes[0]);
    let phi0 = wrap_phase(samples[0].arg() - f * tes[0]);
    [m0, r2, phi0, f]
}

/// Levenberg-Marquardt on the stacked real/imaginary residual of one voxel.
pub fn fit_voxel(samples: &[Complex64], tes: &[f64], settings: &FitSettings) -> Result<VoxelFit> {
    if samples.len() != tes.len() {
        return invalid(format!("{} samples but {} echo times", samples.len(), tes.len()));
    }
    if samples.len() < N_PARAMS {
        return invalid(format!("field fit needs at least {N_PARAMS} echoes, got {}", samples.len()));
    }
    let mut p = initial_guess(samples, tes);
    let mut c = cost(samples, tes, &p);
    let mut trace = vec![c];
    let mut lambda = settings.initial_lambda;
    let mut status = VoxelStatus::MaxIters;
    let mut iterations = 0;
    while iterations < settings.max_iters {
        iterations += 1;
        // J^T J and J^T r for r = s - g; dr/dp = -dg/dp.
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        for (s, &t) in samples.iter().zip(tes) {
            let unit = Complex64::from_polar((-p[1] * t).exp(), p[2] + p[3] * t);
            let g = p[0] * unit;
            let r = s - g;
            let i = Complex64::i();
            let dg = [unit, -t * g, i * g, i * t * g];
            for a in 0..N_PARAMS {
                jtr[a] -= dg[a].re * r.re + dg[a].im * r.im;
                for b in 0..N_PARAMS {
                    jtj[(a, b)] += dg[a].re * dg[b].re + dg[a].im * dg[b].im;
                }
            }
        }
        if jtr.amax() == 0.0 {
            status = VoxelStatus::Converged;
            break;
        }
        let mut accepted = false;
        while lambda < 1e16 {
            let mut damped = jtj;
            for d in 0..N_PARAMS {
                damped[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                lambda *= 10.0;
                continue;
            };
            let trial = [p[0] + step[0], p[1] + step[1], p[2] + step[2], p[3] + step[3]];
            let tc = cost(samples, tes, &trial);
            if tc < c {
                let gain = (c - tc) / c.max(f64::MIN_POSITIVE);
                p = trial;
                c = tc;
                trace.push(c);
                lambda = (lambda / 10.0).max(1e-15);
                accepted = true;
                if gain < settings.tol {
                    status = VoxelStatus::Converged;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted || status == VoxelStatus::Converged {
            // No downhill step at any damping: a (numerical) minimum.
            status = VoxelStatus::Converged;
            break;
        }
    }
    if p[0] < 0.0 {
        // Same signal with the sign folded into the phase.
        p[0] = -p[0];
        p[2] += std::f64::consts::PI;
    }
    p[2] = wrap_phase(p[2]);
    Ok(VoxelFit {
        params: p,
        residual: (2.0 * c).sqrt(),
        cost_trace: trace,
        iterations,
        status,
    })
}

/// Parameter maps `(y, x)` plus per-voxel residual norms and status.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldFitResult {
    pub m0: Tensor,
    pub r2star: Tensor,
    pub phi0: Tensor,
    pub field: Tensor,
    pub residual: Tensor,
    pub status: Vec<VoxelStatus>,
}

impl FieldFitResult {
    pub fn fitted(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.status.len()).filter(|&i| self.status[i] != VoxelStatus::Skipped)
    }

    /// Median residual norm over fitted voxels (NaN when nothing was fitted).
    pub fn median_residual(&self) -> f64 {
        let mut r: Vec<f64> = self.fitted().map(|i| self.residual.data()[i] as f64).collect();
        if r.is_empty() {
            return f64::NAN;
        }
        r.sort_by(f64::total_cmp);
        let m = r.len() / 2;
        if r.len().is_multiple_of(2) {
            0.5 * (r[m - 1] + r[m])
        } else {
            r[m]
        }
    }

    pub fn status_map(&self) -> Tensor {
        let shape = self.field.shape().to_vec();
        Tensor::new(shape, self.status.iter().map(|s| s.code() as f32).collect()).expect("one status per voxel")
    }
}

/// Fits every voxel inside `mask` (all voxels when `None`). Skipped voxels get
/// zero parameters and a NaN residual.
pub fn fit_field_lm(
    images: &MultiEchoImage,
    echo_times: &[f32],
    mask: Option<&Tensor>,
    settings: &FitSettings,
) -> Result<FieldFitResult> {
    let (n, h, w) = (images.n_echoes(), images.height(), images.width());
    if echo_times.len() != n {
        return invalid(format!("{n} echoes but {} echo times", echo_times.len()));
    }
    if n < N_PARAMS {
        return invalid(format!("field fit needs at least {N_PARAMS} echoes, got {n}"));
    }
    if echo_times.windows(2).any(|p| !(p[1] > p[0])) {
        return invalid("echo times must be strictly increasing");
    }
    if let Some(m) = mask {
        if m.shape() != [h, w] {
            return invalid(format!("mask shape {:?} does not match {h}x{w}", m.shape()));
        }
    }
    let tes: Vec<f64> = echo_times.iter().map(|&t| t as f64).collect();
    let plane = h * w;
    let (re, im) = (images.tensor().re().data(), images.tensor().im().data());
    let fits: Vec<Option<VoxelFit>> = (0..plane)
        .into_par_iter()
        .map(|v| {
            let samples: Vec<Complex64> = (0..n)
                .map(|j| Complex64::new(re[j * plane + v] as f64, im[j * plane + v] as f64))
                .collect();
            let inside = mask.is_none_or(|m| m.data()[v] != 0.0);
            if !inside || samples[0].norm() < settings.magnitude_threshold {
                return Ok(None);
            }
            fit_voxel(&samples, &tes, settings).map(Some)
        })
        .collect::<Result<_>>()?;
    let map = |f: &dyn Fn(&VoxelFit) -> f64, skipped: f32| {
        let data = fits
            .iter()
            .map(|fit| fit.as_ref().map_or(skipped, |v| f(v) as f32))
            .collect();
        Tensor::new(vec![h, w], data).expect("one value per voxel")
    };
    Ok(FieldFitResult {
        m0: map(&|v| v.params[0], 0.0),
        r2star: map(&|v| v.params[1], 0.0),
        phi0: map(&|v| v.params[2], 0.0),
        field: map(&|v| v.params[3], 0.0),
        residual: map(&|v| v.residual, f32::NAN),
        status: fits
            .iter()
            .map(|f| f.as_ref().map_or(VoxelStatus::Skipped, |v| v.status))
            .collect(),
    })
}

/// Voxel extents `(y, x, z)` and main-field direction `(y, x, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DipoleSettings {
    pub voxel_size: [f64; 3],
    pub b0_direction: [f64; 3],
    pub reg_weight: f64,
    /// Multiplies the field before inversion (unit conversion).
    pub scale: f64,
}

impl Default for DipoleSettings {
    fn default() -> Self {
        DipoleSettings {
            voxel_size: [1.0, 1.0, 1.0],
            b0_direction: [0.0, 0.0, 1.0],
            reg_weight: 1e-2,
            scale: 1.0,
        }
    }
}

/// `D(k) = 1/3 - (k . b)^2 / |k|^2` on an `h x w` grid one voxel thick
/// (so `k_z = 0`); `D(0) = 0`.
pub fn dipole_kernel(h: usize, w: usize, voxel_size: [f64; 3], b0_direction: [f64; 3]) -> Result<Vec<f64>> {
    let norm = b0_direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return invalid("B0 direction must be a non-zero vector");
    }
    if voxel_size.iter().any(|v| !(*v > 0.0)) {
        return invalid(format!("voxel size must be positive, got {voxel_size:?}"));
    }
    let b = [b0_direction[0] / norm, b0_direction[1] / norm];
    Ok((0..h * w)
        .map(|i| {
            let ky = signed_freq(i / w, h) as f64 / (h as f64 * voxel_size[0]);
            let kx = signed_freq(i % w, w) as f64 / (w as f64 * voxel_size[1]);
            let k2 = ky * ky + kx * kx;
            if k2 == 0.0 {
                0.0
            } else {
                1.0 / 3.0 - (ky * b[0] + kx * b[1]).powi(2) / k2
            }
        })
        .collect())
}

fn filter_real(map: &Tensor, filter: impl Fn(usize) -> f64) -> Result<Tensor> {
    let shape = map.shape();
    if shape.len() != 2 {
        return invalid(format!("expected a 2D map, got shape {shape:?}"));
    }
    let k = fft2(&ComplexTensor::from_real(map.clone()))?;
    let (mut re, mut im) = (k.re().clone(), k.im().clone());
    for (i, (r, m)) in re.data_mut().iter_mut().zip(im.data_mut()).enumerate() {
        let f = filter(i) as f32;
        *r *= f;
        *m *= f;
    }
    Ok(ifft2(&ComplexTensor::new(re, im)?)?.re().clone())
}

/// Field produced by susceptibility `chi`: `F^-1[D F(chi)]`.
pub fn forward_dipole(chi: &Tensor, settings: &DipoleSettings) -> Result<Tensor> {
    let (h, w) = dims(chi)?;
    let d = dipole_kernel(h, w, settings.voxel_size, settings.b0_direction)?;
    filter_real(chi, |i| d[i])
}

fn dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] => Ok((*h, *w)),
        other => invalid(format!("expected a 2D map, got shape {other:?}")),
    }
}

/// `chi = F^-1[ D F(scale * f) / (D^2 + reg) ]` (D is real, so `conj(D) = D`).
pub fn dipole_invert(field: &Tensor, settings: &DipoleSettings) -> Result<Tensor> {
    if !(settings.reg_weight > 0.0) {
        return invalid(format!("regularization weight must be positive, got {}", settings.reg_weight));
    }
    let (h, w) = dims(field)?;
    let d = dipole_kernel(h, w, settings.voxel_size, settings.b0_direction)?;
    filter_real(field, |i| settings.scale * d[i] / (d[i] * d[i] + settings.reg_weight))
}
