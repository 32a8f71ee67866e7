//! Synthetic multi-echo ground truth from the gradient-echo signal model
//! `s_j = m0 exp(-R2* t_j) exp(i (phi0 + f t_j))`, plus analytic coil maps and
//! noisy fully sampled k-space.
//!
//! Units: time in ms, R2* in 1/ms, field in rad/ms.

use std::f64::consts::PI;
use std::str::FromStr;

use megre_autodiff::{ComplexTensor, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{CoilSensitivities, KSpaceData, MultiEchoImage};
use crate::error::{invalid, Error, Result};
use crate::forward_model;

pub const FIRST_ECHO_MS: f32 = 1.972;
pub const ECHO_SPACING_MS: f32 = 3.384;

pub const M0_RANGE: (f32, f32) = (0.0, 1.0);
pub const R2STAR_RANGE: (f32, f32) = (0.01, 0.1);
pub const FIELD_RANGE: (f32, f32) = (-0.3, 0.3);

/// Uniformly spaced echo times.
pub fn echo_times(first: f32, spacing: f32, n: usize) -> Vec<f32> {
    (0..n).map(|j| first + spacing * j as f32).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomParams {
    pub m0: Tensor,
    pub r2star: Tensor,
    pub phi0: Tensor,
    pub field: Tensor,
    pub echo_times: Vec<f32>,
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let shape = self.m0.shape();
        if shape.len() != 2 {
            return invalid(format!("parameter maps must be 2D, got {shape:?}"));
        }
        for (name, t) in [("r2star", &self.r2star), ("phi0", &self.phi0), ("field", &self.field)] {
            if t.shape() != shape {
                return invalid(format!("{name} map shape {:?} != m0 shape {shape:?}", t.shape()));
            }
        }
        if self.echo_times.len() < 2 {
            return invalid("need at least two echo times");
        }
        if self.echo_times.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("echo times must be strictly increasing");
        }
        if self.m0.data().iter().any(|&v| v < 0.0) || self.r2star.data().iter().any(|&v| v < 0.0) {
            return invalid("m0 and R2* must be non-negative");
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.m0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.m0.shape()[1]
    }
}

/// Voxel-wise evaluation of the echo signal model.
pub fn simulate_signal(params: &PhantomParams) -> Result<MultiEchoImage> {
    params.validate()?;
    let (h, w) = (params.height(), params.width());
    let plane = h * w;
    let tes = &params.echo_times;
    let images = ComplexTensor::from_fn(&[tes.len(), h, w], |i| {
        let (j, p) = (i / plane, i % plane);
        let t = tes[j] as f64;
        let mag = params.m0.data()[p] as f64 * (-(params.r2star.data()[p] as f64) * t).exp();
        let phase = params.phi0.data()[p] as f64 + params.field.data()[p] as f64 * t;
        ((mag * phase.cos()) as f32, (mag * phase.sin()) as f32)
    });
    MultiEchoImage::new(images)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    SheppLoganLike,
    RandomSmooth,
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shepp-logan-like" => Ok(PhantomKind::SheppLoganLike),
            "random-smooth" => Ok(PhantomKind::RandomSmooth),
            other => invalid(format!("unknown phantom kind `{other}`")),
        }
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

/// Smooth random field in `[0, 1]`: a few Gaussian bumps, min-max normalized.
fn smooth_field(size: usize, rng: &mut ChaCha8Rng, bumps: usize) -> Vec<f64> {
    let centers: Vec<(f64, f64, f64, f64)> = (0..bumps)
        .map(|_| {
            (
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.25..0.8),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    let mut v: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = norm_coords(i, size);
            centers
                .iter()
                .map(|&(cy, cx, s, a)| a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp())
                .sum()
        })
        .collect();
    let (lo, hi) = v.iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
    let span = (hi - lo).max(1e-12);
    v.iter_mut().for_each(|x| *x = (*x - lo) / span);
    v
}

fn norm_coords(i: usize, size: usize) -> (f64, f64) {
    let (y, x) = (i / size, i % size);
    let c = (size as f64 - 1.0) / 2.0;
    ((y as f64 - c) / (size as f64 / 2.0), (x as f64 - c) / (size as f64 / 2.0))
}

fn lerp(range: (f32, f32), t: f64) -> f32 {
    (range.0 as f64 + (range.1 - range.0) as f64 * t) as f32
}

/// Seeded parameter maps on a `size x size` grid with `n_echoes` echoes at the
/// default spacing.
pub fn make_phantom(kind: PhantomKind, size: usize, n_echoes: usize, seed: u64) -> Result<PhantomParams> {
    if !size.is_power_of_two() || size < 4 {
        return invalid(format!("phantom size must be a power of two >= 4, got {size}"));
    }
    if n_echoes < 2 {
        return invalid("need at least two echoes");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size * size;
    let (m0, r2, phi0, field) = match kind {
        PhantomKind::RandomSmooth => {
            let m = smooth_field(size, &mut rng, 6);
            let r = smooth_field(size, &mut rng, 5);
            let p = smooth_field(size, &mut rng, 3);
            let f = smooth_field(size, &mut rng, 4);
            (
                m.iter().map(|&t| lerp((0.1, 1.0), t)).collect::<Vec<_>>(),
                r.iter().map(|&t| lerp(R2STAR_RANGE, t)).collect::<Vec<_>>(),
                p.iter().map(|&t| lerp((-1.5, 1.5), t)).collect::<Vec<_>>(),
                f.iter().map(|&t| lerp((-0.25, 0.25), t)).collect::<Vec<_>>(),
            )
        }
        PhantomKind::SheppLoganLike => shepp_logan_like(size, &mut rng),
    };
    let t = |v: Vec<f32>| Tensor::new(vec![size, size], v).expect("square map");
    debug_assert_eq!(m0.len(), n);
    let params = PhantomParams {
        m0: t(m0),
        r2star: t(r2),
        phi0: t(phi0),
        field: t(field),
        echo_times: echo_times(FIRST_ECHO_MS, ECHO_SPACING_MS, n_echoes),
    };
    params.validate()?;
    Ok(params)
}

/// Head-like ellipse phantom: a bright rim, brain tissue and a handful of
/// seeded inner structures with their own relaxation and field offsets, on top
/// of a smooth background field and phase.
fn shepp_logan_like(size: usize, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>) {
    let n = size * size;
    let jitter = |rng: &mut ChaCha8Rng, a: f64| rng.random_range(-a..a);
    let head = Ellipse {
        cy: jitter(rng, 0.05),
        cx: jitter(rng, 0.05),
        ry: 0.88 + jitter(rng, 0.05),
        rx: 0.7 + jitter(rng, 0.05),
        angle: jitter(rng, 0.2),
    };
    let brain = Ellipse {
        ry: head.ry - 0.1,
        rx: head.rx - 0.1,
        ..head
    };
    let n_inner = rng.random_range(3..=6);
    let inner: Vec<(Ellipse, f32, f32, f32)> = (0..n_inner)
        .map(|_| {
            let e = Ellipse {
                cy: rng.random_range(-0.5..0.5),
                cx: rng.random_range(-0.35..0.35),
                ry: rng.random_range(0.08..0.3),
                rx: rng.random_range(0.05..0.22),
                angle: rng.random_range(-PI..PI),
            };
            (
                e,
                rng.random_range(0.3..1.0),
                rng.random_range(R2STAR_RANGE.0..R2STAR_RANGE.1),
                rng.random_range(-0.12..0.12),
            )
        })
        .collect();
    let background = smooth_field(size, rng, 3);
    let phase = smooth_field(size, rng, 2);
    let (gy, gx) = (jitter(rng, 0.05), jitter(rng, 0.05));

    let mut m0 = vec![0.0f32; n];
    let mut r2 = vec![R2STAR_RANGE.0; n];
    let mut field = vec![0.0f32; n];
    let mut phi0 = vec![0.0f32; n];
    for i in 0..n {
        let (y, x) = norm_coords(i, size);
        let mut f = 0.12 * (2.0 * background[i] - 1.0) + gy * y + gx * x;
        if head.contains(y, x) {
            if brain.contains(y, x) {
                m0[i] = 0.7;
                r2[i] = 0.025;
                for (e, m, r, df) in &inner {
                    if e.contains(y, x) {
                        m0[i] = *m;
                        r2[i] = *r;
                        f += *df as f64;
                    }
                }
            } else {
                m0[i] = 1.0;
                r2[i] = 0.08;
            }
        }
        field[i] = (f as f32).clamp(FIELD_RANGE.0, FIELD_RANGE.1);
        phi0[i] = lerp((-1.0, 1.0), phase[i]);
    }
    (m0, r2, phi0, field)
}

/// Smooth Gaussian-lobed complex maps normalized to unit root-sum-of-squares.
pub fn make_coils(n_coils: usize, size: usize, seed: u64) -> Result<CoilSensitivities> {
    if n_coils == 0 {
        return invalid("need at least one coil");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC011_5EED);
    let lobes: Vec<(f64, f64, f64, f64, f64)> = (0..n_coils)
        .map(|k| {
            let a = 2.0 * PI * k as f64 / n_coils as f64 + rng.random_range(-0.2..0.2);
            (
                1.3 * a.sin(),
                1.3 * a.cos(),
                rng.random_range(0.9..1.3),
                rng.random_range(-PI..PI),
                rng.random_range(-0.8..0.8),
            )
        })
        .collect();
    let plane = size * size;
    let mut re = vec![0.0f64; n_coils * plane];
    let mut im = vec![0.0f64; n_coils * plane];
    for (k, &(cy, cx, width, phase0, tilt)) in lobes.iter().enumerate() {
        for p in 0..plane {
            let (y, x) = norm_coords(p, size);
            let mag = (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * width * width)).exp();
            let ph = phase0 + tilt * (y * cx - x * cy);
            re[k * plane + p] = mag * ph.cos();
            im[k * plane + p] = mag * ph.sin();
        }
    }
    for p in 0..plane {
        let rss: f64 = (0..n_coils)
            .map(|k| re[k * plane + p].powi(2) + im[k * plane + p].powi(2))
            .sum::<f64>()
            .sqrt();
        for k in 0..n_coils {
            re[k * plane + p] /= rss;
            im[k * plane + p] /= rss;
        }
    }
    let t = |v: Vec<f64>| {
        Tensor::new(vec![n_coils, size, size], v.into_iter().map(|x| x as f32).collect())
    };
    CoilSensitivities::new(ComplexTensor::new(t(re)?, t(im)?)?)
}

/// `b_jk = F(E_k s_j) + n` on the full Cartesian grid; noise is complex
/// Gaussian with per-component standard deviation `noise_sigma`.
pub fn acquire_full_kspace(
    image: &MultiEchoImage,
    coils: &CoilSensitivities,
    noise_sigma: f32,
    seed: u64,
) -> Result<KSpaceData> {
    if noise_sigma < 0.0 {
        return invalid("noise sigma must be non-negative");
    }
    let masks = Tensor::full(&[image.n_echoes(), image.height(), image.width()], 1.0);
    let mut k = forward_model::encode(image, coils, &masks)?;
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0153_0153);
        let normal = Normal::new(0.0f32, noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let (re, im) = k.parts_mut();
        for (r, i) in re.iter_mut().zip(im.iter_mut()) {
            *r += normal.sample(&mut rng);
            *i += normal.sample(&mut rng);
        }
    }
    KSpaceData::new(k, masks, noise_sigma)
}
