//! Radix-2 complex FFT over the last two axes with orthonormal scaling.
//!
//! Both directions scale by `1/sqrt(H*W)`, so the forward transform is unitary
//! and its adjoint is the inverse transform.

use rayon::prelude::*;

use crate::complex::ComplexTensor;
use crate::error::{invalid, Result};

struct Plan {
    n: usize,
    rev: Vec<usize>,
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl Plan {
    fn new(n: usize) -> Plan {
        let bits = n.trailing_zeros();
        let rev = (0..n)
            .map(|i| if n == 1 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        let (cos, sin) = (0..n / 2)
            .map(|k| {
                let a = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
                (a.cos() as f32, a.sin() as f32)
            })
            .unzip();
        Plan { n, rev, cos, sin }
    }

    /// In-place unscaled transform. `inverse` flips the twiddle sign.
    fn run(&self, re: &mut [f32], im: &mut [f32], inverse: bool) {
        let n = self.n;
        for i in 0..n {
            let j = self.rev[i];
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let sign = if inverse { -1.0 } else { 1.0 };
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let wr = self.cos[k * step];
                    let wi = sign * self.sin[k * step];
                    let (a, b) = (start + k, start + k + half);
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len <<= 1;
        }
    }
}

fn check_extents(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return invalid(format!("fft2 needs at least two axes, got {shape:?}"));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return invalid(format!("fft2 extents must be powers of two, got {h}x{w}"));
    }
    Ok((h, w))
}

/// Transforms every trailing `h x w` plane of the given buffers in place.
pub fn fft2_planes(
    re: &mut [f32],
    im: &mut [f32],
    h: usize,
    w: usize,
    inverse: bool,
) -> Result<()> {
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return invalid(format!("fft2 extents must be powers of two, got {h}x{w}"));
    }
    if re.len() != im.len() || !re.len().is_multiple_of(h * w) {
        return invalid("fft2 buffers do not hold whole planes");
    }
    let row_plan = Plan::new(w);
    let col_plan = Plan::new(h);
    let scale = 1.0 / ((h * w) as f32).sqrt();
    re.par_chunks_mut(h * w)
        .zip(im.par_chunks_mut(h * w))
        .for_each(|(pr, pi)| {
            for y in 0..h {
                row_plan.run(
                    &mut pr[y * w..(y + 1) * w],
                    &mut pi[y * w..(y + 1) * w],
                    inverse,
                );
            }
            let mut cr = vec![0.0f32; h];
            let mut ci = vec![0.0f32; h];
            for x in 0..w {
                for y in 0..h {
                    cr[y] = pr[y * w + x];
                    ci[y] = pi[y * w + x];
                }
                col_plan.run(&mut cr, &mut ci, inverse);
                for y in 0..h {
                    pr[y * w + x] = cr[y] * scale;
                    pi[y * w + x] = ci[y] * scale;
                }
            }
        });
    Ok(())
}

pub fn fft2(x: &ComplexTensor) -> Result<ComplexTensor> {
    transform(x, false)
}

pub fn ifft2(x: &ComplexTensor) -> Result<ComplexTensor> {
    transform(x, true)
}

fn transform(x: &ComplexTensor, inverse: bool) -> Result<ComplexTensor> {
    let (h, w) = check_extents(x.shape())?;
    let mut out = x.clone();
    let (re, im) = out.parts_mut();
    fft2_planes(re, im, h, w, inverse)?;
    Ok(out)
}
