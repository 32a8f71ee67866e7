//! Differentiable SSIM training loss, `sum_k sum_j sum_{re,im} (1 - SSIM)`.

use megre_autodiff::{CVar, Graph, Tensor, Var};

use crate::data::MultiEchoImage;
use crate::error::{invalid, Result};
use crate::metrics::{gaussian_window, ssim_constants, SSIM_SIGMA};

/// Smallest dynamic range used for a label channel (guards flat channels).
pub const MIN_DYNAMIC_RANGE: f32 = 1e-3;

fn window_kernel(window: usize) -> Result<Tensor> {
    let k: Vec<f32> = gaussian_window(window, SSIM_SIGMA).into_iter().map(|v| v as f32).collect();
    Ok(Tensor::new(vec![1, 1, window, window], k)?)
}

/// Mean SSIM between a `(1, H, W)` node and a constant image of the same
/// shape, over the positions where the window fits entirely. Variances are
/// clamped at zero.
pub fn ssim_on_graph(g: &mut Graph, x: Var, y: &Tensor, window: usize, dynamic_range: f32) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[0] != 1 || y.shape() != shape.as_slice() {
        return invalid(format!("ssim_on_graph expects matching (1, H, W) images, got {shape:?} and {:?}", y.shape()));
    }
    let (h, w) = (shape[1], shape[2]);
    if window == 0 || window.is_multiple_of(2) || window > h || window > w {
        return invalid(format!("SSIM window {window} does not fit a {h}x{w} image"));
    }
    if !(dynamic_range > 0.0) {
        return invalid(format!("dynamic range must be positive, got {dynamic_range}"));
    }
    let kernel = g.constant(window_kernel(window)?);
    let r = (window - 1) / 2;
    let (oh, ow) = (h - window + 1, w - window + 1);
    let blur = |g: &mut Graph, v: Var| -> Result<Var> {
        let c = g.conv2d(v, kernel, None)?;
        Ok(g.crop2d(c, r, r, oh, ow)?)
    };
    let yc = g.constant(y.clone());
    let xx = g.mul(x, x)?;
    let yy = g.mul(yc, yc)?;
    let xy = g.mul(x, yc)?;
    let mx = blur(g, x)?;
    let my = blur(g, yc)?;
    let exx = blur(g, xx)?;
    let eyy = blur(g, yy)?;
    let exy = blur(g, xy)?;
    let mx2 = g.mul(mx, mx)?;
    let my2 = g.mul(my, my)?;
    let mxy = g.mul(mx, my)?;
    let vx = g.sub(exx, mx2)?;
    let vx = g.leaky_relu(vx, 0.0);
    let vy = g.sub(eyy, my2)?;
    let vy = g.leaky_relu(vy, 0.0);
    let cov = g.sub(exy, mxy)?;
    let (c1, c2) = ssim_constants(dynamic_range as f64);
    let (c1, c2) = (c1 as f32, c2 as f32);
    let l_num = g.scale(mxy, 2.0);
    let l_num = g.add_scalar(l_num, c1);
    let c_num = g.scale(cov, 2.0);
    let c_num = g.add_scalar(c_num, c2);
    let l_den = g.add(mx2, my2)?;
    let l_den = g.add_scalar(l_den, c1);
    let c_den = g.add(vx, vy)?;
    let c_den = g.add_scalar(c_den, c2);
    let num = g.mul(l_num, c_num)?;
    let den = g.mul(l_den, c_den)?;
    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

fn channel_range(t: &Tensor) -> f32 {
    let (lo, hi) = t.data().iter().fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    (hi - lo).max(MIN_DYNAMIC_RANGE)
}

/// Per-channel SSIM loss summed over unrolls, echoes and real/imaginary parts.
pub fn training_loss(g: &mut Graph, iterates: &[CVar], label: &MultiEchoImage, window: usize) -> Result<Var> {
    if iterates.is_empty() {
        return invalid("training loss needs at least one iterate");
    }
    let (n, h, w) = (label.n_echoes(), label.height(), label.width());
    let mut channels = Vec::with_capacity(2 * n);
    for j in 0..n {
        for part in [label.tensor().re(), label.tensor().im()] {
            let c = part.index0(j)?.reshape(&[1, h, w])?;
            let range = channel_range(&c);
            channels.push((c, range));
        }
    }
    let mut terms = Vec::with_capacity(iterates.len() * 2 * n);
    for &it in iterates {
        if g.shape(it.re) != [n, h, w] {
            return invalid(format!("iterate shape {:?} does not match label {:?}", g.shape(it.re), [n, h, w]));
        }
        for j in 0..n {
            for (p, part) in [it.re, it.im].into_iter().enumerate() {
                let x = g.slice0(part, j, j + 1)?;
                let (y, range) = &channels[2 * j + p];
                let s = ssim_on_graph(g, x, y, window, *range)?;
                let neg = g.scale(s, -1.0);
                terms.push(g.add_scalar(neg, 1.0));
            }
        }
    }
    let stacked = g.concat0(&terms)?;
    Ok(g.sum(stacked))
}
