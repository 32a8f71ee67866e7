//! Multi-coil Cartesian encoding `b_jk = U_j F (E_k s_j)`, its adjoint and
//! the regularized normal operator used by the data-consistency solve.
//!
//! Echoes never mix: every operator here acts on each echo independently.

use megre_autodiff::{CVar, ComplexTensor, Graph, Tensor, Var};

use crate::data::{CoilSensitivities, MultiEchoImage};
use crate::error::{invalid, Result};

/// Encoding operator bound to one graph: coil maps and masks pre-broadcast
/// to `(echo, coil, y, x)` so repeated applications inside CG stay cheap.
#[derive(Clone, Copy, Debug)]
pub struct EncodingOp {
    coils: CVar,
    mask: Var,
    n_echoes: usize,
    n_coils: usize,
    height: usize,
    width: usize,
}

impl EncodingOp {
    /// `mask` is a `(echo, ky, kx)` node; it may carry gradients.
    pub fn new(g: &mut Graph, coils: &CoilSensitivities, mask: Var) -> Result<Self> {
        let ms = g.shape(mask).to_vec();
        let (c, h, w) = (coils.n_coils(), coils.height(), coils.width());
        if ms.len() != 3 || ms[1] != h || ms[2] != w {
            return invalid(format!(
                "mask shape {ms:?} incompatible with coil maps ({c}, {h}, {w})"
            ));
        }
        let e = ms[0];
        let full = [e, c, h, w];
        let maps = g.complex_constant(coils.tensor().clone().reshape(&[1, c, h, w])?);
        let coils = g.cexpand(maps, &full)?;
        let m = g.reshape(mask, &[e, 1, h, w])?;
        let mask = g.expand(m, &full)?;
        Ok(EncodingOp {
            coils,
            mask,
            n_echoes: e,
            n_coils: c,
            height: h,
            width: w,
        })
    }

    pub fn n_echoes(&self) -> usize {
        self.n_echoes
    }

    fn image_shape(&self) -> [usize; 3] {
        [self.n_echoes, self.height, self.width]
    }

    fn check_image(&self, g: &Graph, s: CVar) -> Result<()> {
        if g.shape(s.re) != self.image_shape() {
            return invalid(format!(
                "image shape {:?} does not match operator {:?}",
                g.shape(s.re),
                self.image_shape()
            ));
        }
        Ok(())
    }

    /// Applies the sampling mask to `(echo, coil, ky, kx)` data.
    pub fn apply_mask(&self, g: &mut Graph, k: CVar) -> Result<CVar> {
        Ok(g.cmul_real(k, self.mask)?)
    }

    pub fn forward(&self, g: &mut Graph, s: CVar) -> Result<CVar> {
        self.check_image(g, s)?;
        let full = [self.n_echoes, self.n_coils, self.height, self.width];
        let s4 = g.creshape(s, &[self.n_echoes, 1, self.height, self.width])?;
        let s4 = g.cexpand(s4, &full)?;
        let coil_images = g.cmul(self.coils, s4)?;
        let k = g.fft2(coil_images)?;
        self.apply_mask(g, k)
    }

    pub fn adjoint(&self, g: &mut Graph, b: CVar) -> Result<CVar> {
        let full = [self.n_echoes, self.n_coils, self.height, self.width];
        if g.shape(b.re) != full {
            return invalid(format!(
                "k-space shape {:?} does not match operator {full:?}",
                g.shape(b.re)
            ));
        }
        let masked = self.apply_mask(g, b)?;
        let coil_images = g.ifft2(masked)?;
        let weighted = g.cmul_conj(self.coils, coil_images)?;
        Ok(g.csum_axis(weighted, 1)?)
    }

    /// `(A^H A + (rho/2) I) s` where `half_rho` is a one-element node holding `rho/2`.
    pub fn normal(&self, g: &mut Graph, s: CVar, half_rho: Var) -> Result<CVar> {
        let k = self.forward(g, s)?;
        let aha = self.adjoint(g, k)?;
        let reg = g.crow_scale(s, half_rho)?;
        Ok(g.cadd(aha, reg)?)
    }
}

fn with_operator<T>(
    coils: &CoilSensitivities,
    masks: &Tensor,
    f: impl FnOnce(&mut Graph, &EncodingOp) -> Result<T>,
) -> Result<T> {
    let mut g = Graph::new();
    let m = g.constant(masks.clone());
    let op = EncodingOp::new(&mut g, coils, m)?;
    f(&mut g, &op)
}

/// Noiseless encoding, `(echo, coil, ky, kx)`.
pub fn encode(
    s: &MultiEchoImage,
    coils: &CoilSensitivities,
    masks: &Tensor,
) -> Result<ComplexTensor> {
    with_operator(coils, masks, |g, op| {
        let x = g.complex_constant(s.tensor().clone());
        let k = op.forward(g, x)?;
        Ok(g.complex_value(k))
    })
}

/// `sum_k conj(E_k) F^-1 (U_j b_jk)`; the zero-filled reconstruction of measured data.
pub fn adjoint(
    b: &ComplexTensor,
    coils: &CoilSensitivities,
    masks: &Tensor,
) -> Result<MultiEchoImage> {
    with_operator(coils, masks, |g, op| {
        let x = g.complex_constant(b.clone());
        let s = op.adjoint(g, x)?;
        MultiEchoImage::new(g.complex_value(s))
    })
}

pub fn normal_op(
    s: &MultiEchoImage,
    coils: &CoilSensitivities,
    masks: &Tensor,
    rho: f32,
) -> Result<MultiEchoImage> {
    if rho < 0.0 || !rho.is_finite() {
        return invalid(format!("penalty rho must be non-negative, got {rho}"));
    }
    with_operator(coils, masks, |g, op| {
        let x = g.complex_constant(s.tensor().clone());
        let half = g.constant(Tensor::scalar(rho / 2.0));
        let y = op.normal(g, x, half)?;
        MultiEchoImage::new(g.complex_value(y))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_coil(h: usize, w: usize) -> CoilSensitivities {
        CoilSensitivities::new(ComplexTensor::from_real(Tensor::full(&[1, h, w], 1.0))).unwrap()
    }

    fn ramp(e: usize, h: usize, w: usize) -> MultiEchoImage {
        MultiEchoImage::new(ComplexTensor::from_fn(&[e, h, w], |i| {
            ((i % 7) as f32 * 0.3, (i % 5) as f32 * -0.2)
        }))
        .unwrap()
    }

    #[test]
    fn full_mask_single_coil_is_fft() {
        let s = ramp(2, 4, 4);
        let k = encode(&s, &unit_coil(4, 4), &Tensor::full(&[2, 4, 4], 1.0)).unwrap();
        let direct = megre_autodiff::fft::fft2(s.tensor()).unwrap();
        let diff = k.reshape(&[2, 4, 4]).unwrap().sub(&direct).unwrap().norm();
        assert!(diff < 1e-6);
    }

    #[test]
    fn zero_mask_gives_zero() {
        let s = ramp(2, 4, 4);
        let k = encode(&s, &unit_coil(4, 4), &Tensor::zeros(&[2, 4, 4])).unwrap();
        assert_eq!(k.norm(), 0.0);
        let back = adjoint(&ComplexTensor::zeros(&[2, 1, 4, 4]), &unit_coil(4, 4), &Tensor::full(&[2, 4, 4], 1.0)).unwrap();
        assert_eq!(back.tensor().norm(), 0.0);
    }

    #[test]
    fn normal_op_zero_mask_is_half_rho() {
        let s = ramp(1, 4, 4);
        let y = normal_op(&s, &unit_coil(4, 4), &Tensor::zeros(&[1, 4, 4]), 2.0).unwrap();
        assert!(y.tensor().sub(s.tensor()).unwrap().norm() < 1e-6);
        assert!(normal_op(&s, &unit_coil(4, 4), &Tensor::zeros(&[1, 4, 4]), -1.0).is_err());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let s = ramp(2, 4, 4);
        assert!(encode(&s, &unit_coil(4, 4), &Tensor::full(&[3, 4, 4], 1.0)).is_err());
        assert!(encode(&s, &unit_coil(8, 8), &Tensor::full(&[2, 4, 4], 1.0)).is_err());
    }
}
