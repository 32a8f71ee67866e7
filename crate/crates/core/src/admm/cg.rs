//! Conjugate gradient on the regularized normal equations, recorded on the
//! graph so gradients flow through every iteration.

use megre_autodiff::{CVar, Graph, Var};

use crate::error::{invalid, Result};
use crate::forward_model::EncodingOp;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgSettings {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for CgSettings {
    fn default() -> Self {
        CgSettings {
            max_iters: 8,
            tol: 1e-6,
        }
    }
}

/// Solution node plus the worst per-echo relative residual after each iteration.
#[derive(Clone, Debug)]
pub struct CgOutput {
    pub solution: CVar,
    pub residuals: Vec<f64>,
}

/// Solves `(A^H A + (rho/2) I) x = rhs` independently for every echo, starting
/// from `x = 0`. `half_rho` is a one-element node holding `rho / 2`.
pub fn cg_solve(
    g: &mut Graph,
    op: &EncodingOp,
    rhs: CVar,
    half_rho: Var,
    settings: CgSettings,
) -> Result<CgOutput> {
    let hr = g.value(half_rho);
    if hr.numel() != 1 || !(hr.data()[0] > 0.0) {
        return invalid(format!("penalty rho must be positive, got 2 * {:?}", hr.data()));
    }
    let zero = g.cscale(rhs, 0.0);
    let rows = g.shape(rhs.re)[0];
    let mut rs = g.crow_dot(rhs, rhs)?;
    let rhs_norm: Vec<f64> = g.value(rs).data().iter().map(|&v| (v as f64).sqrt()).collect();
    let rel = |g: &Graph, rs: Var| -> f64 {
        (0..rows)
            .map(|j| {
                let r = (g.value(rs).data()[j].max(0.0) as f64).sqrt();
                if rhs_norm[j] > 0.0 {
                    r / rhs_norm[j]
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max)
    };
    let mut residuals = Vec::new();
    if rel(g, rs) < settings.tol {
        return Ok(CgOutput {
            solution: zero,
            residuals,
        });
    }
    let (mut x, mut r, mut p) = (zero, rhs, rhs);
    for it in 0..settings.max_iters {
        let ap = op.normal(g, p, half_rho)?;
        let pap = g.crow_dot(p, ap)?;
        let alpha = g.safe_div(rs, pap)?;
        let step = g.crow_scale(p, alpha)?;
        x = g.cadd(x, step)?;
        let dr = g.crow_scale(ap, alpha)?;
        r = g.csub(r, dr)?;
        let rs_new = g.crow_dot(r, r)?;
        residuals.push(rel(g, rs_new));
        if residuals[it] < settings.tol || it + 1 == settings.max_iters {
            break;
        }
        let beta = g.safe_div(rs_new, rs)?;
        let carried = g.crow_scale(p, beta)?;
        p = g.cadd(r, carried)?;
        rs = rs_new;
    }
    Ok(CgOutput {
        solution: x,
        residuals,
    })
}
