//! Same-padded 2D cross-correlation kernels.

use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeometry {
    fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Output rows/cols touched by tap `(dy, dx)` and the matching input offset.
    #[inline]
    fn span(&self, dy: usize, dx: usize) -> (usize, usize, usize, usize) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let y0 = ph.saturating_sub(dy);
        let y1 = (self.height + ph).saturating_sub(dy).min(self.height);
        let x0 = pw.saturating_sub(dx);
        let x1 = (self.width + pw).saturating_sub(dx).min(self.width);
        (y0, y1, x0, x1)
    }
}

pub fn forward(input: &[f32], kernel: &[f32], bias: Option<&[f32]>, g: ConvGeometry) -> Vec<f32> {
    let plane = g.plane();
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let mut out = vec![0.0f32; g.c_out * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(co, o)| {
        if let Some(b) = bias {
            o.fill(b[co]);
        }
        for ci in 0..g.c_in {
            let src = &input[ci * plane..(ci + 1) * plane];
            for dy in 0..g.kh {
                for dx in 0..g.kw {
                    let wgt = kernel[((co * g.c_in + ci) * g.kh + dy) * g.kw + dx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let (y0, y1, x0, x1) = g.span(dy, dx);
                    for y in y0..y1 {
                        let iy = y + dy - ph;
                        let orow = &mut o[y * g.width + x0..y * g.width + x1];
                        let irow = &src[iy * g.width + x0 + dx - pw..iy * g.width + x1 + dx - pw];
                        for (a, &b) in orow.iter_mut().zip(irow) {
                            *a += wgt * b;
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn backward_input(kernel: &[f32], grad_out: &[f32], g: ConvGeometry) -> Vec<f32> {
    let plane = g.plane();
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let mut gin = vec![0.0f32; g.c_in * plane];
    gin.par_chunks_mut(plane).enumerate().for_each(|(ci, gi)| {
        for co in 0..g.c_out {
            let go = &grad_out[co * plane..(co + 1) * plane];
            for dy in 0..g.kh {
                for dx in 0..g.kw {
                    let wgt = kernel[((co * g.c_in + ci) * g.kh + dy) * g.kw + dx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let (y0, y1, x0, x1) = g.span(dy, dx);
                    for y in y0..y1 {
                        let iy = y + dy - ph;
                        let grow = &go[y * g.width + x0..y * g.width + x1];
                        let irow = &mut gi[iy * g.width + x0 + dx - pw..iy * g.width + x1 + dx - pw];
                        for (a, &b) in irow.iter_mut().zip(grow) {
                            *a += wgt * b;
                        }
                    }
                }
            }
        }
    });
    gin
}

pub fn backward_kernel(input: &[f32], grad_out: &[f32], g: ConvGeometry) -> Vec<f32> {
    let plane = g.plane();
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let per_out = g.c_in * g.kh * g.kw;
    let mut gk = vec![0.0f32; g.c_out * per_out];
    gk.par_chunks_mut(per_out).enumerate().for_each(|(co, gkc)| {
        let go = &grad_out[co * plane..(co + 1) * plane];
        for ci in 0..g.c_in {
            let src = &input[ci * plane..(ci + 1) * plane];
            for dy in 0..g.kh {
                for dx in 0..g.kw {
                    let (y0, y1, x0, x1) = g.span(dy, dx);
                    let mut acc = 0.0f32;
                    for y in y0..y1 {
                        let iy = y + dy - ph;
                        let grow = &go[y * g.width + x0..y * g.width + x1];
                        let irow = &src[iy * g.width + x0 + dx - pw..iy * g.width + x1 + dx - pw];
                        acc += grow.iter().zip(irow).map(|(&a, &b)| a * b).sum::<f32>();
                    }
                    gkc[(ci * g.kh + dy) * g.kw + dx] = acc;
                }
            }
        }
    });
    gk
}

pub fn backward_bias(grad_out: &[f32], g: ConvGeometry) -> Vec<f32> {
    grad_out
        .chunks(g.plane())
        .map(|c| c.iter().sum())
        .collect()
}
