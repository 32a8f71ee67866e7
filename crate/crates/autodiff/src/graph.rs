//! Tape of tensor operations with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order; `backward` walks it once in reverse.

use crate::complex::ComplexTensor;
use crate::conv::{self, ConvGeometry};
use crate::error::{invalid, Result, TensorError};
use crate::fft;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Complex value on a graph, carried as two real nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CVar {
    pub re: Var,
    pub im: Var,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    SafeDiv(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    RowScale(Var, Var),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    Recip(Var),
    Sigmoid(Var),
    Softplus(Var),
    LeakyRelu(Var, f32),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Fft2 {
        re: Var,
        im: Var,
        inverse: bool,
        imag_out: bool,
    },
    Reshape(Var),
    Expand(Var),
    SumAxis(Var, usize),
    Concat0(Vec<Var>),
    Slice0(Var, usize),
    Crop2d(Var, usize, usize),
    StraightThrough(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by leaf [`Var`].
///
/// Buffers are allocated lazily: a leaf that received no gradient has none.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zeros when the variable received none.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Maps each output element of a broadcast to its source element.
fn broadcast_sources(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let rank = dst.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    let mut out = Vec::with_capacity(numel(dst));
    let mut idx = vec![0usize; rank];
    for _ in 0..numel(dst) {
        out.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < dst[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err(name, va.shape(), vb.shape());
        }
        let out = va.zip_with(vb, f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Element-wise `a / b`, defined as 0 (with zero gradient) where `b == 0`.
    pub fn safe_div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            a,
            b,
            "safe_div",
            |x, y| if y == 0.0 { 0.0 } else { x / y },
            Op::SafeDiv(a, b),
        )
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, |v| 1.0 / v, Op::Recip(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        self.unary(
            x,
            move |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    /// Scales each leading-axis row of `x` by the matching entry of `s`.
    /// A one-element `s` scales the whole tensor.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        let rows = vs.numel();
        if vs.shape().len() != 1 || !(rows == 1 || vx.shape().first() == Some(&rows)) {
            return shape_err("row_scale", vx.shape(), vs.shape());
        }
        let per = vx.numel() / rows.max(1);
        let mut out = vx.clone();
        for (r, chunk) in out.data_mut().chunks_mut(per.max(1)).enumerate() {
            let c = vs.data()[r];
            chunk.iter_mut().for_each(|v| *v *= c);
        }
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::RowScale(x, s), rg))
    }

    /// Sum over all but the leading axis, giving one value per row.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let Some(&rows) = vx.shape().first() else {
            return invalid("row_sum of a rank-0 tensor");
        };
        let per = vx.numel() / rows.max(1);
        let data: Vec<f32> = vx.data().chunks(per.max(1)).map(|c| c.iter().sum()).collect();
        let out = Tensor::new(vec![rows], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::RowSum(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / v.numel() as f32;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Same-padded cross-correlation: `[C_in,H,W] * [C_out,C_in,kh,kw] -> [C_out,H,W]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 3 || sk.len() != 4 || si[0] != sk[1] {
            return shape_err("conv2d", si, sk);
        }
        if sk[2] % 2 == 0 || sk[3] % 2 == 0 {
            return invalid(format!("conv2d kernel extents must be odd, got {sk:?}"));
        }
        let geom = ConvGeometry {
            c_in: si[0],
            c_out: sk[0],
            height: si[1],
            width: si[2],
            kh: sk[2],
            kw: sk[3],
        };
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return shape_err("conv2d bias", self.shape(b), &[geom.c_out]);
            }
        }
        let out = conv::forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            geom,
        );
        let out = Tensor::new(vec![geom.c_out, geom.height, geom.width], out)?;
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Unitary 2D FFT over the last two axes.
    pub fn fft2(&mut self, x: CVar) -> Result<CVar> {
        self.fourier(x, false)
    }

    pub fn ifft2(&mut self, x: CVar) -> Result<CVar> {
        self.fourier(x, true)
    }

    fn fourier(&mut self, x: CVar, inverse: bool) -> Result<CVar> {
        let c = ComplexTensor::new(self.value(x.re).clone(), self.value(x.im).clone())?;
        let out = if inverse { fft::ifft2(&c)? } else { fft::fft2(&c)? };
        let (re, im) = out.into_parts();
        let rg = self.rg(x.re) || self.rg(x.im);
        let mk = |imag_out| Op::Fft2 {
            re: x.re,
            im: x.im,
            inverse,
            imag_out,
        };
        let ore = self.push(re, mk(false), rg);
        let oim = self.push(im, mk(true), rg);
        Ok(CVar { re: ore, im: oim })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Broadcasts size-1 axes of `x` up to `shape` (ranks must match).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        if src.len() != shape.len() || src.iter().zip(shape).any(|(&s, &d)| s != d && s != 1) {
            return shape_err("expand", &src, shape);
        }
        let map = broadcast_sources(&src, shape);
        let data = self.value(x).data();
        let out = Tensor::new(shape.to_vec(), map.iter().map(|&i| data[i]).collect())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Expand(x), rg))
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return invalid(format!("sum_axis: axis {axis} out of range for {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let s = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(s) {
                    *d += v;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SumAxis(x, axis), rg))
    }

    /// Concatenation along the leading axis.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return invalid("concat0 of zero tensors");
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return shape_err("concat0", s, &tail);
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat0(parts.to_vec()), rg))
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice0(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start >= end || end > shape[0] {
            return invalid(format!("slice0 {start}..{end} invalid for {shape:?}"));
        }
        let per: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * per..end * per].to_vec();
        let mut out_shape = shape;
        out_shape[0] = end - start;
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Slice0(x, start), rg))
    }

    /// Window `[.., top..top+h, left..left+w]` of the last two axes.
    pub fn crop2d(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || top + h > shape[r - 2] || left + w > shape[r - 1] || h == 0 || w == 0 {
            return invalid(format!("crop2d window out of range for {shape:?}"));
        }
        let (sh, sw) = (shape[r - 2], shape[r - 1]);
        let planes = numel(&shape[..r - 2]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(planes * h * w);
        for p in 0..planes {
            for y in top..top + h {
                let base = p * sh * sw + y * sw + left;
                data.extend_from_slice(&src[base..base + w]);
            }
        }
        let mut out_shape = shape;
        out_shape[r - 2] = h;
        out_shape[r - 1] = w;
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Crop2d(x, top, left), rg))
    }

    /// Binarizes `p` as `1{z < p}` with an identity (straight-through) backward.
    pub fn straight_through(&mut self, p: Var, z: &Tensor) -> Result<Var> {
        let vp = self.value(p);
        if vp.shape() != z.shape() {
            return shape_err("straight_through", vp.shape(), z.shape());
        }
        if let Some(bad) = vp.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return invalid(format!("probability {bad} outside [0, 1]"));
        }
        let out = vp.zip_with(z, |pv, zv| if zv < pv { 1.0 } else { 0.0 })?;
        let rg = self.rg(p);
        Ok(self.push(out, Op::StraightThrough(p), rg))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            ));
        }
        self.backward_from(output, &Tensor::full(self.shape(output), 1.0))
    }

    /// Reverse pass seeded with an explicit output cotangent.
    pub fn backward_from(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(output) {
            return shape_err("backward seed", seed.shape(), self.shape(output));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.data().to_vec());
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, contrib: impl FnOnce() -> Vec<f32>) {
        if !self.rg(v) {
            return;
        }
        let c = contrib();
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(c),
        }
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let val = |v: Var| self.value(v).data();
        let zip = |a: &[f32], b: &[f32], f: &dyn Fn(f32, f32) -> f32| -> Vec<f32> {
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        };
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, || g.to_vec());
                self.accumulate(grads, *b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, || g.to_vec());
                self.accumulate(grads, *b, || g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, || zip(g, val(*b), &|x, y| x * y));
                self.accumulate(grads, *b, || zip(g, val(*a), &|x, y| x * y));
            }
            Op::Div(a, b) => {
                self.accumulate(grads, *a, || zip(g, val(*b), &|x, y| x / y));
                self.accumulate(grads, *b, || {
                    g.iter()
                        .zip(out)
                        .zip(val(*b))
                        .map(|((&gv, &o), &bv)| -gv * o / bv)
                        .collect()
                });
            }
            Op::SafeDiv(a, b) => {
                self.accumulate(grads, *a, || {
                    zip(g, val(*b), &|x, y| if y == 0.0 { 0.0 } else { x / y })
                });
                self.accumulate(grads, *b, || {
                    g.iter()
                        .zip(out)
                        .zip(val(*b))
                        .map(|((&gv, &o), &bv)| if bv == 0.0 { 0.0 } else { -gv * o / bv })
                        .collect()
                });
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, || g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) => self.accumulate(grads, *x, || g.to_vec()),
            Op::RowScale(x, s) => {
                let sv = val(*s);
                let per = g.len() / sv.len().max(1);
                self.accumulate(grads, *x, || {
                    g.iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * sv[i / per.max(1)])
                        .collect()
                });
                self.accumulate(grads, *s, || {
                    g.chunks(per.max(1))
                        .zip(val(*x).chunks(per.max(1)))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                        .collect()
                });
            }
            Op::RowSum(x) => {
                let per = val(*x).len() / g.len().max(1);
                self.accumulate(grads, *x, || {
                    (0..val(*x).len()).map(|i| g[i / per.max(1)]).collect()
                });
            }
            Op::Sum(x) => self.accumulate(grads, *x, || vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                self.accumulate(grads, *x, || vec![g[0] / n as f32; n]);
            }
            Op::Recip(x) => self.accumulate(grads, *x, || zip(g, out, &|gv, o| -gv * o * o)),
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, || zip(g, out, &|gv, o| gv * o * (1.0 - o)))
            }
            Op::Softplus(x) => {
                self.accumulate(grads, *x, || zip(g, val(*x), &|gv, xv| gv * sigmoid(xv)))
            }
            Op::LeakyRelu(x, slope) => self.accumulate(grads, *x, || {
                zip(g, val(*x), &|gv, xv| if xv > 0.0 { gv } else { gv * slope })
            }),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                self.accumulate(grads, *input, || conv::backward_input(val(*kernel), g, *geom));
                self.accumulate(grads, *kernel, || conv::backward_kernel(val(*input), g, *geom));
                if let Some(b) = bias {
                    self.accumulate(grads, *b, || conv::backward_bias(g, *geom));
                }
            }
            Op::Fft2 {
                re,
                im,
                inverse,
                imag_out,
            } => {
                // Adjoint of a unitary transform is its inverse; feed the
                // cotangent into the matching real or imaginary slot.
                let shape = node.value.shape();
                let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let zeros = vec![0.0f32; g.len()];
                let (mut gr, mut gi) = if *imag_out {
                    (zeros, g.to_vec())
                } else {
                    (g.to_vec(), zeros)
                };
                fft::fft2_planes(&mut gr, &mut gi, h, w, !inverse)?;
                self.accumulate(grads, *re, || gr);
                self.accumulate(grads, *im, || gi);
            }
            Op::Reshape(x) | Op::StraightThrough(x) => self.accumulate(grads, *x, || g.to_vec()),
            Op::Expand(x) => {
                let src = self.shape(*x);
                let map = broadcast_sources(src, node.value.shape());
                self.accumulate(grads, *x, || {
                    let mut acc = vec![0.0f32; numel(src)];
                    for (&gv, &s) in g.iter().zip(&map) {
                        acc[s] += gv;
                    }
                    acc
                });
            }
            Op::SumAxis(x, axis) => {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                self.accumulate(grads, *x, || {
                    let mut acc = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        for _ in 0..len {
                            acc.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                        }
                    }
                    acc
                });
            }
            Op::Concat0(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    let slice = &g[offset..offset + n];
                    self.accumulate(grads, p, || slice.to_vec());
                    offset += n;
                }
            }
            Op::Slice0(x, start) => {
                let n = val(*x).len();
                let per: usize = node.value.shape()[1..].iter().product();
                self.accumulate(grads, *x, || {
                    let mut acc = vec![0.0f32; n];
                    acc[start * per..start * per + g.len()].copy_from_slice(g);
                    acc
                });
            }
            Op::Crop2d(x, top, left) => {
                let shape = self.shape(*x);
                let r = shape.len();
                let (sh, sw) = (shape[r - 2], shape[r - 1]);
                let os = node.value.shape();
                let (h, w) = (os[r - 2], os[r - 1]);
                let planes = numel(&shape[..r - 2]);
                self.accumulate(grads, *x, || {
                    let mut acc = vec![0.0f32; numel(shape)];
                    for p in 0..planes {
                        for y in 0..h {
                            let dst = p * sh * sw + (top + y) * sw + left;
                            acc[dst..dst + w].copy_from_slice(&g[(p * h + y) * w..(p * h + y + 1) * w]);
                        }
                    }
                    acc
                });
            }
        }
        Ok(())
    }
}

/// Complex helpers composed from the real primitives.
impl Graph {
    pub fn complex_param(&mut self, c: ComplexTensor) -> CVar {
        let (re, im) = c.into_parts();
        CVar {
            re: self.param(re),
            im: self.param(im),
        }
    }

    pub fn complex_constant(&mut self, c: ComplexTensor) -> CVar {
        let (re, im) = c.into_parts();
        CVar {
            re: self.constant(re),
            im: self.constant(im),
        }
    }

    pub fn complex_value(&self, c: CVar) -> ComplexTensor {
        ComplexTensor::new(self.value(c.re).clone(), self.value(c.im).clone())
            .expect("complex parts share a shape")
    }

    pub fn cadd(&mut self, a: CVar, b: CVar) -> Result<CVar> {
        Ok(CVar {
            re: self.add(a.re, b.re)?,
            im: self.add(a.im, b.im)?,
        })
    }

    pub fn csub(&mut self, a: CVar, b: CVar) -> Result<CVar> {
        Ok(CVar {
            re: self.sub(a.re, b.re)?,
            im: self.sub(a.im, b.im)?,
        })
    }

    /// `a * b`.
    pub fn cmul(&mut self, a: CVar, b: CVar) -> Result<CVar> {
        let rr = self.mul(a.re, b.re)?;
        let ii = self.mul(a.im, b.im)?;
        let ri = self.mul(a.re, b.im)?;
        let ir = self.mul(a.im, b.re)?;
        Ok(CVar {
            re: self.sub(rr, ii)?,
            im: self.add(ri, ir)?,
        })
    }

    /// `conj(a) * b`.
    pub fn cmul_conj(&mut self, a: CVar, b: CVar) -> Result<CVar> {
        let rr = self.mul(a.re, b.re)?;
        let ii = self.mul(a.im, b.im)?;
        let ri = self.mul(a.re, b.im)?;
        let ir = self.mul(a.im, b.re)?;
        Ok(CVar {
            re: self.add(rr, ii)?,
            im: self.sub(ri, ir)?,
        })
    }

    /// Multiplies both parts by a real tensor of the same shape.
    pub fn cmul_real(&mut self, a: CVar, r: Var) -> Result<CVar> {
        Ok(CVar {
            re: self.mul(a.re, r)?,
            im: self.mul(a.im, r)?,
        })
    }

    pub fn cscale(&mut self, a: CVar, c: f32) -> CVar {
        CVar {
            re: self.scale(a.re, c),
            im: self.scale(a.im, c),
        }
    }

    pub fn crow_scale(&mut self, a: CVar, s: Var) -> Result<CVar> {
        Ok(CVar {
            re: self.row_scale(a.re, s)?,
            im: self.row_scale(a.im, s)?,
        })
    }

    /// Per-row real part of the Hermitian inner product.
    pub fn crow_dot(&mut self, a: CVar, b: CVar) -> Result<Var> {
        let rr = self.mul(a.re, b.re)?;
        let ii = self.mul(a.im, b.im)?;
        let s = self.add(rr, ii)?;
        self.row_sum(s)
    }

    pub fn creshape(&mut self, a: CVar, shape: &[usize]) -> Result<CVar> {
        Ok(CVar {
            re: self.reshape(a.re, shape)?,
            im: self.reshape(a.im, shape)?,
        })
    }

    pub fn cexpand(&mut self, a: CVar, shape: &[usize]) -> Result<CVar> {
        Ok(CVar {
            re: self.expand(a.re, shape)?,
            im: self.expand(a.im, shape)?,
        })
    }

    pub fn csum_axis(&mut self, a: CVar, axis: usize) -> Result<CVar> {
        Ok(CVar {
            re: self.sum_axis(a.re, axis)?,
            im: self.sum_axis(a.im, axis)?,
        })
    }

    pub fn cslice0(&mut self, a: CVar, start: usize, end: usize) -> Result<CVar> {
        Ok(CVar {
            re: self.slice0(a.re, start, end)?,
            im: self.slice0(a.im, start, end)?,
        })
    }

    pub fn cconcat0(&mut self, parts: &[CVar]) -> Result<CVar> {
        let re: Vec<Var> = parts.iter().map(|p| p.re).collect();
        let im: Vec<Var> = parts.iter().map(|p| p.im).collect();
        Ok(CVar {
            re: self.concat0(&re)?,
            im: self.concat0(&im)?,
        })
    }
}
