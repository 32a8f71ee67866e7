use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Complex tensor stored as a pair of real planes of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    re: Tensor,
    im: Tensor,
}

impl ComplexTensor {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "complex",
                lhs: re.shape().to_vec(),
                rhs: im.shape().to_vec(),
            });
        }
        Ok(ComplexTensor { re, im })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        ComplexTensor {
            re: Tensor::zeros(shape),
            im: Tensor::zeros(shape),
        }
    }

    pub fn from_real(re: Tensor) -> Self {
        let im = Tensor::zeros(re.shape());
        ComplexTensor { re, im }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> (f32, f32)) -> Self {
        let mut re = Tensor::zeros(shape);
        let mut im = Tensor::zeros(shape);
        for (i, (r, m)) in re
            .data_mut()
            .iter_mut()
            .zip(im.data_mut().iter_mut())
            .enumerate()
        {
            (*r, *m) = f(i);
        }
        ComplexTensor { re, im }
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    pub fn numel(&self) -> usize {
        self.re.numel()
    }

    pub fn re(&self) -> &Tensor {
        &self.re
    }

    pub fn im(&self) -> &Tensor {
        &self.im
    }

    pub fn parts_mut(&mut self) -> (&mut [f32], &mut [f32]) {
        (self.re.data_mut(), self.im.data_mut())
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.re, self.im)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Ok(ComplexTensor {
            re: self.re.reshape(shape)?,
            im: self.im.reshape(shape)?,
        })
    }

    /// Real part of the Hermitian inner product `<self, other> = sum conj(self) * other`.
    pub fn dot_re(&self, other: &ComplexTensor) -> Result<f64> {
        Ok(self.re.dot(&other.re)? + self.im.dot(&other.im)?)
    }

    /// Hermitian inner product `sum conj(self) * other` as `(re, im)`.
    pub fn inner(&self, other: &ComplexTensor) -> Result<(f64, f64)> {
        self.re.expect_same_shape(&other.re, "inner")?;
        let (mut acc_re, mut acc_im) = (0.0f64, 0.0f64);
        for i in 0..self.numel() {
            let (a, b) = (self.re.data()[i] as f64, self.im.data()[i] as f64);
            let (c, d) = (other.re.data()[i] as f64, other.im.data()[i] as f64);
            acc_re += a * c + b * d;
            acc_im += a * d - b * c;
        }
        Ok((acc_re, acc_im))
    }

    pub fn norm(&self) -> f64 {
        (self.re.norm().powi(2) + self.im.norm().powi(2)).sqrt()
    }

    pub fn abs(&self) -> Tensor {
        let mut out = Tensor::zeros(self.shape());
        for (o, (&r, &m)) in out
            .data_mut()
            .iter_mut()
            .zip(self.re.data().iter().zip(self.im.data()))
        {
            *o = r.hypot(m);
        }
        out
    }

    pub fn scale(&self, a: f32) -> ComplexTensor {
        ComplexTensor {
            re: self.re.map(|v| v * a),
            im: self.im.map(|v| v * a),
        }
    }

    pub fn sub(&self, other: &ComplexTensor) -> Result<ComplexTensor> {
        Ok(ComplexTensor {
            re: self.re.zip_with(&other.re, |a, b| a - b)?,
            im: self.im.zip_with(&other.im, |a, b| a - b)?,
        })
    }

    pub fn add(&self, other: &ComplexTensor) -> Result<ComplexTensor> {
        Ok(ComplexTensor {
            re: self.re.zip_with(&other.re, |a, b| a + b)?,
            im: self.im.zip_with(&other.im, |a, b| a + b)?,
        })
    }

    pub fn index0(&self, index: usize) -> Result<ComplexTensor> {
        Ok(ComplexTensor {
            re: self.re.index0(index)?,
            im: self.im.index0(index)?,
        })
    }

    pub fn stack(parts: &[ComplexTensor]) -> Result<ComplexTensor> {
        let re: Vec<Tensor> = parts.iter().map(|p| p.re.clone()).collect();
        let im: Vec<Tensor> = parts.iter().map(|p| p.im.clone()).collect();
        Ok(ComplexTensor {
            re: Tensor::stack(&re)?,
            im: Tensor::stack(&im)?,
        })
    }
}
