//! Image and k-space containers shared across the pipeline.

use megre_autodiff::{ComplexTensor, Tensor};

use crate::error::{invalid, Result};

/// Complex image stack indexed `(echo, y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiEchoImage(ComplexTensor);

impl MultiEchoImage {
    pub fn new(images: ComplexTensor) -> Result<Self> {
        if images.shape().len() != 3 {
            return invalid(format!(
                "multi-echo image must be (echo, y, x), got {:?}",
                images.shape()
            ));
        }
        Ok(MultiEchoImage(images))
    }

    pub fn n_echoes(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &ComplexTensor {
        &self.0
    }

    pub fn into_tensor(self) -> ComplexTensor {
        self.0
    }

    /// Complex sample of echo `j` at `(y, x)`.
    pub fn at(&self, echo: usize, y: usize, x: usize) -> (f32, f32) {
        let i = (echo * self.height() + y) * self.width() + x;
        (self.0.re().data()[i], self.0.im().data()[i])
    }

    /// `|s_j|` as a `(y, x)` map.
    pub fn magnitude(&self, echo: usize) -> Tensor {
        let plane = self.height() * self.width();
        let (re, im) = (self.0.re().data(), self.0.im().data());
        Tensor::from_fn(&[self.height(), self.width()], |p| {
            let i = echo * plane + p;
            re[i].hypot(im[i])
        })
    }

    /// Root-sum-of-squares over echoes, `sqrt(sum_j |s_j|^2)`.
    pub fn echo_combined(&self) -> Tensor {
        let plane = self.height() * self.width();
        let (re, im) = (self.0.re().data(), self.0.im().data());
        Tensor::from_fn(&[self.height(), self.width()], |p| {
            (0..self.n_echoes())
                .map(|j| {
                    let i = j * plane + p;
                    (re[i] as f64).powi(2) + (im[i] as f64).powi(2)
                })
                .sum::<f64>()
                .sqrt() as f32
        })
    }
}

/// Complex receive sensitivities indexed `(coil, y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilSensitivities(ComplexTensor);

impl CoilSensitivities {
    pub fn new(maps: ComplexTensor) -> Result<Self> {
        if maps.shape().len() != 3 || maps.shape()[0] == 0 {
            return invalid(format!(
                "coil maps must be (coil, y, x), got {:?}",
                maps.shape()
            ));
        }
        Ok(CoilSensitivities(maps))
    }

    pub fn n_coils(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &ComplexTensor {
        &self.0
    }

    /// Root-sum-of-squares over coils at every voxel.
    pub fn rss(&self) -> Tensor {
        let plane = self.height() * self.width();
        let (re, im) = (self.0.re().data(), self.0.im().data());
        Tensor::from_fn(&[self.height(), self.width()], |p| {
            (0..self.n_coils())
                .map(|k| (re[k * plane + p] as f64).powi(2) + (im[k * plane + p] as f64).powi(2))
                .sum::<f64>()
                .sqrt() as f32
        })
    }
}

/// Measured samples `(echo, coil, ky, kx)` with the masks `(echo, ky, kx)` that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceData {
    samples: ComplexTensor,
    masks: Tensor,
    noise_sigma: f32,
}

impl KSpaceData {
    pub fn new(samples: ComplexTensor, masks: Tensor, noise_sigma: f32) -> Result<Self> {
        let s = samples.shape();
        let m = masks.shape();
        if s.len() != 4 || m.len() != 3 || m[0] != s[0] || m[1] != s[2] || m[2] != s[3] {
            return invalid(format!("k-space {s:?} incompatible with masks {m:?}"));
        }
        if masks.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return invalid("mask entries must be 0 or 1");
        }
        let plane = s[2] * s[3];
        for (i, (&re, &im)) in samples.re().data().iter().zip(samples.im().data()).enumerate() {
            let echo = i / (s[1] * plane);
            if masks.data()[echo * plane + i % plane] == 0.0 && (re != 0.0 || im != 0.0) {
                return invalid("k-space holds samples where the mask is zero");
            }
        }
        Ok(KSpaceData {
            samples,
            masks,
            noise_sigma,
        })
    }

    pub fn samples(&self) -> &ComplexTensor {
        &self.samples
    }

    pub fn masks(&self) -> &Tensor {
        &self.masks
    }

    pub fn noise_sigma(&self) -> f32 {
        self.noise_sigma
    }

    pub fn n_echoes(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn n_coils(&self) -> usize {
        self.samples.shape()[1]
    }

    /// Re-samples fully acquired data with new masks (retrospective undersampling).
    pub fn undersample(&self, masks: &Tensor) -> Result<KSpaceData> {
        let s = self.samples.shape();
        if masks.shape() != [s[0], s[2], s[3]] {
            return invalid(format!(
                "mask shape {:?} does not match k-space {s:?}",
                masks.shape()
            ));
        }
        let plane = s[2] * s[3];
        let per_echo = s[1] * plane;
        let mut out = self.samples.clone();
        let (re, im) = out.parts_mut();
        for i in 0..re.len() {
            let m = masks.data()[(i / per_echo) * plane + i % plane] * self.masks.data()[(i / per_echo) * plane + i % plane];
            if m == 0.0 {
                re[i] = 0.0;
                im[i] = 0.0;
            }
        }
        let combined = masks.zip_with(&self.masks, |a, b| a * b)?;
        KSpaceData::new(out, combined, self.noise_sigma)
    }
}
