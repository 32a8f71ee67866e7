//! Image-quality metrics evaluated in `f64` on echo-combined magnitudes.

use megre_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::MultiEchoImage;
use crate::error::{invalid, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// Normalized separable Gaussian, returned as the full `size x size` window.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let line: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = line.iter().sum();
    let line: Vec<f64> = line.iter().map(|v| v / total).collect();
    let mut out = Vec::with_capacity(size * size);
    for a in &line {
        for b in &line {
            out.push(a * b);
        }
    }
    out
}

pub fn ssim_constants(dynamic_range: f64) -> (f64, f64) {
    ((0.01 * dynamic_range).powi(2), (0.03 * dynamic_range).powi(2))
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<(usize, usize)> {
    if x.shape() != y.shape() || x.shape().len() != 2 {
        return invalid(format!("expected two equal 2D images, got {:?} and {:?}", x.shape(), y.shape()));
    }
    Ok((x.shape()[0], x.shape()[1]))
}

/// Mean SSIM over every position where the Gaussian window fits entirely.
pub fn ssim(x: &Tensor, y: &Tensor, window: usize, dynamic_range: f64) -> Result<f64> {
    let (h, w) = check_pair(x, y)?;
    if window == 0 || window.is_multiple_of(2) {
        return invalid(format!("SSIM window must be odd, got {window}"));
    }
    if window > h || window > w {
        return invalid(format!("SSIM window {window} larger than {h}x{w} image"));
    }
    if !(dynamic_range > 0.0) {
        return invalid(format!("dynamic range must be positive, got {dynamic_range}"));
    }
    let kernel = gaussian_window(window, SSIM_SIGMA);
    let (c1, c2) = ssim_constants(dynamic_range);
    let (xd, yd) = (x.data(), y.data());
    let (oh, ow) = (h - window + 1, w - window + 1);
    let mut total = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..window {
                for dx in 0..window {
                    let k = kernel[dy * window + dx];
                    let i = (oy + dy) * w + ox + dx;
                    let (a, b) = (xd[i] as f64, yd[i] as f64);
                    mx += k * a;
                    my += k * b;
                    xx += k * a * a;
                    yy += k * b * b;
                    xy += k * a * b;
                }
            }
            let vx = (xx - mx * mx).max(0.0);
            let vy = (yy - my * my).max(0.0);
            let cov = xy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// `20 log10(peak / RMSE)` with `peak = max(label)`; identical images give `+inf`.
pub fn psnr(recon: &Tensor, label: &Tensor) -> Result<f64> {
    check_pair(recon, label)?;
    let mse = recon
        .data()
        .iter()
        .zip(label.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / recon.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = label.data().iter().fold(f64::MIN, |m, &v| m.max(v as f64));
    Ok(20.0 * (peak / mse.sqrt()).log10())
}

fn range(t: &Tensor) -> f64 {
    let (lo, hi) = t
        .data()
        .iter()
        .fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v as f64), h.max(v as f64)));
    hi - lo
}

pub fn psnr_echo_combined(recon: &MultiEchoImage, label: &MultiEchoImage) -> Result<f64> {
    psnr(&recon.echo_combined(), &label.echo_combined())
}

/// SSIM of the echo-combined magnitudes, dynamic range from the label.
pub fn ssim_echo_combined(recon: &MultiEchoImage, label: &MultiEchoImage, window: usize) -> Result<f64> {
    let l = label.echo_combined();
    ssim(&recon.echo_combined(), &l, window, range(&l).max(1e-12))
}

/// Mean and population standard deviation. Identical values (including a
/// run of exact-match `inf` scores) have zero spread.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson correlation of the tie-averaged ranks.
/// NaN when fewer than two pairs or either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return invalid(format!("rank correlation of {} and {} values", a.len(), b.len()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Ok(f64::NAN);
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let (ma, _) = mean_std(&ra);
    let (mb, _) = mean_std(&rb);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    Ok(if va == 0.0 || vb == 0.0 { f64::NAN } else { cov / (va * vb).sqrt() })
}

/// Metric pair for one reconstructed slice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceScore {
    #[serde(with = "crate::metrics::finite_or_inf")]
    pub psnr: f64,
    pub ssim: f64,
}

pub fn score(recon: &MultiEchoImage, label: &MultiEchoImage) -> Result<SliceScore> {
    let window = SSIM_WINDOW.min(label.height()).min(label.width());
    let window = if window.is_multiple_of(2) { window - 1 } else { window };
    Ok(SliceScore {
        psnr: psnr_echo_combined(recon, label)?,
        ssim: ssim_echo_combined(recon, label, window)?,
    })
}

/// JSON has no infinity; non-finite values are written as the strings
/// `"inf"`, `"-inf"` or `"nan"`.
pub mod finite_or_inf {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(de::Error::custom(format!("expected a number or inf, got `{other}`"))),
            },
        }
    }

    /// The same encoding for every element of a sequence.
    pub mod vec {
        use serde::ser::SerializeSeq;
        use serde::{Deserialize, Deserializer, Serializer};

        #[derive(Deserialize)]
        struct Item(#[serde(with = "super")] f64);

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            struct Wrap(f64);
            impl serde::Serialize for Wrap {
                fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                    super::serialize(&self.0, s)
                }
            }
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                seq.serialize_element(&Wrap(*x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Ok(Vec::<Item>::deserialize(d)?.into_iter().map(|i| i.0).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, scale: f32) -> Tensor {
        Tensor::from_fn(&[h, w], |i| ((i * 7) % 11) as f32 * scale)
    }

    #[test]
    fn identical_images() {
        let x = ramp(16, 16, 0.1);
        assert!((ssim(&x, &x, 11, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);
    }

    #[test]
    fn window_must_fit() {
        let x = ramp(8, 8, 1.0);
        assert!(ssim(&x, &x, 11, 1.0).is_err());
        assert!(ssim(&x, &x, 4, 1.0).is_err());
        assert!(ssim(&x, &x, 7, 0.0).is_err());
    }

    #[test]
    fn uniform_error_psnr() {
        // peak 1, RMSE 0.1 -> 20 dB.
        let label = Tensor::from_fn(&[4, 4], |i| if i == 0 { 1.0 } else { 0.5 });
        let recon = label.map(|v| v + 0.1);
        assert!((psnr(&recon, &label).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn inf_serializes_as_sentinel() {
        let s = SliceScore { psnr: f64::INFINITY, ssim: 1.0 };
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"psnr":"inf","ssim":1.0}"#);
        let back: SliceScore = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn spearman_ranks() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 90.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        // Ranks (1, 2.5, 2.5) against (1, 3, 2): covariance 1.5, variances 1.5 and 2.
        let rho = spearman(&[0.0, 5.0, 5.0], &[1.0, 7.0, 4.0]).unwrap();
        assert!((rho - 1.5 / (1.5f64 * 2.0).sqrt()).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).unwrap().is_nan());
        assert!(spearman(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mean_std_basic() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
