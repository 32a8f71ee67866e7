//! 8-bit binary PGM (`P5`) previews of real 2D maps.

use megre_autodiff::Tensor;

use crate::error::{invalid, Result};

/// Linearly maps `[lo, hi]` onto `0..=255` (clamping outside values; NaN is 0).
/// With `range = None` the map's own finite min and max are used.
pub fn encode_pgm(map: &Tensor, range: Option<(f32, f32)>) -> Result<Vec<u8>> {
    let [h, w] = map.shape() else {
        return invalid(format!("PGM needs a 2D map, got shape {:?}", map.shape()));
    };
    let (lo, hi) = range.unwrap_or_else(|| {
        map.data()
            .iter()
            .filter(|v| v.is_finite())
            .fold((f32::MAX, f32::MIN), |(l, h), &v| (l.min(v), h.max(v)))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| {
        if v.is_nan() {
            0
        } else {
            (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8
        }
    }));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_scaling() {
        let t = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 1.0]).unwrap();
        let bytes = encode_pgm(&t, None).unwrap();
        assert_eq!(&bytes[..11], b"P5\n3 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255]);
        let flat = encode_pgm(&Tensor::full(&[2, 2], 3.0), None).unwrap();
        assert_eq!(&flat[11..], &[0, 0, 0, 0]);
        assert!(encode_pgm(&Tensor::zeros(&[2, 2, 2]), None).is_err());
    }
}
