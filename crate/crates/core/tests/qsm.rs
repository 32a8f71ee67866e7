mod common;

use common::*;
use megre_core::autodiff::{ComplexTensor, Tensor};
use megre_core::phantom::{echo_times, make_phantom, simulate_signal, PhantomKind, PhantomParams};
use megre_core::qsm::*;
use megre_core::MultiEchoImage;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn tes(n: usize) -> Vec<f64> {
    echo_times(1.972, 3.384, n).iter().map(|&t| t as f64).collect()
}

fn voxel_samples(p: &SignalParams, tes: &[f64]) -> Vec<Complex64> {
    tes.iter().map(|&t| model_signal(p, t)).collect()
}

#[test]
fn noiseless_voxel_is_recovered() {
    let truth = [1.0, 0.05, 0.3, 0.2];
    let t = tes(8);
    let fit = fit_voxel(&voxel_samples(&truth, &t), &t, &FitSettings::default()).unwrap();
    assert_eq!(fit.status, VoxelStatus::Converged);
    for (a, b) in fit.params.iter().zip(truth) {
        assert!((a - b).abs() < 1e-4 * b.abs(), "{:?} vs {truth:?}", fit.params);
    }
}

#[test]
fn zero_field_is_recovered() {
    let truth = [0.7, 0.03, -0.4, 0.0];
    let t = tes(6);
    let fit = fit_voxel(&voxel_samples(&truth, &t), &t, &FitSettings::default()).unwrap();
    assert!(fit.params[3].abs() < 1e-6, "f = {}", fit.params[3]);
}

#[test]
fn accepted_steps_never_raise_the_cost() {
    let mut r = rng(4);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let t = tes(8);
    for _ in 0..50 {
        let truth = [1.0, 0.08, 2.5, -0.28];
        let s: Vec<Complex64> = voxel_samples(&truth, &t)
            .into_iter()
            .map(|v| v + Complex64::new(noise.sample(&mut r), noise.sample(&mut r)))
            .collect();
        let fit = fit_voxel(&s, &t, &FitSettings::default()).unwrap();
        assert!(fit.cost_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(fit.residual.is_finite());
    }
}

fn phantom_images(params: &PhantomParams) -> MultiEchoImage {
    simulate_signal(params).unwrap()
}

#[test]
fn phantom_fit_with_noise_has_small_median_field_error() {
    let params = make_phantom(PhantomKind::SheppLoganLike, 32, 8, 5).unwrap();
    let clean = phantom_images(&params);
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let noise = Normal::new(0.0f32, 0.01).unwrap();
    let mut noisy = clean.tensor().clone();
    let (re, im) = noisy.parts_mut();
    re.iter_mut().chain(im.iter_mut()).for_each(|v| *v += noise.sample(&mut r));
    let noisy = MultiEchoImage::new(noisy).unwrap();
    let mask = params.m0.map(|m| if m > 0.2 { 1.0 } else { 0.0 });
    let fit = fit_field_lm(&noisy, &params.echo_times, Some(&mask), &FitSettings::default()).unwrap();
    let mut errs: Vec<f64> = fit
        .fitted()
        .map(|i| (fit.field.data()[i] - params.field.data()[i]).abs() as f64)
        .collect();
    assert!(errs.len() > 100);
    errs.sort_by(f64::total_cmp);
    let median = errs[errs.len() / 2];
    assert!(median < 0.01, "median |df| = {median}");
    for i in 0..1024 {
        assert_eq!(mask.data()[i] == 0.0, fit.status[i] == VoxelStatus::Skipped);
        if mask.data()[i] != 0.0 {
            assert!(fit.residual.data()[i].is_finite());
        }
    }
}

#[test]
fn fit_rejects_bad_inputs() {
    let params = make_phantom(PhantomKind::RandomSmooth, 8, 3, 1).unwrap();
    let images = phantom_images(&params);
    assert!(fit_field_lm(&images, &params.echo_times, None, &FitSettings::default()).is_err());
    let params = make_phantom(PhantomKind::RandomSmooth, 8, 4, 1).unwrap();
    let images = phantom_images(&params);
    assert!(fit_field_lm(&images, &[1.0, 2.0, 3.0], None, &FitSettings::default()).is_err());
    assert!(fit_field_lm(&images, &[1.0, 3.0, 2.0, 4.0], None, &FitSettings::default()).is_err());
}

/// Zero-mean Gaussian blob minus its mean.
fn blob(size: usize, cy: f64, cx: f64, s: f64) -> Tensor {
    let t = Tensor::from_fn(&[size, size], |i| {
        let (y, x) = ((i / size) as f64, (i % size) as f64);
        (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp() as f32
    });
    let m = t.data().iter().sum::<f32>() / t.numel() as f32;
    t.map(|v| v - m)
}

fn rel_l2(a: &Tensor, b: &Tensor) -> f64 {
    let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    let den: f64 = b.data().iter().map(|y| (*y as f64).powi(2)).sum();
    (num / den).sqrt()
}

#[test]
fn dipole_round_trip_axial_field() {
    let chi = blob(32, 14.0, 17.0, 4.0);
    let settings = DipoleSettings::default();
    let f = forward_dipole(&chi, &settings).unwrap();
    let back = dipole_invert(&f, &settings).unwrap();
    let err = rel_l2(&back, &chi);
    // With k_z = 0 every non-DC bin has D = 1/3, so the error is exactly the
    // Tikhonov shrinkage 1 - (1/9) / (1/9 + reg).
    let expected = 1.0 - (1.0 / 9.0) / (1.0 / 9.0 + 1e-2);
    assert!((err - expected).abs() < 1e-4, "{err} vs {expected}");
    assert!(err < 0.1);
}

/// Projection of `t` onto the k-space bins with `|D| >= threshold`.
fn away_from_cone(t: &Tensor, kernel: &[f64], threshold: f64) -> Tensor {
    let k = megre_core::autodiff::fft::fft2(&ComplexTensor::from_real(t.clone())).unwrap();
    let (mut re, mut im) = (k.re().clone(), k.im().clone());
    for (i, d) in kernel.iter().enumerate() {
        if d.abs() < threshold {
            re.data_mut()[i] = 0.0;
            im.data_mut()[i] = 0.0;
        }
    }
    megre_core::autodiff::fft::ifft2(&ComplexTensor::new(re, im).unwrap()).unwrap().re().clone()
}

#[test]
fn dipole_round_trip_in_plane_field_outside_cone() {
    let chi = blob(32, 15.0, 16.0, 3.0);
    let settings = DipoleSettings {
        b0_direction: [1.0, 0.0, 0.0],
        ..DipoleSettings::default()
    };
    let kernel = dipole_kernel(32, 32, settings.voxel_size, settings.b0_direction).unwrap();
    let back = dipole_invert(&forward_dipole(&chi, &settings).unwrap(), &settings).unwrap();
    let err = rel_l2(&away_from_cone(&back, &kernel, 0.2), &away_from_cone(&chi, &kernel, 0.2));
    assert!(err < 0.1, "{err}");
}

#[test]
fn dipole_inversion_is_linear_and_zero_preserving() {
    let f = random_tensor(&[16, 16], 3, -1.0, 1.0);
    let s = DipoleSettings::default();
    let a = dipole_invert(&f, &s).unwrap();
    let b = dipole_invert(&f.map(|v| 2.0 * v), &s).unwrap();
    assert!(rel_l2(&b, &a.map(|v| 2.0 * v)) < 1e-6);
    let zero = dipole_invert(&Tensor::zeros(&[16, 16]), &s).unwrap();
    assert!(zero.data().iter().all(|&v| v == 0.0));
}

#[test]
fn dipole_filter_is_fixed_per_grid() {
    // Inverting a sum equals summing inversions: one k-space filter serves every input.
    let s = DipoleSettings {
        b0_direction: [0.3, 0.5, 0.8],
        ..DipoleSettings::default()
    };
    let (f1, f2) = (random_tensor(&[16, 16], 4, -1.0, 1.0), random_tensor(&[16, 16], 5, -1.0, 1.0));
    let sum = f1.zip_with(&f2, |a, b| a + b).unwrap();
    let lhs = dipole_invert(&sum, &s).unwrap();
    let rhs = dipole_invert(&f1, &s).unwrap().zip_with(&dipole_invert(&f2, &s).unwrap(), |a, b| a + b).unwrap();
    assert!(rel_l2(&lhs, &rhs) < 1e-5);
}

#[test]
fn non_positive_regularization_is_rejected() {
    let f = Tensor::zeros(&[8, 8]);
    for reg in [0.0, -1.0, f64::NAN] {
        let s = DipoleSettings { reg_weight: reg, ..DipoleSettings::default() };
        assert!(dipole_invert(&f, &s).is_err());
    }
}
