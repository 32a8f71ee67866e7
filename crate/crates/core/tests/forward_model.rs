mod common;

use common::*;
use megre_core::autodiff::{ComplexTensor, Tensor};
use megre_core::forward_model::{adjoint, encode, normal_op};
use megre_core::MultiEchoImage;
use proptest::prelude::*;

/// Re <a, b> computed by hand in f64.
fn re_inner(a: &ComplexTensor, b: &ComplexTensor) -> f64 {
    let (ar, ai, br, bi) = (a.re().data(), a.im().data(), b.re().data(), b.im().data());
    (0..ar.len())
        .map(|i| ar[i] as f64 * br[i] as f64 + ai[i] as f64 * bi[i] as f64)
        .sum()
}

fn im_inner(a: &ComplexTensor, b: &ComplexTensor) -> f64 {
    let (ar, ai, br, bi) = (a.re().data(), a.im().data(), b.re().data(), b.im().data());
    (0..ar.len())
        .map(|i| ar[i] as f64 * bi[i] as f64 - ai[i] as f64 * br[i] as f64)
        .sum()
}

#[test]
fn encode_adjoint_dot_product_test() {
    for trial in 0..12 {
        let s = random_image(4, 16, 16, 100 + trial);
        let coils = random_coils(4, 16, 16, 200 + trial);
        let masks = random_mask(&[4, 16, 16], 0.4, 300 + trial);
        let y = random_complex(&[4, 4, 16, 16], 400 + trial);
        let ax = encode(&s, &coils, &masks).unwrap();
        let aty = adjoint(&y, &coils, &masks).unwrap();
        let lhs = (re_inner(&ax, &y), im_inner(&ax, &y));
        let rhs = (re_inner(s.tensor(), aty.tensor()), im_inner(s.tensor(), aty.tensor()));
        let scale = ax.norm() * y.norm();
        let err = ((lhs.0 - rhs.0).powi(2) + (lhs.1 - rhs.1).powi(2)).sqrt() / scale;
        assert!(err < 1e-5, "trial {trial}: {err}");
    }
}

#[test]
fn adjoint_inverts_full_encoding_with_unit_rss() {
    let s = random_image(3, 16, 16, 1);
    let coils = unit_rss_coils(4, 16, 2);
    let full = Tensor::full(&[3, 16, 16], 1.0);
    let back = adjoint(&encode(&s, &coils, &full).unwrap(), &coils, &full).unwrap();
    assert!(rel_err(back.tensor(), s.tensor()) < 1e-5);
}

#[test]
fn adjoint_is_linear() {
    let coils = random_coils(2, 8, 8, 3);
    let masks = random_mask(&[2, 8, 8], 0.5, 4);
    let b = random_complex(&[2, 2, 8, 8], 5);
    let once = adjoint(&b, &coils, &masks).unwrap();
    let scaled = adjoint(&b.scale(-2.5), &coils, &masks).unwrap();
    assert!(rel_err(scaled.tensor(), &once.tensor().scale(-2.5)) < 1e-6);
}

#[test]
fn normal_operator_full_mask_is_identity() {
    let s = random_image(2, 16, 16, 6);
    let coils = unit_rss_coils(3, 16, 7);
    let y = normal_op(&s, &coils, &Tensor::full(&[2, 16, 16], 1.0), 0.0).unwrap();
    assert!(rel_err(y.tensor(), s.tensor()) < 1e-5);
}

#[test]
fn normal_operator_is_hermitian_and_bounded_below() {
    let coils = random_coils(3, 8, 8, 8);
    let masks = random_mask(&[2, 8, 8], 0.3, 9);
    for trial in 0..10 {
        let rho = 0.5 * trial as f32;
        let x = random_image(2, 8, 8, 10 + trial);
        let y = random_image(2, 8, 8, 30 + trial);
        let nx = normal_op(&x, &coils, &masks, rho).unwrap();
        let ny = normal_op(&y, &coils, &masks, rho).unwrap();
        let a = (re_inner(nx.tensor(), y.tensor()), im_inner(nx.tensor(), y.tensor()));
        let b = (re_inner(x.tensor(), ny.tensor()), im_inner(x.tensor(), ny.tensor()));
        let scale = nx.tensor().norm() * y.tensor().norm();
        assert!(((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() / scale < 1e-5);
        let quad = re_inner(nx.tensor(), x.tensor());
        let floor = rho as f64 / 2.0 * x.tensor().norm().powi(2);
        assert!(quad >= floor * (1.0 - 1e-6) - 1e-6, "{quad} < {floor}");
    }
}

fn permute_echoes(t: &ComplexTensor, perm: &[usize]) -> ComplexTensor {
    let parts: Vec<ComplexTensor> = perm.iter().map(|&j| t.index0(j).unwrap()).collect();
    ComplexTensor::stack(&parts).unwrap()
}

fn permute_mask(t: &Tensor, perm: &[usize]) -> Tensor {
    let parts: Vec<Tensor> = perm.iter().map(|&j| t.index0(j).unwrap()).collect();
    Tensor::stack(&parts).unwrap()
}

#[test]
fn echoes_are_decoupled() {
    let perm = [2, 0, 3, 1];
    let s = random_image(4, 8, 8, 11);
    let coils = random_coils(2, 8, 8, 12);
    let masks = random_mask(&[4, 8, 8], 0.5, 13);
    let ps = MultiEchoImage::new(permute_echoes(s.tensor(), &perm)).unwrap();
    let pm = permute_mask(&masks, &perm);
    let k = encode(&s, &coils, &masks).unwrap();
    let pk = encode(&ps, &coils, &pm).unwrap();
    assert_eq!(permute_echoes(&k, &perm), pk);
    let n = normal_op(&s, &coils, &masks, 1.0).unwrap();
    let pn = normal_op(&ps, &coils, &pm, 1.0).unwrap();
    assert_eq!(&permute_echoes(n.tensor(), &perm), pn.tensor());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn adjoint_identity_holds_for_any_geometry(
        echoes in 1usize..4,
        coils in 1usize..4,
        log_h in 1u32..5,
        log_w in 1u32..5,
        keep in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let (h, w) = (1usize << log_h, 1usize << log_w);
        let s = random_image(echoes, h, w, seed);
        let maps = random_coils(coils, h, w, seed ^ 1);
        let masks = random_mask(&[echoes, h, w], keep, seed ^ 2);
        let y = random_complex(&[echoes, coils, h, w], seed ^ 3);
        let ax = encode(&s, &maps, &masks).unwrap();
        let aty = adjoint(&y, &maps, &masks).unwrap();
        let d = re_inner(&ax, &y) - re_inner(s.tensor(), aty.tensor());
        prop_assert!(d.abs() <= 1e-5 * (ax.norm() * y.norm()).max(1e-12));
    }
}
