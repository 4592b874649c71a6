use tenvoo::adapters::{tenvoo_l_count, ConvKernelDims};
use tenvoo_wasm::demo;

#[test]
fn slices_are_rgba_and_seeded() {
    let v = demo::phantom("lesion", 16, 3).unwrap();
    let s = demo::axial(&v, 8).unwrap();
    assert_eq!(s.len(), 16 * 16);
    let px = demo::to_rgba(&s, 0.0, 1.0);
    assert_eq!(px.len(), 4 * 16 * 16);
    assert!(px
        .chunks(4)
        .all(|p| p[0] == p[1] && p[1] == p[2] && p[3] == 255));
    assert_eq!(demo::phantom("lesion", 16, 3).unwrap(), v);
    assert_ne!(demo::phantom("lesion", 16, 4).unwrap(), v);
}

#[test]
fn gray_mapping_clamps() {
    assert_eq!(
        demo::to_rgba(&[-5.0, 0.0, 0.5, 1.0, 9.0], 0.0, 1.0)
            .chunks(4)
            .map(|p| p[0])
            .collect::<Vec<_>>(),
        vec![0, 0, 128, 255, 255]
    );
}

#[test]
fn noising_follows_the_schedule() {
    let clean = demo::noised("pretrain", 16, 0, 8, 0, 50).unwrap();
    let v = demo::phantom("pretrain", 16, 0).unwrap();
    let raw = demo::axial(&v, 8).unwrap();
    for (c, r) in clean.iter().zip(&raw) {
        assert!((c - (2.0 * r - 1.0)).abs() < 1e-12);
    }
    let ab = demo::alpha_bar(50, 50).unwrap();
    let direct: f64 = (0..50)
        .map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 49.0))
        .product();
    assert!((ab - direct).abs() < 1e-12);
    assert_eq!(demo::alpha_bar(0, 50).unwrap(), 1.0);
    let noisy = demo::noised("pretrain", 16, 0, 8, 50, 50).unwrap();
    let resid: f64 = noisy
        .iter()
        .zip(&clean)
        .map(|(n, c)| (n - ab.sqrt() * c).powi(2))
        .sum::<f64>()
        / clean.len() as f64;
    assert!(
        (resid - (1.0 - ab)).abs() < 0.25 * (1.0 - ab),
        "residual variance {resid}"
    );
    assert!(demo::noised("pretrain", 16, 0, 8, 51, 50).is_err());
}

#[test]
fn curve_matches_closed_form() {
    let counts = demo::param_curve("tenvoo-l", 32, 32, 3, 6).unwrap();
    let d = ConvKernelDims::new(32, 32, [3, 3, 3]);
    let expect: Vec<usize> = (1..=6).map(|r| tenvoo_l_count(&d, r)).collect();
    assert_eq!(counts, expect);
    assert!(counts.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn bad_inputs_are_errors() {
    assert!(demo::phantom("nope", 16, 0).is_err());
    assert!(demo::param_curve("nope", 8, 8, 3, 2).is_err());
    let v = demo::phantom("pretrain", 8, 0).unwrap();
    assert!(demo::axial(&v, 8).is_err());
}
