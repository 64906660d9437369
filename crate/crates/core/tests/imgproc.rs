use focus_core::imgproc::*;
use focus_core::rng::SplitMix64;
use proptest::prelude::*;

fn gray(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Image {
    Image::new(h, w, 1, (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
}

fn rgb(r: f64, g: f64, b: f64) -> Image {
    Image::new(1, 1, 3, vec![r, g, b]).unwrap()
}

#[test]
fn grayscale_examples() {
    assert_eq!(to_grayscale(&rgb(1.0, 1.0, 1.0)).unwrap().data()[0], 1.0);
    assert_eq!(to_grayscale(&rgb(0.0, 0.0, 0.0)).unwrap().data()[0], 0.0);
    assert!((to_grayscale(&rgb(1.0, 0.0, 0.0)).unwrap().data()[0] - 0.299).abs() < 1e-15);
    assert!(to_grayscale(&gray(2, 2, |_, _| 0.5)).is_err());
}

#[test]
fn blur_examples() {
    let c = gray(9, 11, |_, _| 0.37);
    let b = gaussian_blur(&c, 1.3).unwrap();
    assert!(b.data().iter().all(|v| (v - 0.37).abs() < 1e-12));

    let k = gaussian_kernel(1.0).unwrap();
    assert_eq!(k.len(), 7);
    assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for s in [0.3, 1.0, 2.5, 4.0] {
        assert!((gaussian_kernel(s).unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    let imp = gray(15, 15, |y, x| if y == 7 && x == 7 { 1.0 } else { 0.0 });
    let b = gaussian_blur(&imp, 1.0).unwrap();
    assert!((b.get(0, 7, 7) - k[3] * k[3]).abs() < 1e-15);

    assert!(gaussian_blur(&c, 0.0).is_err());
    assert!(gaussian_blur(&c, -1.0).is_err());
}

#[test]
fn edge_detect_constant_is_empty() {
    for v in [0.0, 0.4, 1.0] {
        let e = edge_detect(&gray(20, 20, |_, _| v), 0.1, 0.2).unwrap();
        assert_eq!(e.count(), 0);
        assert_eq!(canny(&Image::filled(20, 20, 3, v).unwrap(), 1.0, 0.1, 0.2).unwrap().count(), 0);
    }
}

#[test]
fn blurred_step_edge_is_localized() {
    // analytic gradient maximum of a step between columns c-1 and c lies at
    // the boundary, i.e. column c-1 or c
    for c in [6usize, 10, 17] {
        let img = gray(24, 24, |_, x| if x >= c { 0.8 } else { 0.2 });
        let e = canny(&img, 1.0, 0.1, 0.2).unwrap();
        assert!(e.count() > 0);
        for y in 2..22 {
            let cols: Vec<usize> = (0..24).filter(|&x| e.data[y * 24 + x] > 0.0).collect();
            assert!(!cols.is_empty(), "row {y} has no edge");
            for x in cols {
                assert!((x as f64 - (c as f64 - 0.5)).abs() <= 1.5, "col {x} vs step {c}");
            }
        }
    }
}

#[test]
fn high_thresholds_suppress_low_contrast_noise() {
    let mut r = SplitMix64::new(3);
    let img = gray(32, 32, |_, _| 0.5 + 0.02 * (r.next_f64() - 0.5));
    let e = edge_detect(&img, 0.999, 1.0).unwrap();
    assert!(e.count() <= 1);
    assert!(edge_detect(&img, 0.3, 0.2).is_err());
    assert!(edge_detect(&img, -0.1, 0.2).is_err());
    assert!(edge_detect(&img, 0.1, 1.5).is_err());
}

#[test]
fn edge_maps_are_binary() {
    let mut r = SplitMix64::new(9);
    let img = gray(32, 32, |_, _| r.next_f64());
    let e = canny(&img, 1.0, 0.05, 0.1).unwrap();
    assert!(e.data.iter().all(|v| *v == 0.0 || *v == 1.0));
}

#[test]
fn overlay_examples() {
    let img = Image::filled(4, 5, 3, 0.5).unwrap();
    let empty = EdgeMap { h: 4, w: 5, data: vec![0.0; 20] };
    assert_eq!(overlay_edges(&img, &empty).unwrap(), img);
    let full = EdgeMap { h: 4, w: 5, data: vec![1.0; 20] };
    assert!(overlay_edges(&img, &full).unwrap().data().iter().all(|v| *v == 1.0));
    let mut one = vec![0.0; 20];
    one[7] = 1.0;
    let out = overlay_edges(&img, &EdgeMap { h: 4, w: 5, data: one }).unwrap();
    for ch in 0..3 {
        assert_eq!(out.get(ch, 1, 2), 1.0);
        assert_eq!(out.get(ch, 0, 0), 0.5);
    }
    assert!(overlay_edges(&img, &EdgeMap { h: 5, w: 4, data: vec![0.0; 20] }).is_err());
}

#[test]
fn resize_examples() {
    let mut r = SplitMix64::new(1);
    let img = gray(5, 7, |_, _| r.next_f64());
    assert_eq!(resize_bilinear(&img, 5, 7).unwrap(), img);

    let one = gray(1, 1, |_, _| 0.25);
    let big = resize_bilinear(&one, 4, 6).unwrap();
    assert!(big.data().iter().all(|v| *v == 0.25));

    let m = resize_map(&[0.0, 1.0, 0.0, 1.0], 2, 2, 2, 3).unwrap();
    assert_eq!(m[1], 0.5);
    assert_eq!(m[4], 0.5);
    assert_eq!((m[0], m[2]), (0.0, 1.0));

    assert!(resize_bilinear(&img, 0, 3).is_err());
    assert!(resize_map(&[0.0; 4], 2, 2, 3, 0).is_err());
}

#[test]
fn pca_line_and_pairs() {
    let pts: Vec<f64> = (-3..=3).flat_map(|t| [t as f64, 2.0 * t as f64]).collect();
    let p = pca_first_component(&pts, 7, 2).unwrap();
    let s5 = 5f64.sqrt();
    assert!((p.direction[0].abs() - 1.0 / s5).abs() < 1e-9);
    assert!((p.direction[1].abs() - 2.0 / s5).abs() < 1e-9);
    assert!(p.direction[0] * p.direction[1] > 0.0);
    for (i, t) in (-3..=3).enumerate() {
        let d = t as f64 * s5;
        assert!((p.scores[i].abs() - d.abs()).abs() < 1e-9);
    }

    let p = pca_first_component(&[1.0, 0.0, -1.0, 0.0], 2, 2).unwrap();
    assert!((p.direction[0].abs() - 1.0).abs() < 1e-12 && p.direction[1].abs() < 1e-12);
    let mut s = p.scores.clone();
    s.sort_by(f64::total_cmp);
    assert!((s[0] + 1.0).abs() < 1e-12 && (s[1] - 1.0).abs() < 1e-12);

    let dup = [0.3, 0.7, 0.3, 0.7, 0.3, 0.7];
    let err = pca_first_component(&dup, 3, 2).unwrap_err();
    assert!(err.to_string().contains("degenerate features"));
    assert!(pca_first_component(&[1.0, 2.0], 1, 2).is_err());
}

#[test]
fn pca_sign_puts_smaller_farther_cluster_positive() {
    // 3 points near 0, one far away: its centred score has larger magnitude
    let pts = [0.0, 0.1, -0.1, 0.0, 10.0, 10.0];
    let p = pca_first_component(&[pts.as_slice(), &[0.05, -0.02]].concat(), 4, 2).unwrap();
    assert!(p.scores[2] > 0.0);
    let pos: Vec<f64> = p.scores.iter().copied().filter(|v| *v > 0.0).collect();
    let neg: Vec<f64> = p.scores.iter().copied().filter(|v| *v < 0.0).map(f64::abs).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&pos) >= mean(&neg));
}

#[test]
fn pca_direction_on_anisotropic_gaussian() {
    let mut r = SplitMix64::new(2024);
    for &theta in &[0.3f64, 1.1, 2.4] {
        let (c, s) = (theta.cos(), theta.sin());
        let n = 10_000;
        let mut pts = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let (a, b) = (3.0 * r.normal(), r.normal());
            pts.push(c * a - s * b + 4.0);
            pts.push(s * a + c * b - 1.0);
        }
        let p = pca_first_component(&pts, n, 2).unwrap();
        let cos = (p.direction[0] * c + p.direction[1] * s).abs().min(1.0);
        let deg = cos.acos().to_degrees();
        assert!(deg < 2.0, "theta {theta}: {deg}°");
    }
}

fn two_clusters(n: usize, c: usize, members: &[bool], seed: u64) -> Vec<f64> {
    let mut r = SplitMix64::new(seed);
    (0..n)
        .flat_map(|i| {
            let m = if members[i] { 5.0 } else { -5.0 };
            (0..c).map(|_| m + 0.1 * r.normal()).collect::<Vec<_>>()
        })
        .collect()
}

#[test]
fn binarize_examples() {
    assert_eq!(binarize(&[-1.0, 0.5], 0.0), vec![0.0, 1.0]);
    assert_eq!(binarize(&[-1.0, -0.1, -3.0], 0.0), vec![0.0; 3]);
    assert_eq!(binarize(&[0.0], 0.0), vec![0.0]);

    let members: Vec<bool> = (0..36).map(|i| i % 5 == 0).collect();
    let f = two_clusters(36, 8, &members, 4);
    let b = binarize(&pca_first_component(&f, 36, 8).unwrap().scores, 0.0);
    for (i, m) in members.iter().enumerate() {
        assert_eq!(b[i], if *m { 1.0 } else { 0.0 });
    }
}

fn random_gray(h: usize, w: usize, seed: u64) -> Image {
    let mut r = SplitMix64::new(seed);
    gray(h, w, |_, _| r.next_f64())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn operations_stay_in_unit_range(seed in any::<u64>(), h in 2usize..20, w in 2usize..20, sigma in 0.3f64..3.0) {
        let g = random_gray(h, w, seed);
        let b = gaussian_blur(&g, sigma).unwrap();
        prop_assert!(b.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let e = edge_detect(&b, 0.05, 0.15).unwrap();
        prop_assert!(e.data.iter().all(|v| *v == 0.0 || *v == 1.0));
        let r = resize_bilinear(&g, h * 2 + 1, w + 3).unwrap();
        prop_assert!(r.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mut rr = SplitMix64::new(seed ^ 1);
        let c = Image::new(h, w, 3, (0..3 * h * w).map(|_| rr.next_f64()).collect()).unwrap();
        let o = overlay_edges(&c, &e).unwrap();
        prop_assert!(o.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let gr = to_grayscale(&c).unwrap();
        prop_assert!(gr.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn blur_is_linear(seed in any::<u64>(), a in 0.0f64..0.5, b in 0.0f64..0.5, sigma in 0.3f64..2.5) {
        let x = random_gray(12, 9, seed);
        let y = random_gray(12, 9, seed.wrapping_add(1));
        let mix: Vec<f64> = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
        let lhs = gaussian_blur(&Image::new(12, 9, 1, mix).unwrap(), sigma).unwrap();
        let bx = gaussian_blur(&x, sigma).unwrap();
        let by = gaussian_blur(&y, sigma).unwrap();
        for i in 0..lhs.data().len() {
            prop_assert!((lhs.data()[i] - (a * bx.data()[i] + b * by.data()[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn pca_rotation_invariance(seed in any::<u64>(), theta in 0.0f64..6.28) {
        let mut r = SplitMix64::new(seed);
        let n = 30;
        let pts: Vec<f64> = (0..n).flat_map(|_| [2.0 * r.normal(), 0.5 * r.normal(), 0.2 * r.normal()]).collect();
        let (c, s) = (theta.cos(), theta.sin());
        let rot: Vec<f64> = pts
            .chunks(3)
            .flat_map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
            .collect();
        let a = pca_first_component(&pts, n, 3).unwrap();
        let b = pca_first_component(&rot, n, 3).unwrap();
        let d = &a.direction;
        let rd = [c * d[0] - s * d[1], s * d[0] + c * d[1], d[2]];
        let dot: f64 = rd.iter().zip(&b.direction).map(|(x, y)| x * y).sum();
        prop_assert!((dot - 1.0).abs() < 1e-6, "dot {}", dot);
        for i in 0..n {
            prop_assert!((a.scores[i] - b.scores[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn binarized_pca_ignores_constant_offset(seed in any::<u64>(), off in -50.0f64..50.0) {
        let mut r = SplitMix64::new(seed);
        let (n, c) = (24, 5);
        let f: Vec<f64> = (0..n * c).map(|_| r.normal()).collect();
        let shifted: Vec<f64> = f.iter().enumerate().map(|(i, v)| v + off * (1.0 + (i % c) as f64)).collect();
        let a = binarize(&pca_first_component(&f, n, c).unwrap().scores, 0.0);
        let b = binarize(&pca_first_component(&shifted, n, c).unwrap().scores, 0.0);
        prop_assert_eq!(a, b);
    }
}
