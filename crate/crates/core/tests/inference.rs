use focus_core::inference::*;
use focus_core::rng::SplitMix64;
use proptest::prelude::*;

const CONFIDENT: [f64; 4] = [6.0, -6.0, -6.0, 6.0];

#[test]
fn confident_foreground_fills_the_map() {
    let mut mask = vec![10.0; 16];
    mask.extend(vec![-10.0; 16]);
    let m = fuse_probs(&mask, &CONFIDENT, (4, 4), 16, 16).unwrap();
    assert_eq!(m.fg_query, 0);
    assert!(m.binary.iter().all(|v| *v == 1.0));
    assert_eq!((m.h, m.w, m.soft_fg.len()), (16, 16, 256));
}

#[test]
fn equal_evidence_gives_half_and_empty_mask() {
    // symmetric classes and masks: p_f = p_b everywhere
    let mask = vec![0.3; 8];
    let m = fuse_probs(&mask, &CONFIDENT, (2, 2), 2, 2).unwrap();
    assert!(m.soft_fg.iter().all(|v| *v == 0.5));
    assert!(m.binary.iter().all(|v| *v == 0.0));
    assert_eq!(normalize(0.0, 0.0), 0.5);
    assert_eq!(normalize(f64::MIN_POSITIVE / 4.0, 0.0), 0.5);
}

#[test]
fn roles_follow_class_probability() {
    assert_eq!(assign_roles(&[-3.0, 3.0, 3.0, -3.0]), 1);
    assert_eq!(assign_roles(&[3.0, -3.0, -3.0, 3.0]), 0);
    // both claim foreground: the likelier one wins
    assert_eq!(assign_roles(&[1.0, 0.0, 2.0, 0.0]), 1);
    // tie → query 0
    assert_eq!(assign_roles(&[1.0, 0.0, 1.0, 0.0]), 0);

    let mut mask = vec![-10.0; 4];
    mask.extend(vec![10.0; 4]);
    let m = fuse_probs(&mask, &[-3.0, 3.0, 3.0, -3.0], (2, 2), 2, 2).unwrap();
    assert_eq!(m.fg_query, 1);
    assert!(m.binary.iter().all(|v| *v == 1.0));
}

#[test]
fn shape_errors() {
    assert!(fuse_probs(&[0.0; 7], &CONFIDENT, (2, 2), 4, 4).is_err());
    assert!(fuse_probs(&[0.0; 8], &[0.0; 3], (2, 2), 4, 4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ratio_is_scale_invariant(pf in 1e-6f64..1.0, pb in 1e-6f64..1.0, c in 1e-3f64..1e3) {
        let a = normalize(pf, pb);
        let b = normalize(c * pf, c * pb);
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert_eq!(a > 0.5, b > 0.5);
    }

    #[test]
    fn binary_partitions_pixels(seed in any::<u64>()) {
        let mut r = SplitMix64::new(seed);
        let mask: Vec<f64> = (0..2 * 36).map(|_| r.uniform(-5.0, 5.0)).collect();
        let class: Vec<f64> = (0..4).map(|_| r.uniform(-3.0, 3.0)).collect();
        let m = fuse_probs(&mask, &class, (6, 6), 24, 24).unwrap();
        for (s, b) in m.soft_fg.iter().zip(&m.binary) {
            prop_assert!((0.0..=1.0).contains(s));
            prop_assert_eq!(*b, if *s > 0.5 { 1.0 } else { 0.0 });
        }
    }
}
