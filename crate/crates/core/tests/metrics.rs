use focus_core::metrics::*;
use focus_core::rng::SplitMix64;
use proptest::prelude::*;
use serde_json::Value;

fn random_case(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut r = SplitMix64::new(seed);
    let frac = r.uniform(0.1, 0.9);
    let gt: Vec<f64> = (0..n).map(|_| if r.next_f64() < frac { 1.0 } else { 0.0 }).collect();
    // coarse values so ties and exact threshold hits occur
    let pred: Vec<f64> = (0..n).map(|_| r.below(11) as f64 / 10.0).collect();
    (pred, gt)
}

fn counts(pred: &[f64], gt: &[f64], t: f64) -> (f64, f64, f64, f64) {
    let (mut tp, mut fp, mut tn, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..pred.len() {
        let p = pred[i] > t;
        let g = gt[i] == 1.0;
        if p && g {
            tp += 1.0;
        } else if p {
            fp += 1.0;
        } else if g {
            fn_ += 1.0;
        } else {
            tn += 1.0;
        }
    }
    (tp, fp, tn, fn_)
}

#[test]
fn mae_examples() {
    let gt = [1.0, 0.0, 1.0, 0.0];
    assert_eq!(mae(&gt, &gt).unwrap(), 0.0);
    assert_eq!(mae(&[0.0, 1.0, 0.0, 1.0], &gt).unwrap(), 1.0);
    assert_eq!(mae(&[0.5; 4], &gt).unwrap(), 0.5);
    assert!(mae(&[0.5; 3], &gt).is_err());
}

#[test]
fn ber_examples() {
    let gt = [1.0, 1.0, 0.0, 0.0];
    assert_eq!(ber(&gt, &gt).unwrap(), 0.0);
    assert_eq!(ber(&[1.0; 4], &gt).unwrap(), 50.0);
    assert_eq!(ber(&[0.0, 0.0, 1.0, 1.0], &gt).unwrap(), 100.0);
    let err = ber(&[1.0; 4], &[1.0; 4]).unwrap_err();
    assert!(err.to_string().contains("BER undefined"));
}

#[test]
fn f_measures_examples() {
    let gt = [1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    assert_eq!(f1(&gt, &gt).unwrap(), 1.0);
    assert!((fbeta(&gt, &gt).unwrap() - 1.0).abs() < 1e-15);
    assert!((weighted_fbeta(&gt, &gt, 3, 3).unwrap() - 1.0).abs() < 1e-9);
    let empty = [0.0; 9];
    assert_eq!(f1(&empty, &gt).unwrap(), 0.0);
    assert_eq!(fbeta(&empty, &gt).unwrap(), 0.0);
    // the smoothed error map is zero-padded, so keep the object off the border
    let blob: Vec<f64> = (0..256).map(|i| if (4..12).contains(&(i / 16)) && (5..10).contains(&(i % 16)) { 1.0 } else { 0.0 }).collect();
    assert_eq!(weighted_fbeta(&[0.0; 256], &blob, 16, 16).unwrap(), 0.0);
    assert_eq!(f1(&gt, &empty).unwrap(), 0.0);
    assert_eq!(fbeta(&gt, &empty).unwrap(), 0.0);
    assert_eq!(weighted_fbeta(&gt, &empty, 3, 3).unwrap(), 0.0);
}

#[test]
fn confusion_formulas_are_exact() {
    for t in 0..200u64 {
        let (pred, gt) = random_case(t, 256);
        let (tp, fp, tn, fn_) = counts(&pred, &gt, 0.5);
        let m: f64 = pred.iter().zip(&gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / 256.0;
        assert_eq!(mae(&pred, &gt).unwrap(), m);
        assert_eq!(ber(&pred, &gt).unwrap(), 100.0 * 0.5 * (fn_ / (tp + fn_) + fp / (tn + fp)));
        assert_eq!(f1(&pred, &gt).unwrap(), 2.0 * tp / (2.0 * tp + fp + fn_));
        let mut best = 0.0f64;
        for k in 0..256 {
            let (tp, fp, _, fn_) = counts(&pred, &gt, k as f64 / 255.0);
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = tp / (tp + fn_);
            let f = if 0.3 * p + r > 0.0 { 1.3 * p * r / (0.3 * p + r) } else { 0.0 };
            best = best.max(f);
        }
        assert_eq!(fbeta(&pred, &gt).unwrap(), best);
    }
}

fn pairwise_auc(pred: &[f64], gt: &[f64]) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for i in 0..pred.len() {
        for j in 0..pred.len() {
            if gt[i] == 1.0 && gt[j] == 0.0 {
                n += 1.0;
                s += if pred[i] > pred[j] {
                    1.0
                } else if pred[i] == pred[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    s / n
}

#[test]
fn auc_matches_pairwise_oracle() {
    for t in 0..200u64 {
        let (pred, gt) = random_case(1000 + t, 256);
        assert!((auc(&pred, &gt).unwrap() - pairwise_auc(&pred, &gt)).abs() < 1e-9);
    }
    let gt = [1.0, 1.0, 0.0, 0.0];
    assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &gt).unwrap(), 1.0);
    assert_eq!(auc(&[0.3; 4], &gt).unwrap(), 0.5);
    assert!(auc(&[0.3; 4], &[0.0; 4]).is_err());
}

#[test]
fn perfect_prediction_scores_one() {
    for t in 0..50u64 {
        let (_, gt) = random_case(t, 256);
        assert!((s_measure(&gt, &gt, 16, 16).unwrap() - 1.0).abs() < 1e-6);
        for v in [EMeasure::Adaptive, EMeasure::Max] {
            assert!((e_measure(&gt, &gt, v).unwrap() - 1.0).abs() < 1e-6, "{v:?}");
        }
        // threshold 0 marks every pixel positive, so the sweep mean stays below 1
        assert!(e_measure(&gt, &gt, EMeasure::Mean).unwrap() < 1.0);
    }
    // single-class ground truth
    let zero = vec![0.0; 64];
    let one = vec![1.0; 64];
    assert_eq!(s_measure(&zero, &zero, 8, 8).unwrap(), 1.0);
    assert_eq!(s_measure(&one, &one, 8, 8).unwrap(), 1.0);
    assert_eq!(e_measure(&zero, &zero, EMeasure::Adaptive).unwrap(), 1.0);
    assert_eq!(e_measure(&one, &one, EMeasure::Adaptive).unwrap(), 1.0);
}

#[test]
fn complement_prediction_has_low_structure() {
    for t in 0..30u64 {
        let (_, gt) = random_case(t + 77, 256);
        let inv: Vec<f64> = gt.iter().map(|g| 1.0 - g).collect();
        assert!(s_measure(&inv, &gt, 16, 16).unwrap() <= 0.5);
    }
}

fn fixture() -> Vec<Value> {
    let text = include_str!("fixtures/sod_oracle.json");
    let v: Value = serde_json::from_str(text).unwrap();
    v["cases"].as_array().unwrap().clone()
}

#[test]
fn structure_and_alignment_match_transcribed_oracle() {
    let cases = fixture();
    assert_eq!(cases.len(), 20);
    for (i, c) in cases.iter().enumerate() {
        let h = c["h"].as_u64().unwrap() as usize;
        let w = c["w"].as_u64().unwrap() as usize;
        let pred: Vec<f64> = c["pred_milli"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap() / 1000.0).collect();
        let gt: Vec<f64> = c["gt"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        let want = |k: &str| c[k].as_f64().unwrap();
        let s = s_measure(&pred, &gt, h, w).unwrap();
        assert!((s - want("s_measure")).abs() < 1e-9, "case {i}: S {s} vs {}", want("s_measure"));
        for (v, k) in [(EMeasure::Adaptive, "e_adaptive"), (EMeasure::Mean, "e_mean"), (EMeasure::Max, "e_max")] {
            let e = e_measure(&pred, &gt, v).unwrap();
            assert!((e - want(k)).abs() < 1e-9, "case {i}: {k} {e} vs {}", want(k));
        }
    }
}

#[test]
fn constant_half_alignment_special_case() {
    // constant 0.5: adaptive threshold 1, nothing reaches it, so the
    // prediction is all background and the score is the empty-map value
    let (_, gt) = random_case(5, 256);
    let n = 256.0;
    let mg = gt.iter().sum::<f64>() / n;
    let a = |a: f64, b: f64| (2.0 * a * b / (a * a + b * b + EPS) + 1.0).powi(2) / 4.0;
    let want = (mg * n * a(0.0, 1.0 - mg) + (1.0 - mg) * n * a(0.0, -mg)) / n;
    assert!((e_measure(&[0.5; 256], &gt, EMeasure::Adaptive).unwrap() - want).abs() < 1e-12);
}

#[test]
fn evaluate_marks_undefined_as_nan() {
    let gt = vec![0.0; 16];
    let r = evaluate(&[0.2; 16], &gt, 4, 4, EMeasure::Adaptive).unwrap();
    assert!(r.ber.is_nan() && r.auc.is_nan());
    assert!((r.mae - 0.2).abs() < 1e-15);
    let m = MetricsReport::mean(&[r, MetricsReport::from_values([0.5; 8])]);
    assert_eq!(m.ber, 0.5);
    assert!((m.mae - 0.35).abs() < 1e-15);
}

#[test]
fn weighted_fbeta_kernel_is_normalized() {
    let k = wfm_kernel();
    assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    assert_eq!(k[0], k[48]);
    assert!(k[24] > k[0]);
}

#[test]
fn nearest_foreground_breaks_ties_by_raster_order() {
    let mut gt = vec![0.0; 9];
    gt[1] = 1.0;
    gt[3] = 1.0;
    let (d, idx) = nearest_foreground(&gt, 3, 3);
    assert_eq!(idx[0], 1);
    assert_eq!(d[0], 1.0);
    assert_eq!(idx[4], 1);
    assert_eq!(idx[8], 1);
    assert!((d[8] - 5f64.sqrt()).abs() < 1e-15);
    assert_eq!((d[3], idx[3]), (0.0, 3));
}

fn soft_case(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = SplitMix64::new(seed);
    let gt: Vec<f64> = (0..64).map(|i| if (i % 8 > 2) ^ (r.next_f64() < 0.1) { 1.0 } else { 0.0 }).collect();
    let pred: Vec<f64> = (0..64).map(|_| r.next_f64()).collect();
    (pred, gt)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_in_range(seed in any::<u64>()) {
        let (pred, gt) = soft_case(seed);
        let r = evaluate(&pred, &gt, 8, 8, EMeasure::Adaptive).unwrap();
        for v in [r.s_measure, r.e_measure, r.weighted_fbeta, r.mae, r.fbeta, r.f1, r.auc] {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v), "{:?}", r);
        }
        prop_assert!((0.0..=100.0).contains(&r.ber));
    }

    #[test]
    fn mae_complement_symmetry(seed in any::<u64>()) {
        let (pred, gt) = soft_case(seed);
        let p2: Vec<f64> = pred.iter().map(|p| 1.0 - p).collect();
        let g2: Vec<f64> = gt.iter().map(|g| 1.0 - g).collect();
        prop_assert!((mae(&pred, &gt).unwrap() - mae(&p2, &g2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn order_free_metrics_ignore_pixel_permutation(seed in any::<u64>()) {
        let (pred, gt) = soft_case(seed);
        let mut idx: Vec<usize> = (0..pred.len()).collect();
        SplitMix64::new(seed ^ 5).shuffle(&mut idx);
        let p2: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
        let g2: Vec<f64> = idx.iter().map(|&i| gt[i]).collect();
        prop_assert!((mae(&pred, &gt).unwrap() - mae(&p2, &g2).unwrap()).abs() < 1e-12);
        prop_assert_eq!(ber(&pred, &gt).unwrap(), ber(&p2, &g2).unwrap());
        prop_assert_eq!(f1(&pred, &gt).unwrap(), f1(&p2, &g2).unwrap());
        prop_assert_eq!(fbeta(&pred, &gt).unwrap(), fbeta(&p2, &g2).unwrap());
        prop_assert!((auc(&pred, &gt).unwrap() - auc(&p2, &g2).unwrap()).abs() < 1e-12);
        for v in [EMeasure::Adaptive, EMeasure::Mean, EMeasure::Max] {
            prop_assert!((e_measure(&pred, &gt, v).unwrap() - e_measure(&p2, &g2, v).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn confusion_is_threshold_monotone(seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (pred, gt) = soft_case(seed);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let c1 = confusion(&pred, &gt, lo);
        let c2 = confusion(&pred, &gt, hi);
        prop_assert!(c2.tp <= c1.tp && c2.fp <= c1.fp);
        prop_assert!(c2.tn >= c1.tn && c2.fn_ >= c1.fn_);
        prop_assert_eq!(c1.tp + c1.fp + c1.tn + c1.fn_, 64);
    }
}
