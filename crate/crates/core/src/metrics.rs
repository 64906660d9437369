//! Evaluation measures for binary foreground maps. Predictions are soft
//! maps in [0, 1]; ground truth is binary (> 0.5 is foreground).
//!
//! Predictions are used as given: no per-image min-max rescaling.

use rayon::prelude::*;

use crate::error::{invalid, shape_err, Result};

/// Machine epsilon guard used by the structure and alignment measures.
pub const EPS: f64 = f64::EPSILON;
pub const BETA2: f64 = 0.3;

fn check(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(shape_err("metric", gt.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(invalid("metric on an empty map"));
    }
    Ok(())
}

fn is_fg(v: f64) -> bool {
    v > 0.5
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// Counts with prediction positive iff `pred > threshold`.
pub fn confusion(pred: &[f64], gt: &[f64], threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for (p, g) in pred.iter().zip(gt) {
        match (*p > threshold, is_fg(*g)) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check(pred, gt)?;
    let s: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p - if is_fg(*g) { 1.0 } else { 0.0 }).abs())
        .sum();
    Ok(s / pred.len() as f64)
}

/// Balanced error rate in percent, prediction binarised at 0.5.
pub fn ber(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check(pred, gt)?;
    let c = confusion(pred, gt, 0.5);
    if c.tp + c.fn_ == 0 || c.tn + c.fp == 0 {
        return Err(invalid("BER undefined for single-class ground truth"));
    }
    let fnr = c.fn_ as f64 / (c.tp + c.fn_) as f64;
    let fpr = c.fp as f64 / (c.tn + c.fp) as f64;
    Ok(100.0 * 0.5 * (fnr + fpr))
}

fn f_from(c: Confusion, beta2: f64) -> f64 {
    let p = if c.tp + c.fp == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
    let r = if c.tp + c.fn_ == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
    let den = beta2 * p + r;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * p * r / den
    }
}

fn has_fg(gt: &[f64]) -> bool {
    gt.iter().any(|g| is_fg(*g))
}

/// Pixel F1 with the prediction binarised at 0.5.
pub fn f1(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check(pred, gt)?;
    if !has_fg(gt) {
        log::warn!("f1 on empty ground truth defined as 0");
        return Ok(0.0);
    }
    let c = confusion(pred, gt, 0.5);
    Ok(2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64)
}

/// F_β at each of the 256 thresholds k/255 (prediction positive iff
/// `pred > k/255`).
pub fn fbeta_curve(pred: &[f64], gt: &[f64], beta2: f64) -> Result<Vec<f64>> {
    check(pred, gt)?;
    Ok((0..256)
        .map(|k| f_from(confusion(pred, gt, k as f64 / 255.0), beta2))
        .collect())
}

/// Maximum F_β over thresholds, β² = 0.3.
pub fn fbeta(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check(pred, gt)?;
    if !has_fg(gt) {
        log::warn!("fbeta on empty ground truth defined as 0");
        return Ok(0.0);
    }
    Ok(fbeta_curve(pred, gt, BETA2)?.into_iter().fold(0.0, f64::max))
}

/// Area under the ROC curve via the Mann–Whitney statistic with midranks.
pub fn auc(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check(pred, gt)?;
    let n_pos = gt.iter().filter(|g| is_fg(**g)).count();
    let n_neg = gt.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(invalid("AUC undefined for single-class ground truth"));
    }
    let mut idx: Vec<usize> = (0..pred.len()).collect();
    idx.sort_by(|&a, &b| pred[a].total_cmp(&pred[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && pred[idx[j + 1]] == pred[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| is_fg(gt[k])).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

// ---- structure measure ---------------------------------------------------

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = xs.clone().count();
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let m = xs.clone().sum::<f64>() / n as f64;
    let var = xs.map(|x| (x - m).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
    (m, var.sqrt(), n)
}

fn s_object(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (x, sx, n) = mean_std(values);
    if n == 0 {
        return 0.0;
    }
    2.0 * x / (x * x + 1.0 + sx + EPS)
}

fn ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let x = pred.iter().sum::<f64>() / n as f64;
    let y = gt.iter().sum::<f64>() / n as f64;
    let d = (n.max(2) - 1) as f64;
    let sx = pred.iter().map(|p| (p - x).powi(2)).sum::<f64>() / d;
    let sy = gt.iter().map(|g| (g - y).powi(2)).sum::<f64>() / d;
    let sxy = pred.iter().zip(gt).map(|(p, g)| (p - x) * (g - y)).sum::<f64>() / d;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// 1-based split point: the rounded (ties to even) foreground centroid
/// plus one, or the rounded centre for an empty mask.
fn centroid(gt: &[f64], h: usize, w: usize) -> (usize, usize) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if gt[y * w + x] > 0.5 {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        ((w as f64 / 2.0).round_ties_even() as usize, (h as f64 / 2.0).round_ties_even() as usize)
    } else {
        (
            (sx / n as f64).round_ties_even() as usize + 1,
            (sy / n as f64).round_ties_even() as usize + 1,
        )
    }
}

fn crop(m: &[f64], w: usize, ys: std::ops::Range<usize>, xs: std::ops::Range<usize>) -> Vec<f64> {
    ys.flat_map(|y| xs.clone().map(move |x| m[y * w + x])).collect()
}

/// S = ½·S_object + ½·S_region, clipped at 0.
pub fn s_measure(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<f64> {
    check(pred, gt)?;
    if pred.len() != h * w {
        return Err(shape_err("s_measure", h * w, pred.len()));
    }
    let g: Vec<f64> = gt.iter().map(|v| if is_fg(*v) { 1.0 } else { 0.0 }).collect();
    let y = g.iter().sum::<f64>() / g.len() as f64;
    let mean_pred = pred.iter().sum::<f64>() / pred.len() as f64;
    if y == 0.0 {
        return Ok(1.0 - mean_pred);
    }
    if y == 1.0 {
        return Ok(mean_pred);
    }
    let fg = s_object(pred.iter().zip(&g).filter(|(_, g)| **g == 1.0).map(|(p, _)| *p));
    let bg = s_object(pred.iter().zip(&g).filter(|(_, g)| **g == 0.0).map(|(p, _)| 1.0 - *p));
    let object = y * fg + (1.0 - y) * bg;

    let (cx, cy) = centroid(&g, h, w);
    let (cx, cy) = (cx.min(w), cy.min(h));
    let area = (h * w) as f64;
    let w1 = (cx * cy) as f64 / area;
    let w2 = (cy * (w - cx)) as f64 / area;
    let w3 = ((h - cy) * cx) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let quads = [
        (0..cy, 0..cx, w1),
        (0..cy, cx..w, w2),
        (cy..h, 0..cx, w3),
        (cy..h, cx..w, w4),
    ];
    let region: f64 = quads
        .into_iter()
        .map(|(ys, xs, wt)| {
            let p = crop(pred, w, ys.clone(), xs.clone());
            let q = crop(&g, w, ys, xs);
            wt * ssim(&p, &q)
        })
        .sum();
    Ok((0.5 * object + 0.5 * region).max(0.0))
}

// ---- enhanced alignment measure -------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EMeasure {
    /// Single threshold at min(2·mean(pred), 1).
    #[default]
    Adaptive,
    /// Mean over the 256 thresholds k/255.
    Mean,
    /// Maximum over the 256 thresholds k/255.
    Max,
}

impl std::str::FromStr for EMeasure {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Self::Adaptive),
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            other => Err(invalid(format!("unknown e-measure variant {other:?}"))),
        }
    }
}

/// Enhanced alignment of a binary prediction (given as counts), averaged
/// over all N pixels so a perfect prediction scores exactly 1.
fn em_counts(fg_fg: usize, fg_bg: usize, gt_fg: usize, n: usize) -> f64 {
    let pred_fg = fg_fg + fg_bg;
    let pred_bg = n - pred_fg;
    let sum = if gt_fg == 0 {
        pred_bg as f64
    } else if gt_fg == n {
        pred_fg as f64
    } else {
        let bg_fg = gt_fg - fg_fg;
        let bg_bg = pred_bg - bg_fg;
        let mp = pred_fg as f64 / n as f64;
        let mg = gt_fg as f64 / n as f64;
        let parts = [
            (fg_fg, 1.0 - mp, 1.0 - mg),
            (fg_bg, 1.0 - mp, -mg),
            (bg_fg, -mp, 1.0 - mg),
            (bg_bg, -mp, -mg),
        ];
        parts
            .iter()
            .map(|&(count, a, b)| {
                let align = 2.0 * a * b / (a * a + b * b + EPS);
                (align + 1.0).powi(2) / 4.0 * count as f64
            })
            .sum()
    };
    sum / n as f64
}

fn em_at(pred: &[f64], gt: &[f64], positive: impl Fn(f64) -> bool) -> f64 {
    let (mut ff, mut fb, mut gf) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gt) {
        let g = is_fg(*g);
        gf += g as usize;
        if positive(*p) {
            if g {
                ff += 1;
            } else {
                fb += 1;
            }
        }
    }
    em_counts(ff, fb, gf, pred.len())
}

pub fn e_measure(pred: &[f64], gt: &[f64], variant: EMeasure) -> Result<f64> {
    check(pred, gt)?;
    Ok(match variant {
        EMeasure::Adaptive => {
            let t = (2.0 * pred.iter().sum::<f64>() / pred.len() as f64).min(1.0);
            if t == 0.0 {
                // an all-zero map predicts nothing
                em_at(pred, gt, |p| p > 0.0)
            } else {
                em_at(pred, gt, |p| p >= t)
            }
        }
        EMeasure::Mean | EMeasure::Max => {
            let curve: Vec<f64> = (0..256)
                .map(|k| {
                    let t = k as f64 / 255.0;
                    em_at(pred, gt, |p| p >= t)
                })
                .collect();
            if variant == EMeasure::Mean {
                curve.iter().sum::<f64>() / 256.0
            } else {
                curve.into_iter().fold(0.0, f64::max)
            }
        }
    })
}

// ---- weighted F-measure ----------------------------------------------------

/// Nearest foreground pixel of every pixel (itself when foreground) by
/// exhaustive search; ties go to the lowest raster index.
pub fn nearest_foreground(gt: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let fg: Vec<(usize, i64, i64)> = (0..h * w)
        .filter(|&i| is_fg(gt[i]))
        .map(|i| (i, (i / w) as i64, (i % w) as i64))
        .collect();
    let res: Vec<(f64, usize)> = (0..h * w)
        .into_par_iter()
        .map(|i| {
            if is_fg(gt[i]) {
                return (0.0, i);
            }
            let (y, x) = ((i / w) as i64, (i % w) as i64);
            let mut best = (i64::MAX, usize::MAX);
            for &(j, fy, fx) in &fg {
                let d = (fy - y).pow(2) + (fx - x).pow(2);
                if d < best.0 {
                    best = (d, j);
                }
            }
            ((best.0 as f64).sqrt(), best.1)
        })
        .collect();
    res.into_iter().unzip()
}

/// 7×7 Gaussian with σ = 5, normalized to unit sum.
pub fn wfm_kernel() -> [f64; 49] {
    let sigma: f64 = 5.0;
    let mut k = [0.0; 49];
    for y in 0..7 {
        for x in 0..7 {
            let (dy, dx) = (y as f64 - 3.0, x as f64 - 3.0);
            k[y * 7 + x] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    let max = k.iter().cloned().fold(0.0, f64::max);
    k.iter_mut().for_each(|v| {
        if *v < f64::EPSILON * max {
            *v = 0.0
        }
    });
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Weighted F-measure (β = 1): errors are spread to their nearest
/// foreground pixel, smoothed, and background errors are weighted up with
/// distance from the object.
pub fn weighted_fbeta(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<f64> {
    check(pred, gt)?;
    if pred.len() != h * w {
        return Err(shape_err("weighted_fbeta", h * w, pred.len()));
    }
    if !has_fg(gt) {
        log::warn!("weighted F-measure on empty ground truth defined as 0");
        return Ok(0.0);
    }
    let g: Vec<bool> = gt.iter().map(|v| is_fg(*v)).collect();
    let (dist, idx) = nearest_foreground(gt, h, w);
    let e: Vec<f64> = pred
        .iter()
        .zip(&g)
        .map(|(p, g)| (p - if *g { 1.0 } else { 0.0 }).abs())
        .collect();
    let et: Vec<f64> = (0..h * w).map(|i| if g[i] { e[i] } else { e[idx[i]] }).collect();
    let k = wfm_kernel();
    let mut ea = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for ky in -3..=3i64 {
                for kx in -3..=3i64 {
                    let (sy, sx) = (y + ky, x + kx);
                    if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                        continue;
                    }
                    acc += k[((ky + 3) * 7 + kx + 3) as usize] * et[sy as usize * w + sx as usize];
                }
            }
            ea[y as usize * w + x as usize] = acc;
        }
    }
    let alpha = 0.5f64.ln() / 5.0;
    let mut sum_ew_fg = 0.0;
    let mut sum_ew_bg = 0.0;
    let mut n_fg = 0usize;
    for i in 0..h * w {
        let m = if g[i] && ea[i] < e[i] { ea[i] } else { e[i] };
        if g[i] {
            sum_ew_fg += m;
            n_fg += 1;
        } else {
            sum_ew_bg += m * (2.0 - (alpha * dist[i]).exp());
        }
    }
    let tpw = n_fg as f64 - sum_ew_fg;
    let r = 1.0 - sum_ew_fg / n_fg as f64;
    let p = tpw / (tpw + sum_ew_bg + EPS);
    Ok(2.0 * r * p / (r + p + EPS))
}

// ---- report ---------------------------------------------------------------

/// All measures for one image; undefined values are NaN.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricsReport {
    pub s_measure: f64,
    pub e_measure: f64,
    pub weighted_fbeta: f64,
    pub mae: f64,
    pub ber: f64,
    pub fbeta: f64,
    pub f1: f64,
    pub auc: f64,
}

pub const METRIC_NAMES: [&str; 8] = [
    "s_measure",
    "e_measure",
    "weighted_fbeta",
    "mae",
    "ber",
    "fbeta",
    "f1",
    "auc",
];

impl MetricsReport {
    pub fn values(&self) -> [f64; 8] {
        [
            self.s_measure,
            self.e_measure,
            self.weighted_fbeta,
            self.mae,
            self.ber,
            self.fbeta,
            self.f1,
            self.auc,
        ]
    }

    pub fn from_values(v: [f64; 8]) -> Self {
        Self {
            s_measure: v[0],
            e_measure: v[1],
            weighted_fbeta: v[2],
            mae: v[3],
            ber: v[4],
            fbeta: v[5],
            f1: v[6],
            auc: v[7],
        }
    }

    /// Per-metric mean over reports, skipping NaN entries.
    pub fn mean(reports: &[MetricsReport]) -> Self {
        let mut out = [f64::NAN; 8];
        for (k, slot) in out.iter_mut().enumerate() {
            let vals: Vec<f64> = reports.iter().map(|r| r.values()[k]).filter(|v| !v.is_nan()).collect();
            if !vals.is_empty() {
                *slot = vals.iter().sum::<f64>() / vals.len() as f64;
            }
        }
        Self::from_values(out)
    }
}

pub fn evaluate(pred: &[f64], gt: &[f64], h: usize, w: usize, e: EMeasure) -> Result<MetricsReport> {
    check(pred, gt)?;
    Ok(MetricsReport {
        s_measure: s_measure(pred, gt, h, w)?,
        e_measure: e_measure(pred, gt, e)?,
        weighted_fbeta: weighted_fbeta(pred, gt, h, w)?,
        mae: mae(pred, gt)?,
        ber: ber(pred, gt).unwrap_or(f64::NAN),
        fbeta: fbeta(pred, gt)?,
        f1: f1(pred, gt)?,
        auc: auc(pred, gt).unwrap_or(f64::NAN),
    })
}
