//! Combines the two query predictions into the final mask.

use crate::error::{shape_err, Result};
use crate::imgproc::resize_map;

#[derive(Debug, Clone, PartialEq)]
pub struct MoiResult {
    pub h: usize,
    pub w: usize,
    /// Normalized foreground probability, H × W.
    pub soft_fg: Vec<f64>,
    /// `soft_fg > 0.5` as 0/1.
    pub binary: Vec<f64>,
    /// Index of the query used as foreground.
    pub fg_query: usize,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Foreground probability of each query from its [2] class logits.
fn fg_prob(class: &[f64]) -> f64 {
    sigmoid(class[0] - class[1])
}

/// The query whose class distribution favours foreground more strongly;
/// ties go to query 0.
pub fn assign_roles(class_logits: &[f64]) -> usize {
    let (p0, p1) = (fg_prob(&class_logits[0..2]), fg_prob(&class_logits[2..4]));
    if (p0 >= 0.5) == (p1 >= 0.5) {
        log::warn!("both queries claim the same role (P(fg) = {p0:.4}, {p1:.4}); keeping the likelier foreground");
    }
    if p0 >= p1 {
        0
    } else {
        1
    }
}

/// p_f / (p_f + p_b), 0.5 when both vanish.
pub fn normalize(pf: f64, pb: f64) -> f64 {
    let sum = pf + pb;
    if sum > f64::MIN_POSITIVE {
        pf / sum
    } else {
        0.5
    }
}

/// Final-layer mask logits [2 × h·w] and class logits [2 × 2] to an
/// out_h × out_w mask.
pub fn fuse_probs(
    mask_logits: &[f64],
    class_logits: &[f64],
    grid: (usize, usize),
    out_h: usize,
    out_w: usize,
) -> Result<MoiResult> {
    let (h, w) = grid;
    let p = h * w;
    if mask_logits.len() != 2 * p {
        return Err(shape_err("fuse_probs", 2 * p, mask_logits.len()));
    }
    if class_logits.len() != 4 {
        return Err(shape_err("fuse_probs", 4, class_logits.len()));
    }
    let qf = assign_roles(class_logits);
    let qb = 1 - qf;
    let cf = fg_prob(&class_logits[2 * qf..2 * qf + 2]);
    let cb = 1.0 - fg_prob(&class_logits[2 * qb..2 * qb + 2]);
    let soft: Vec<f64> = (0..p)
        .map(|i| {
            let pf = cf * sigmoid(mask_logits[qf * p + i]);
            let pb = cb * sigmoid(mask_logits[qb * p + i]);
            normalize(pf, pb)
        })
        .collect();
    let soft = if (out_h, out_w) == grid {
        soft
    } else {
        resize_map(&soft, h, w, out_h, out_w)?
    };
    let binary = soft.iter().map(|v| if *v > 0.5 { 1.0 } else { 0.0 }).collect();
    Ok(MoiResult {
        h: out_h,
        w: out_w,
        soft_fg: soft,
        binary,
        fg_query: qf,
    })
}
