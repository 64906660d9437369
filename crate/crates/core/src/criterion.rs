//! Set-prediction objective for the two ground queries: Hungarian matching
//! against the (foreground, background) targets, mask/box/label losses
//! and the weighted total.

use focus_tensor::{Graph, Var};

use crate::decoder::{LayerPrediction, PredictionSet};
use crate::error::{invalid, shape_err, Result};

pub const DICE_EPS: f64 = 1.0;
pub const BOX_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub clip: f64,
    pub label: f64,
    pub mask: f64,
    pub bbox: f64,
    /// α, weight of the L1 box term.
    pub l1: f64,
    /// β, weight of the gIoU box term.
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            clip: 1.0,
            label: 1.0,
            mask: 5.0,
            bbox: 1.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// Targets at mask-logit resolution. Index 0 is the foreground target
/// (label 0), index 1 the background target (label 1).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub fg_mask: Vec<f64>,
    pub bg_mask: Vec<f64>,
    pub fg_box: [f64; 4],
    pub bg_box: [f64; 4],
    pub grid: (usize, usize),
}

impl TargetSet {
    pub fn mask(&self, t: usize) -> &[f64] {
        if t == 0 {
            &self.fg_mask
        } else {
            &self.bg_mask
        }
    }

    pub fn bbox(&self, t: usize) -> [f64; 4] {
        if t == 0 {
            self.fg_box
        } else {
            self.bg_box
        }
    }

    /// Builds targets from a full-resolution binary mask.
    pub fn from_mask(mask: &[f64], h: usize, w: usize, grid: (usize, usize)) -> Result<Self> {
        if mask.len() != h * w {
            return Err(shape_err("targets", h * w, mask.len()));
        }
        let fg_mask = downsample_area(mask, h, w, grid.0, grid.1)?;
        let bg_mask = fg_mask.iter().map(|v| 1.0 - v).collect();
        let bg_full: Vec<f64> = mask.iter().map(|v| if *v > 0.5 { 0.0 } else { 1.0 }).collect();
        Ok(Self {
            fg_mask,
            bg_mask,
            fg_box: tight_box(mask, h, w),
            bg_box: tight_box(&bg_full, h, w),
            grid,
        })
    }
}

/// Block downsampling: a cell is 1 when more than half its pixels are.
pub fn downsample_area(mask: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Result<Vec<f64>> {
    if oh == 0 || ow == 0 || h % oh != 0 || w % ow != 0 {
        return Err(invalid(format!("cannot block-downsample {h}x{w} to {oh}x{ow}")));
    }
    let (fy, fx) = (h / oh, w / ow);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut on = 0usize;
            for dy in 0..fy {
                for dx in 0..fx {
                    if mask[(y * fy + dy) * w + x * fx + dx] > 0.5 {
                        on += 1;
                    }
                }
            }
            if 2 * on > fy * fx {
                out[y * ow + x] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Tight normalized (cx, cy, w, h) box of the nonzero pixels; pixel x
/// spans [x, x + 1). An empty mask yields the zero box.
pub fn tight_box(mask: &[f64], h: usize, w: usize) -> [f64; 4] {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] > 0.5 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x0 == usize::MAX {
        return [0.0; 4];
    }
    let (w, h) = (w as f64, h as f64);
    [
        (x0 + x1) as f64 / (2.0 * w),
        (y0 + y1) as f64 / (2.0 * h),
        (x1 - x0) as f64 / w,
        (y1 - y0) as f64 / h,
    ]
}

fn check_len(g: &Graph, x: Var, n: usize, op: &'static str) -> Result<()> {
    let len: usize = g.shape(x).iter().product();
    if len != n {
        return Err(shape_err(op, n, len));
    }
    Ok(())
}

/// Mean binary cross-entropy on logits: softplus(x) − g·x.
pub fn bce(g: &Graph, logits: Var, gt: &[f64]) -> Result<Var> {
    check_len(g, logits, gt.len(), "bce")?;
    let t = g.constant(&g.shape(logits), gt.to_vec())?;
    Ok(g.mean(g.sub(g.softplus(logits), g.mul(t, logits)?)?))
}

/// 1 − (2Σpg + ε)/(Σp + Σg + ε) with p = sigmoid(logits), ε = 1.
pub fn dice(g: &Graph, logits: Var, gt: &[f64]) -> Result<Var> {
    check_len(g, logits, gt.len(), "dice")?;
    let t = g.constant(&g.shape(logits), gt.to_vec())?;
    let p = g.sigmoid(logits);
    let num = g.add_scalar(g.scale(g.sum(g.mul(p, t)?), 2.0), DICE_EPS);
    let den = g.add_scalar(g.sum(p), gt.iter().sum::<f64>() + DICE_EPS);
    Ok(g.add_scalar(g.neg(g.div(num, den)?), 1.0))
}

pub fn mask_loss(g: &Graph, logits: Var, gt: &[f64]) -> Result<Var> {
    Ok(g.add(bce(g, logits, gt)?, dice(g, logits, gt)?)?)
}

/// Generalized IoU of a predicted (cx, cy, w, h) box [4] against a
/// constant target, computed on corner form.
pub fn giou(g: &Graph, pred: Var, gt: [f64; 4]) -> Result<Var> {
    check_len(g, pred, 4, "giou")?;
    let p = g.reshape(pred, &[4])?;
    let c = |i| g.narrow(p, 0, i, 1);
    let (cx, cy, w, h) = (c(0)?, c(1)?, c(2)?, c(3)?);
    let px0 = g.sub(cx, g.scale(w, 0.5))?;
    let px1 = g.add(cx, g.scale(w, 0.5))?;
    let py0 = g.sub(cy, g.scale(h, 0.5))?;
    let py1 = g.add(cy, g.scale(h, 0.5))?;
    let k = |v: f64| g.constant(&[1], vec![v]);
    let (gx0, gx1) = (k(gt[0] - 0.5 * gt[2])?, k(gt[0] + 0.5 * gt[2])?);
    let (gy0, gy1) = (k(gt[1] - 0.5 * gt[3])?, k(gt[1] + 0.5 * gt[3])?);
    let iw = g.relu(g.sub(g.minimum(px1, gx1)?, g.maximum(px0, gx0)?)?);
    let ih = g.relu(g.sub(g.minimum(py1, gy1)?, g.maximum(py0, gy0)?)?);
    let inter = g.mul(iw, ih)?;
    let area_p = g.mul(w, h)?;
    let union = g.sub(g.add_scalar(area_p, gt[2] * gt[3]), inter)?;
    let iou = g.div(inter, g.add_scalar(union, BOX_EPS))?;
    let hw = g.sub(g.maximum(px1, gx1)?, g.minimum(px0, gx0)?)?;
    let hh = g.sub(g.maximum(py1, gy1)?, g.minimum(py0, gy0)?)?;
    let hull = g.mul(hw, hh)?;
    let extra = g.div(g.sub(hull, union)?, g.add_scalar(hull, BOX_EPS))?;
    Ok(g.reshape(g.sub(iou, extra)?, &[])?)
}

/// α·mean|pred − gt| + β·(1 − gIoU).
pub fn bbox_loss(g: &Graph, pred: Var, gt: [f64; 4], w: &LossWeights) -> Result<Var> {
    check_len(g, pred, 4, "bbox")?;
    let p = g.reshape(pred, &[4])?;
    let t = g.constant(&[4], gt.to_vec())?;
    let l1 = g.mean(g.abs(g.sub(p, t)?));
    let gi = g.add_scalar(g.neg(giou(g, pred, gt)?), 1.0);
    Ok(g.add(g.scale(l1, w.l1), g.scale(gi, w.giou))?)
}

/// Softmax cross-entropy of one logit row against `label`.
pub fn label_loss(g: &Graph, logits: Var, label: usize) -> Result<Var> {
    let n: usize = g.shape(logits).iter().product();
    if label >= n {
        return Err(invalid(format!("label {label} out of range for {n} classes")));
    }
    let row = g.reshape(logits, &[1, n])?;
    let ls = g.reshape(g.log_softmax(row)?, &[n])?;
    Ok(g.reshape(g.neg(g.narrow(ls, 0, label, 1)?), &[])?)
}

/// Minimum-cost perfect assignment; `result[row] = column`. Square costs
/// only; any non-finite entry is an error.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let n = cost.len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(invalid("cost matrix must be square"));
    }
    if let Some(v) = cost.iter().flatten().find(|v| !v.is_finite()) {
        return Err(invalid(format!("non-finite matching cost {v}")));
    }
    let total = |a: &[usize]| a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>();
    let assign = match n {
        0 => Vec::new(),
        1 => vec![0],
        2 => {
            // permutations in lexicographic order; first minimum wins
            if cost[0][1] + cost[1][0] < cost[0][0] + cost[1][1] {
                vec![1, 0]
            } else {
                vec![0, 1]
            }
        }
        _ => augmenting_path(cost),
    };
    let c = total(&assign);
    Ok((assign, c))
}

/// Shortest augmenting path with row/column potentials, O(n³).
fn augmenting_path(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    // 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if col_row[j] > 0 {
            assign[col_row[j] - 1] = j - 1;
        }
    }
    assign
}

fn row(g: &Graph, x: Var, r: usize) -> Result<Var> {
    Ok(g.narrow(x, 0, r, 1)?)
}

#[derive(Debug, Clone, Copy)]
pub struct PairLosses {
    pub label: Var,
    pub mask: Var,
    pub bbox: Var,
}

/// Unweighted components for query `q` against target `t`.
pub fn pair_losses(
    g: &Graph,
    pred: &LayerPrediction,
    q: usize,
    targets: &TargetSet,
    t: usize,
    w: &LossWeights,
) -> Result<PairLosses> {
    Ok(PairLosses {
        label: label_loss(g, row(g, pred.class_logits, q)?, t)?,
        mask: mask_loss(g, row(g, pred.mask_logits, q)?, targets.mask(t))?,
        bbox: bbox_loss(g, row(g, pred.bbox, q)?, targets.bbox(t), w)?,
    })
}

/// Matching cost matrix [query][target] from the current prediction
/// values, using the loss terms with their weights.
pub fn cost_matrix(
    g: &Graph,
    pred: &LayerPrediction,
    targets: &TargetSet,
    w: &LossWeights,
) -> Result<Vec<Vec<f64>>> {
    let mask = g.data(pred.mask_logits).to_vec();
    let class = g.data(pred.class_logits).to_vec();
    let bbox = g.data(pred.bbox).to_vec();
    let p = mask.len() / 2;
    let cg = Graph::new();
    let mut cost = vec![vec![0.0; 2]; 2];
    for q in 0..2 {
        let m = cg.constant(&[p], mask[q * p..(q + 1) * p].to_vec())?;
        let c = cg.constant(&[2], class[2 * q..2 * q + 2].to_vec())?;
        let b = cg.constant(&[4], bbox[4 * q..4 * q + 4].to_vec())?;
        for (t, slot) in cost[q].iter_mut().enumerate() {
            let label = cg.item(label_loss(&cg, c, t)?);
            let ml = cg.item(mask_loss(&cg, m, targets.mask(t))?);
            let bl = cg.item(bbox_loss(&cg, b, targets.bbox(t), w)?);
            *slot = w.label * label + w.mask * ml + w.bbox * bl;
        }
    }
    Ok(cost)
}

/// query → target assignment for one layer.
pub fn match_layer(
    g: &Graph,
    pred: &LayerPrediction,
    targets: &TargetSet,
    w: &LossWeights,
) -> Result<Vec<usize>> {
    Ok(hungarian(&cost_matrix(g, pred, targets, w)?)?.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub clip: f64,
    pub label: f64,
    pub mask: f64,
    pub bbox: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub label: Var,
    pub mask: Var,
    pub bbox: Var,
}

/// λ_clip ℒ_clip + λ_label ℒ_label + λ_mask ℒ_mask + λ_bbox ℒ_bbox, with
/// the matched components averaged over pairs and then over supervised
/// layers (every layer when `deep_supervision`, else the last).
pub fn total_loss(
    g: &Graph,
    preds: &PredictionSet,
    targets: &TargetSet,
    clip: Option<Var>,
    w: &LossWeights,
    deep_supervision: bool,
) -> Result<(LossTerms, LossReport)> {
    let layers: Vec<&LayerPrediction> = if deep_supervision {
        preds.layers.iter().collect()
    } else {
        vec![preds.last()]
    };
    let mut sums: Option<(Var, Var, Var)> = None;
    for pred in &layers {
        let assign = match_layer(g, pred, targets, w)?;
        for (q, &t) in assign.iter().enumerate() {
            let pl = pair_losses(g, pred, q, targets, t, w)?;
            sums = Some(match sums {
                None => (pl.label, pl.mask, pl.bbox),
                Some((a, b, c)) => (g.add(a, pl.label)?, g.add(b, pl.mask)?, g.add(c, pl.bbox)?),
            });
        }
    }
    let (l, m, b) = sums.ok_or_else(|| invalid("no predictions to supervise"))?;
    let k = 1.0 / (2 * layers.len()) as f64;
    let (label, mask, bbox) = (g.scale(l, k), g.scale(m, k), g.scale(b, k));
    let mut total = g.add(
        g.add(g.scale(label, w.label), g.scale(mask, w.mask))?,
        g.scale(bbox, w.bbox),
    )?;
    let mut clip_v = 0.0;
    if let Some(c) = clip {
        total = g.add(total, g.scale(c, w.clip))?;
        clip_v = g.item(c);
    }
    let report = LossReport {
        total: g.item(total),
        clip: clip_v,
        label: g.item(label),
        mask: g.item(mask),
        bbox: g.item(bbox),
    };
    Ok((
        LossTerms {
            total,
            label,
            mask,
            bbox,
        },
        report,
    ))
}
