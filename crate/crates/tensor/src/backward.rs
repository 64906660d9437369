//! Vector-Jacobian products for every recorded op.

use crate::graph::{l2_norm, moments, sigmoid, Binary, Node, Op, Unary, GELU_C, GELU_K};
use crate::kernels::{self, Tap};
use crate::shape;

/// Gradient contributions of node `idx` to its inputs, given the upstream
/// gradient `g`. Inputs that do not require grad are skipped.
pub(crate) fn vjp(nodes: &[Node], idx: usize, g: &[f64]) -> Vec<(usize, Vec<f64>)> {
    let node = &nodes[idx];
    let y = &node.value;
    let rg = |i: usize| nodes[i].requires_grad;
    let mut out = Vec::with_capacity(2);
    match &node.op {
        Op::Leaf => {}
        Op::Unary(kind, a) => {
            let x = &nodes[*a].value;
            let d: Vec<f64> = match kind {
                Unary::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                Unary::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                Unary::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                Unary::Softplus => g.iter().zip(x).map(|(g, x)| g * sigmoid(*x)).collect(),
                Unary::Relu => g
                    .iter()
                    .zip(x)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect(),
                Unary::Gelu => g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        let u = GELU_K * (x + GELU_C * x * x * x);
                        let t = u.tanh();
                        let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect(),
                Unary::Abs => g
                    .iter()
                    .zip(x)
                    .map(|(g, x)| if *x > 0.0 { *g } else if *x < 0.0 { -g } else { 0.0 })
                    .collect(),
                Unary::Scale(s) => g.iter().map(|g| g * s).collect(),
                Unary::AddScalar(_) => g.to_vec(),
            };
            out.push((*a, d));
        }
        Op::Binary(kind, a, b) => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            let same = na.shape == nb.shape && na.shape == node.shape;
            let (ia, ib) = if same {
                (None, None)
            } else {
                (
                    Some(shape::broadcast_map(&node.shape, &na.shape)),
                    Some(shape::broadcast_map(&node.shape, &nb.shape)),
                )
            };
            let at = |i: usize| ia.as_ref().map_or(i, |m| m[i]);
            let bt = |i: usize| ib.as_ref().map_or(i, |m| m[i]);
            let mut ga = rg(*a).then(|| vec![0.0; na.value.len()]);
            let mut gb = rg(*b).then(|| vec![0.0; nb.value.len()]);
            for (i, &gi) in g.iter().enumerate() {
                let (ja, jb) = (at(i), bt(i));
                let (xa, xb) = (na.value[ja], nb.value[jb]);
                let (da, db) = match kind {
                    Binary::Add => (gi, gi),
                    Binary::Sub => (gi, -gi),
                    Binary::Mul => (gi * xb, gi * xa),
                    Binary::Div => (gi / xb, -gi * xa / (xb * xb)),
                    Binary::Max => {
                        if xa >= xb {
                            (gi, 0.0)
                        } else {
                            (0.0, gi)
                        }
                    }
                    Binary::Min => {
                        if xa <= xb {
                            (gi, 0.0)
                        } else {
                            (0.0, gi)
                        }
                    }
                };
                if let Some(ga) = &mut ga {
                    ga[ja] += da;
                }
                if let Some(gb) = &mut gb {
                    gb[jb] += db;
                }
            }
            if let Some(ga) = ga {
                out.push((*a, ga));
            }
            if let Some(gb) = gb {
                out.push((*b, gb));
            }
        }
        Op::Matmul { a, b, m, k, n } => {
            if rg(*a) {
                out.push((*a, kernels::matmul_nt(g, &nodes[*b].value, *m, *n, *k)));
            }
            if rg(*b) {
                out.push((*b, kernels::matmul_tn(&nodes[*a].value, g, *m, *k, *n)));
            }
        }
        Op::Transpose { a, rows, cols } => {
            out.push((*a, kernels::transpose(g, *cols, *rows)));
        }
        Op::Reshape(a) => out.push((*a, g.to_vec())),
        Op::Narrow { a, ax, start, len } => {
            let mut d = vec![0.0; ax.outer * ax.n * ax.inner];
            let chunk = len * ax.inner;
            for o in 0..ax.outer {
                let base = o * ax.n * ax.inner + start * ax.inner;
                d[base..base + chunk].copy_from_slice(&g[o * chunk..(o + 1) * chunk]);
            }
            out.push((*a, d));
        }
        Op::Concat {
            inputs,
            outer,
            inner,
            sizes,
        } => {
            let total: usize = sizes.iter().sum();
            let mut offset = 0;
            for (&inp, &s) in inputs.iter().zip(sizes) {
                if rg(inp) {
                    let mut d = Vec::with_capacity(outer * s * inner);
                    for o in 0..*outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + s * inner]);
                    }
                    out.push((inp, d));
                }
                offset += s;
            }
        }
        Op::SumAll(a) => out.push((*a, vec![g[0]; nodes[*a].value.len()])),
        Op::MeanAll(a) => {
            let n = nodes[*a].value.len();
            out.push((*a, vec![g[0] / n.max(1) as f64; n]));
        }
        Op::SumAxis { a, ax } => {
            let mut d = vec![0.0; ax.outer * ax.n * ax.inner];
            for o in 0..ax.outer {
                let src = &g[o * ax.inner..(o + 1) * ax.inner];
                for i in 0..ax.n {
                    let base = (o * ax.n + i) * ax.inner;
                    d[base..base + ax.inner].copy_from_slice(src);
                }
            }
            out.push((*a, d));
        }
        Op::Softmax(a) => {
            let last = *node.shape.last().unwrap_or(&1);
            let mut d = vec![0.0; y.len()];
            for ((dr, yr), gr) in d.chunks_mut(last).zip(y.chunks(last)).zip(g.chunks(last)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            out.push((*a, d));
        }
        Op::LogSoftmax(a) => {
            let last = *node.shape.last().unwrap_or(&1);
            let mut d = vec![0.0; y.len()];
            for ((dr, yr), gr) in d.chunks_mut(last).zip(y.chunks(last)).zip(g.chunks(last)) {
                let s: f64 = gr.iter().sum();
                for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = gv - yv.exp() * s;
                }
            }
            out.push((*a, d));
        }
        Op::LayerNorm { a, eps } => {
            let last = *node.shape.last().unwrap_or(&1);
            let x = &nodes[*a].value;
            let mut d = vec![0.0; y.len()];
            for (((dr, yr), gr), xr) in d
                .chunks_mut(last)
                .zip(y.chunks(last))
                .zip(g.chunks(last))
                .zip(x.chunks(last))
            {
                let (_, rstd) = moments(xr, *eps);
                let n = last as f64;
                let mg = gr.iter().sum::<f64>() / n;
                let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = rstd * (gv - mg - yv * mgy);
                }
            }
            out.push((*a, d));
        }
        Op::L2Normalize(a) => {
            let last = *node.shape.last().unwrap_or(&1);
            let x = &nodes[*a].value;
            let mut d = vec![0.0; y.len()];
            for (((dr, yr), gr), xr) in d
                .chunks_mut(last)
                .zip(y.chunks(last))
                .zip(g.chunks(last))
                .zip(x.chunks(last))
            {
                let n = l2_norm(xr);
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = (gv - yv * dot) / n;
                }
            }
            out.push((*a, d));
        }
        Op::Conv2d {
            x,
            w,
            geom,
            out_c,
            depthwise,
        } => {
            let (nx, nw) = (&nodes[*x], &nodes[*w]);
            if *depthwise {
                let (gx, gw) = kernels::depthwise_backward(&nx.value, &nw.value, g, geom);
                if rg(*x) {
                    out.push((*x, gx));
                }
                if rg(*w) {
                    out.push((*w, gw));
                }
            } else {
                let p = geom.oh * geom.ow;
                let ckk = geom.c * geom.kh * geom.kw;
                if rg(*w) {
                    let cols = kernels::im2col(&nx.value, geom);
                    out.push((*w, kernels::matmul_nt(g, &cols, *out_c, p, ckk)));
                }
                if rg(*x) {
                    let dcols = kernels::matmul_tn(&nw.value, g, *out_c, ckk, p);
                    out.push((*x, kernels::col2im(&dcols, geom)));
                }
            }
        }
        Op::MaxPool { a, argmax, in_len } => {
            let mut d = vec![0.0; *in_len];
            for (&i, gv) in argmax.iter().zip(g) {
                d[i] += gv;
            }
            out.push((*a, d));
        }
        Op::Resize { a, c, h, w, oh, ow } => {
            out.push((*a, kernels::resize_bilinear_backward(g, *c, *h, *w, *oh, *ow)));
        }
        Op::GridSample { values, coords, h, w } => {
            let (nv, nc) = (&nodes[*values], &nodes[*coords]);
            let c = nv.shape[1];
            let mut gv = rg(*values).then(|| vec![0.0; nv.value.len()]);
            let mut gc = rg(*coords).then(|| vec![0.0; nc.value.len()]);
            for (i, gi) in g.chunks(c.max(1)).enumerate() {
                let t = Tap::new(nc.value[2 * i], nc.value[2 * i + 1], *h, *w);
                let i00 = t.y0 * w + t.x0;
                let i01 = t.y0 * w + t.x1;
                let i10 = t.y1 * w + t.x0;
                let i11 = t.y1 * w + t.x1;
                if let Some(gv) = &mut gv {
                    let taps = [
                        (i00, (1.0 - t.fy) * (1.0 - t.fx)),
                        (i01, (1.0 - t.fy) * t.fx),
                        (i10, t.fy * (1.0 - t.fx)),
                        (i11, t.fy * t.fx),
                    ];
                    for (idx, wt) in taps {
                        if wt != 0.0 {
                            let row = &mut gv[idx * c..(idx + 1) * c];
                            row.iter_mut().zip(gi).for_each(|(a, b)| *a += wt * b);
                        }
                    }
                }
                if let Some(gc) = &mut gc {
                    let v = |idx: usize| &nv.value[idx * c..(idx + 1) * c];
                    let (v00, v01, v10, v11) = (v(i00), v(i01), v(i10), v(i11));
                    let mut dx = 0.0;
                    let mut dy = 0.0;
                    for k in 0..c {
                        if t.free_x {
                            dx += gi[k]
                                * ((1.0 - t.fy) * (v01[k] - v00[k]) + t.fy * (v11[k] - v10[k]));
                        }
                        if t.free_y {
                            dy += gi[k]
                                * ((1.0 - t.fx) * (v10[k] - v00[k]) + t.fx * (v11[k] - v01[k]));
                        }
                    }
                    gc[2 * i] += dx;
                    gc[2 * i + 1] += dy;
                }
            }
            if let Some(gv) = gv {
                out.push((*values, gv));
            }
            if let Some(gc) = gc {
                out.push((*coords, gc));
            }
        }
    }
    out.retain(|(i, _)| rg(*i));
    out
}
