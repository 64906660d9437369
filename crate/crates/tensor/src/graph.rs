//! Recording graph. Every op executes eagerly and appends a node; node order
//! is therefore already a topological order, and backward walks it in
//! reverse.

use std::cell::{Cell, Ref, RefCell};

use crate::error::{invalid, mismatch, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::shape::{self, Axis3};
use crate::tensor::{numel, Tensor};

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Unary {
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Relu,
    Gelu,
    Abs,
    Scale(f64),
    AddScalar(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Reshape(usize),
    Narrow { a: usize, ax: Axis3, start: usize, len: usize },
    Concat { inputs: Vec<usize>, outer: usize, inner: usize, sizes: Vec<usize> },
    SumAll(usize),
    MeanAll(usize),
    SumAxis { a: usize, ax: Axis3 },
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { a: usize, eps: f64 },
    L2Normalize(usize),
    Conv2d { x: usize, w: usize, geom: ConvGeom, out_c: usize, depthwise: bool },
    MaxPool { a: usize, argmax: Vec<usize>, in_len: usize },
    Resize { a: usize, c: usize, h: usize, w: usize, oh: usize, ow: usize },
    GridSample { values: usize, coords: usize, h: usize, w: usize },
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

/// A single-threaded differentiation graph.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    done: Cell<bool>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf whose gradient is recorded iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Leaf that owns its data; `requires_grad` as given.
    pub fn input(&self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, requires_grad))
    }

    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        self.input(shape, data, false)
    }

    pub fn scalar_const(&self, v: f64) -> Var {
        self.push(vec![], vec![v], Op::Leaf, false)
    }

    /// Copy of `v` cut off from differentiation.
    pub fn detach(&self, v: Var) -> Var {
        let (shape, value) = {
            let n = &self.nodes.borrow()[v.0];
            (n.shape.clone(), n.value.clone())
        };
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn data(&self, v: Var) -> Ref<'_, [f64]> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_slice())
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes.borrow()[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    // ---- elementwise -------------------------------------------------

    fn unary(&self, kind: Unary, a: Var) -> Var {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            let f = unary_fn(kind);
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
        };
        self.push(shape, out, Op::Unary(kind, a.0), self.rg(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    /// ln(1 + eˣ), evaluated without overflow.
    pub fn softplus(&self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    /// tanh approximation of GELU.
    pub fn gelu(&self, a: Var) -> Var {
        self.unary(Unary::Gelu, a)
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(Unary::Scale(s), a)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        self.unary(Unary::AddScalar(s), a)
    }

    fn binary(&self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let f = binary_fn(kind);
            if na.shape == nb.shape {
                let out = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
                (na.shape.clone(), out)
            } else {
                let shape = shape::broadcast(&na.shape, &nb.shape)
                    .ok_or_else(|| mismatch(binary_name(kind), &[&na.shape, &nb.shape]))?;
                let ia = shape::broadcast_map(&shape, &na.shape);
                let ib = shape::broadcast_map(&shape, &nb.shape);
                let out = ia
                    .iter()
                    .zip(&ib)
                    .map(|(&i, &j)| f(na.value[i], nb.value[j]))
                    .collect();
                (shape, out)
            }
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Binary(kind, a.0, b.0), rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, a, b)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, a, b)
    }

    // ---- linear algebra & layout -----------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (out, m, k, n) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
                return Err(mismatch("matmul", &[&na.shape, &nb.shape]));
            }
            let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
            (kernels::matmul(&na.value, &nb.value, m, k, n), m, k, n)
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::Matmul { a: a.0, b: b.0, m, k, n }, rg))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (out, rows, cols) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if na.shape.len() != 2 {
                return Err(mismatch("transpose", &[&na.shape]));
            }
            let (r, c) = (na.shape[0], na.shape[1]);
            (kernels::transpose(&na.value, r, c), r, c)
        };
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a: a.0, rows, cols }, self.rg(a)))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if numel(shape) != na.value.len() {
                return Err(mismatch("reshape", &[&na.shape, shape]));
            }
            na.value.clone()
        };
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a.0), self.rg(a)))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (shape, out, ax) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if axis >= na.shape.len() || start + len > na.shape[axis] {
                return Err(invalid(
                    "narrow",
                    format!("range {start}..{} on axis {axis} of {:?}", start + len, na.shape),
                ));
            }
            let ax = Axis3::of(&na.shape, axis);
            let mut out = Vec::with_capacity(ax.outer * len * ax.inner);
            for o in 0..ax.outer {
                let base = o * ax.n * ax.inner + start * ax.inner;
                out.extend_from_slice(&na.value[base..base + len * ax.inner]);
            }
            let mut shape = na.shape.clone();
            shape[axis] = len;
            (shape, out, ax)
        };
        Ok(self.push(shape, out, Op::Narrow { a: a.0, ax, start, len }, self.rg(a)))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let total: usize = sizes.iter().sum();
        let shape = self.shape(a);
        if axis >= shape.len() || total != shape[axis] {
            return Err(invalid("split", format!("sizes {sizes:?} on axis {axis} of {shape:?}")));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let v = self.narrow(a, axis, start, s);
                start += s;
                v
            })
            .collect()
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(invalid("concat", "no inputs"));
        }
        let (shape, out, outer, inner, sizes) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[xs[0].0].shape;
            if axis >= first.len() {
                return Err(invalid("concat", format!("axis {axis} of {first:?}")));
            }
            let mut sizes = Vec::with_capacity(xs.len());
            for x in xs {
                let s = &nodes[x.0].shape;
                let compatible = s.len() == first.len()
                    && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(mismatch("concat", &[first, s]));
                }
                sizes.push(s[axis]);
            }
            let ax = Axis3::of(first, axis);
            let total: usize = sizes.iter().sum();
            let mut out = Vec::with_capacity(ax.outer * total * ax.inner);
            for o in 0..ax.outer {
                for (x, &s) in xs.iter().zip(&sizes) {
                    let v = &nodes[x.0].value;
                    out.extend_from_slice(&v[o * s * ax.inner..(o + 1) * s * ax.inner]);
                }
            }
            let mut shape = first.clone();
            shape[axis] = total;
            (shape, out, ax.outer, ax.inner, sizes)
        };
        let rg = xs.iter().any(|&x| self.rg(x));
        let inputs = xs.iter().map(|x| x.0).collect();
        Ok(self.push(shape, out, Op::Concat { inputs, outer, inner, sizes }, rg))
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let s: f64 = self.nodes.borrow()[a.0].value.iter().sum();
        self.push(vec![], vec![s], Op::SumAll(a.0), self.rg(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let m = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            v.iter().sum::<f64>() / v.len().max(1) as f64
        };
        self.push(vec![], vec![m], Op::MeanAll(a.0), self.rg(a))
    }

    /// Sums out one axis (the axis is removed from the shape).
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let (shape, out, ax) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if axis >= na.shape.len() {
                return Err(invalid("sum_axis", format!("axis {axis} of {:?}", na.shape)));
            }
            let ax = Axis3::of(&na.shape, axis);
            let mut out = vec![0.0; ax.outer * ax.inner];
            for o in 0..ax.outer {
                for i in 0..ax.n {
                    let row = &na.value[(o * ax.n + i) * ax.inner..(o * ax.n + i + 1) * ax.inner];
                    for (acc, v) in out[o * ax.inner..(o + 1) * ax.inner].iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            let mut shape = na.shape.clone();
            shape.remove(axis);
            (shape, out, ax)
        };
        Ok(self.push(shape, out, Op::SumAxis { a: a.0, ax }, self.rg(a)))
    }

    // ---- normalisations -------------------------------------------------

    /// Softmax over the last axis. `mask`, when given, is added to the
    /// logits first; a row whose mask is −∞ everywhere ignores the mask.
    pub fn softmax(&self, a: Var, mask: Option<&[f64]>) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let last = *na.shape.last().ok_or_else(|| invalid("softmax", "rank-0 input"))?;
            if let Some(m) = mask {
                if m.len() != na.value.len() {
                    return Err(invalid(
                        "softmax",
                        format!("mask length {} for shape {:?}", m.len(), na.shape),
                    ));
                }
            }
            let mut out = vec![0.0; na.value.len()];
            for (r, row) in out.chunks_mut(last.max(1)).enumerate() {
                let x = &na.value[r * last..(r + 1) * last];
                let m = mask.map(|m| &m[r * last..(r + 1) * last]);
                let m = m.filter(|m| m.iter().any(|v| *v != f64::NEG_INFINITY));
                softmax_row(x, m, row);
            }
            (na.shape.clone(), out)
        };
        Ok(self.push(shape, out, Op::Softmax(a.0), self.rg(a)))
    }

    pub fn log_softmax(&self, a: Var) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let last = *na.shape.last().ok_or_else(|| invalid("log_softmax", "rank-0 input"))?;
            let mut out = na.value.clone();
            for row in out.chunks_mut(last.max(1)) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            (na.shape.clone(), out)
        };
        Ok(self.push(shape, out, Op::LogSoftmax(a.0), self.rg(a)))
    }

    /// (x − mean) / sqrt(var + eps) over the last axis, no affine part.
    pub fn layer_norm(&self, a: Var, eps: f64) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let last = *na.shape.last().ok_or_else(|| invalid("layer_norm", "rank-0 input"))?;
            let mut out = na.value.clone();
            for row in out.chunks_mut(last.max(1)) {
                let (mu, rstd) = moments(row, eps);
                row.iter_mut().for_each(|v| *v = (*v - mu) * rstd);
            }
            (na.shape.clone(), out)
        };
        Ok(self.push(shape, out, Op::LayerNorm { a: a.0, eps }, self.rg(a)))
    }

    /// x / ‖x‖₂ over the last axis.
    pub fn l2_normalize(&self, a: Var) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let last = *na.shape.last().ok_or_else(|| invalid("l2_normalize", "rank-0 input"))?;
            let mut out = na.value.clone();
            for row in out.chunks_mut(last.max(1)) {
                let n = l2_norm(row);
                row.iter_mut().for_each(|v| *v /= n);
            }
            (na.shape.clone(), out)
        };
        Ok(self.push(shape, out, Op::L2Normalize(a.0), self.rg(a)))
    }

    // ---- spatial --------------------------------------------------------

    /// 2-D convolution of a [C×H×W] input with [O×C×kh×kw] weights and zero
    /// padding. With `depthwise`, weights are [C×1×kh×kw] and O = C.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize, depthwise: bool) -> Result<Var> {
        let (out, geom, out_c) = {
            let nodes = self.nodes.borrow();
            let (nx, nw) = (&nodes[x.0], &nodes[w.0]);
            let bad = || mismatch("conv2d", &[&nx.shape, &nw.shape]);
            if nx.shape.len() != 3 || nw.shape.len() != 4 {
                return Err(bad());
            }
            let (c, h, wd) = (nx.shape[0], nx.shape[1], nx.shape[2]);
            let (o, ci, kh, kw) = (nw.shape[0], nw.shape[1], nw.shape[2], nw.shape[3]);
            if depthwise && (ci != 1 || o != c) || !depthwise && ci != c {
                return Err(bad());
            }
            let geom = ConvGeom::new(c, h, wd, kh, kw, stride, pad).ok_or_else(bad)?;
            let out = if depthwise {
                kernels::depthwise(&nx.value, &nw.value, &geom)
            } else {
                let cols = kernels::im2col(&nx.value, &geom);
                kernels::matmul(&nw.value, &cols, o, c * kh * kw, geom.oh * geom.ow)
            };
            (out, geom, o)
        };
        let rg = self.rg(x) || self.rg(w);
        let op = Op::Conv2d {
            x: x.0,
            w: w.0,
            geom,
            out_c,
            depthwise,
        };
        Ok(self.push(vec![out_c, geom.oh, geom.ow], out, op, rg))
    }

    /// Max pooling over [C×H×W] with −∞ padding.
    pub fn max_pool2d(&self, a: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (shape, out, argmax, in_len) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if na.shape.len() != 3 {
                return Err(mismatch("max_pool2d", &[&na.shape]));
            }
            let (c, h, w) = (na.shape[0], na.shape[1], na.shape[2]);
            let g = ConvGeom::new(c, h, w, k, k, stride, pad)
                .ok_or_else(|| mismatch("max_pool2d", &[&na.shape]))?;
            let mut out = Vec::with_capacity(c * g.oh * g.ow);
            let mut argmax = Vec::with_capacity(c * g.oh * g.ow);
            for ci in 0..c {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut at = usize::MAX;
                        for ki in 0..k {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kj in 0..k {
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                let idx = ci * h * w + iy as usize * w + ix as usize;
                                if na.value[idx] > best || at == usize::MAX {
                                    best = na.value[idx];
                                    at = idx;
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(at);
                    }
                }
            }
            (vec![c, g.oh, g.ow], out, argmax, na.value.len())
        };
        Ok(self.push(shape, out, Op::MaxPool { a: a.0, argmax, in_len }, self.rg(a)))
    }

    /// Bilinear resize of a [C×H×W] (or [H×W]) map, half-pixel centres.
    pub fn resize_bilinear(&self, a: Var, oh: usize, ow: usize) -> Result<Var> {
        if oh == 0 || ow == 0 {
            return Err(invalid("resize_bilinear", "zero target size"));
        }
        let (shape, out, c, h, w) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let (c, h, w) = match na.shape.as_slice() {
                [h, w] => (1, *h, *w),
                [c, h, w] => (*c, *h, *w),
                _ => return Err(mismatch("resize_bilinear", &[&na.shape])),
            };
            if h == 0 || w == 0 {
                return Err(mismatch("resize_bilinear", &[&na.shape]));
            }
            let out = kernels::resize_bilinear(&na.value, c, h, w, oh, ow);
            let shape = if na.shape.len() == 2 { vec![oh, ow] } else { vec![c, oh, ow] };
            (shape, out, c, h, w)
        };
        let op = Op::Resize { a: a.0, c, h, w, oh, ow };
        Ok(self.push(shape, out, op, self.rg(a)))
    }

    /// Samples `values` ([H·W × C], row-major over an H×W grid) at
    /// continuous pixel coordinates `coords` ([M × 2], columns x then y,
    /// integer = pixel centre). Out-of-range coordinates clamp to the
    /// border. Returns [M × C].
    pub fn grid_sample(&self, values: Var, h: usize, w: usize, coords: Var) -> Result<Var> {
        let (m, c, out) = {
            let nodes = self.nodes.borrow();
            let (nv, nc) = (&nodes[values.0], &nodes[coords.0]);
            if nv.shape.len() != 2 || nv.shape[0] != h * w || h == 0 || w == 0 {
                return Err(mismatch("grid_sample", &[&nv.shape, &[h, w]]));
            }
            if nc.shape.len() != 2 || nc.shape[1] != 2 {
                return Err(mismatch("grid_sample", &[&nv.shape, &nc.shape]));
            }
            if let Some(bad) = nc.value.iter().find(|v| !v.is_finite()) {
                return Err(invalid("grid_sample", format!("coordinate {bad}")));
            }
            let (m, c) = (nc.shape[0], nv.shape[1]);
            let mut out = vec![0.0; m * c];
            for (i, o) in out.chunks_mut(c.max(1)).enumerate() {
                let t = kernels::Tap::new(nc.value[2 * i], nc.value[2 * i + 1], h, w);
                let corners = [
                    (t.y0 * w + t.x0, (1.0 - t.fy) * (1.0 - t.fx)),
                    (t.y0 * w + t.x1, (1.0 - t.fy) * t.fx),
                    (t.y1 * w + t.x0, t.fy * (1.0 - t.fx)),
                    (t.y1 * w + t.x1, t.fy * t.fx),
                ];
                for (idx, wt) in corners {
                    if wt == 0.0 {
                        continue;
                    }
                    let row = &nv.value[idx * c..(idx + 1) * c];
                    o.iter_mut().zip(row).for_each(|(a, b)| *a += wt * b);
                }
            }
            (m, c, out)
        };
        let rg = self.rg(values) || self.rg(coords);
        let op = Op::GridSample {
            values: values.0,
            coords: coords.0,
            h,
            w,
        };
        Ok(self.push(vec![m, c], out, op, rg))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Populates gradients of every node
    /// that requires grad; intermediate gradients are freed once consumed.
    pub fn backward(&self, loss: Var) -> Result<()> {
        if self.is_empty() {
            return Err(TensorError::EmptyGraph);
        }
        if self.done.get() {
            return Err(TensorError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let ln = &nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        self.done.set(true);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if ln.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, gi) in crate::backward::vjp(&nodes, idx, &g) {
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        // keep only leaf gradients
        for (i, n) in nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.requires_grad {
                grads[i] = None;
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(v.0)?.as_ref()?;
        let shape = self.shape(v);
        Some(Tensor::new(&shape, g.clone()).expect("grad has node shape"))
    }

    pub fn reset_grads(&self) {
        self.grads.borrow_mut().clear();
        self.done.set(false);
    }
}

pub(crate) fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}

pub(crate) fn l2_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12)
}

fn softmax_row(x: &[f64], mask: Option<&[f64]>, out: &mut [f64]) {
    match mask {
        Some(m) => out.iter_mut().zip(x.iter().zip(m)).for_each(|(o, (a, b))| *o = a + b),
        None => out.copy_from_slice(x),
    }
    let mx = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in out.iter_mut() {
        *v = if *v == f64::NEG_INFINITY { 0.0 } else { (*v - mx).exp() };
        s += *v;
    }
    out.iter_mut().for_each(|v| *v /= s);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_C: f64 = 0.044_715;

fn unary_fn(kind: Unary) -> impl Fn(f64) -> f64 {
    move |x| match kind {
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Softplus => softplus(x),
        Unary::Relu => x.max(0.0),
        Unary::Gelu => 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()),
        Unary::Abs => x.abs(),
        Unary::Scale(s) => x * s,
        Unary::AddScalar(s) => x + s,
    }
}

fn binary_fn(kind: Binary) -> fn(f64, f64) -> f64 {
    match kind {
        Binary::Add => |a, b| a + b,
        Binary::Sub => |a, b| a - b,
        Binary::Mul => |a, b| a * b,
        Binary::Div => |a, b| a / b,
        Binary::Max => |a, b| if a >= b { a } else { b },
        Binary::Min => |a, b| if a <= b { a } else { b },
    }
}

fn binary_name(kind: Binary) -> &'static str {
    match kind {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
        Binary::Div => "div",
        Binary::Max => "maximum",
        Binary::Min => "minimum",
    }
}
