//! Named parameter storage, per-graph binding and the small layer set the
//! model is built from.

use std::cell::RefCell;
use std::collections::HashMap;

use focus_tensor::{Graph, Tensor, Var};

use crate::error::{invalid, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|i| ParamId(*i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor by name; shapes must match exactly.
    pub fn load(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        if entries.len() != self.len() {
            return Err(invalid(format!(
                "parameter count mismatch: expected {}, found {}",
                self.len(),
                entries.len()
            )));
        }
        for (name, t) in entries {
            let id = self
                .id(name)
                .ok_or_else(|| invalid(format!("unknown parameter {name}")))?;
            if self.tensors[id.0].shape() != t.shape() {
                return Err(invalid(format!(
                    "parameter {name}: shape {:?} does not match {:?}",
                    t.shape(),
                    self.tensors[id.0].shape()
                )));
            }
            self.tensors[id.0] = t.clone();
        }
        Ok(())
    }
}

/// Parameter factory with a name prefix and a private random stream.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut SplitMix64,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut SplitMix64) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Init) -> T) -> T {
        let saved = self.prefix.clone();
        self.prefix = self.full_name(name);
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, Tensor::ones(shape))
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let len = shape.iter().product();
        let data = (0..len).map(|_| self.rng.uniform(-bound, bound)).collect();
        let n = self.full_name(name);
        self.store.add(n, Tensor::new(shape, data).expect("length matches"))
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let len = shape.iter().product();
        let data = (0..len).map(|_| std * self.rng.normal()).collect();
        let n = self.full_name(name);
        self.store.add(n, Tensor::new(shape, data).expect("length matches"))
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        let bound = (6.0 / (din + dout) as f64).sqrt();
        self.scope(name, |i| Linear {
            w: i.uniform("w", &[din, dout], bound),
            b: i.zeros("b", &[dout]),
        })
    }

    pub fn linear_zero(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        self.scope(name, |i| Linear {
            w: i.zeros("w", &[din, dout]),
            b: i.zeros("b", &[dout]),
        })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> LayerNorm {
        self.scope(name, |i| LayerNorm {
            gamma: i.ones("gamma", &[dim]),
            beta: i.zeros("beta", &[dim]),
        })
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        self.scope(name, |i| Conv {
            w: i.uniform("w", &[cout, cin, k, k], bound),
            b: i.zeros("b", &[cout]),
            stride,
            pad: k / 2,
            depthwise: false,
        })
    }

    pub fn depthwise(&mut self, name: &str, c: usize, k: usize) -> Conv {
        let bound = (6.0 / (k * k) as f64).sqrt();
        self.scope(name, |i| Conv {
            w: i.uniform("w", &[c, 1, k, k], bound),
            b: i.zeros("b", &[c]),
            stride: 1,
            pad: k / 2,
            depthwise: true,
        })
    }

    pub fn group_norm(&mut self, name: &str, c: usize, groups: usize) -> GroupNorm {
        self.scope(name, |i| GroupNorm {
            gamma: i.ones("gamma", &[c]),
            beta: i.zeros("beta", &[c]),
            groups,
        })
    }
}

/// Binds stored parameters to leaves of one graph on first use.
pub struct Session<'a> {
    pub g: &'a Graph,
    store: &'a ParamStore,
    bound: RefCell<Vec<Option<Var>>>,
    trainable: bool,
}

impl<'a> Session<'a> {
    /// `trainable = false` binds every parameter as a constant.
    pub fn new(g: &'a Graph, store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            g,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            trainable,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn p(&self, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let t = self.store.get(id);
        let v = self
            .g
            .input(t.shape(), t.data().to_vec(), self.trainable)
            .expect("stored tensor is consistent");
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Gradients of the bound parameters after `Graph::backward`; unbound
    /// parameters get `None`.
    pub fn grads(&self) -> Vec<Option<Vec<f64>>> {
        self.bound
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| self.g.grad(v)).map(Tensor::into_data))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// `x` is [N × in]; returns [N × out].
    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let y = s.g.matmul(x, s.p(self.w))?;
        Ok(s.g.add(y, s.p(self.b))?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let n = s.g.layer_norm(x, LN_EPS)?;
        let n = s.g.mul(n, s.p(self.gamma))?;
        Ok(s.g.add(n, s.p(self.beta))?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub depthwise: bool,
}

impl Conv {
    /// `x` is [C × H × W].
    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let y = s.g.conv2d(x, s.p(self.w), self.stride, self.pad, self.depthwise)?;
        let c = s.g.shape(y)[0];
        let b = s.g.reshape(s.p(self.b), &[c, 1, 1])?;
        Ok(s.g.add(y, b)?)
    }
}

/// Group normalisation over [C × H × W] with per-channel affine.
#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let shape = s.g.shape(x);
        let (c, hw) = (shape[0], shape[1..].iter().product::<usize>());
        if c % self.groups != 0 {
            return Err(invalid(format!("{c} channels in {} groups", self.groups)));
        }
        let grouped = s.g.reshape(x, &[self.groups, c / self.groups * hw])?;
        let n = s.g.layer_norm(grouped, LN_EPS)?;
        let n = s.g.reshape(n, &[c, hw])?;
        let gamma = s.g.reshape(s.p(self.gamma), &[c, 1])?;
        let beta = s.g.reshape(s.p(self.beta), &[c, 1])?;
        let y = s.g.add(s.g.mul(n, gamma)?, beta)?;
        Ok(s.g.reshape(y, &shape)?)
    }
}

/// [C × H × W] feature map to [H·W × C] tokens.
pub fn to_tokens(g: &Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x);
    let m = g.reshape(x, &[shape[0], shape[1] * shape[2]])?;
    Ok(g.transpose(m)?)
}

/// [H·W × C] tokens back to a [C × H × W] map.
pub fn from_tokens(g: &Graph, t: Var, h: usize, w: usize) -> Result<Var> {
    let c = g.shape(t)[1];
    let m = g.transpose(t)?;
    Ok(g.reshape(m, &[c, h, w])?)
}

/// Max relative error between session gradients and central differences
/// for the listed parameter coordinates of a scalar built by `f`.
pub fn check_param_grads<F>(
    store: &ParamStore,
    coords: &[(ParamId, usize)],
    eps: f64,
    f: F,
) -> Result<f64>
where
    F: Fn(&Session) -> Result<Var>,
{
    let eval = |st: &ParamStore, grad: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let g = Graph::new();
        let s = Session::new(&g, st, true);
        let loss = f(&s)?;
        let v = g.item(loss);
        if !v.is_finite() {
            return Err(focus_tensor::TensorError::NonFinite(v).into());
        }
        if !grad {
            return Ok((v, Vec::new()));
        }
        g.backward(loss)?;
        Ok((v, s.grads()))
    };
    let (_, grads) = eval(store, true)?;
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for &(id, c) in coords {
        let orig = store.get(id).data()[c];
        let (hi, lo) = (orig + eps, orig - eps);
        work.get_mut(id).data_mut()[c] = hi;
        let (fp, _) = eval(&work, false)?;
        work.get_mut(id).data_mut()[c] = lo;
        let (fm, _) = eval(&work, false)?;
        work.get_mut(id).data_mut()[c] = orig;
        let fd = (fp - fm) / (hi - lo);
        let a = grads[id.0].as_ref().map_or(0.0, |g| g[c]);
        worst = worst.max((a - fd).abs() / fd.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_session_records_no_gradient() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(1);
        let lin = Init::new(&mut store, &mut rng).linear("fc", 3, 2);
        let g = Graph::new();
        let s = Session::new(&g, &store, false);
        let x = g.input(&[1, 3], vec![1.0, 2.0, 3.0], true).unwrap();
        let y = g.sum(lin.forward(&s, x).unwrap());
        g.backward(y).unwrap();
        assert!(s.grads().iter().all(Option::is_none));
        assert!(g.grad(x).is_some());
    }

    #[test]
    fn scoped_names() {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(1);
        let mut init = Init::new(&mut store, &mut rng);
        init.scope("a", |i| i.scope("b", |i| i.linear("fc", 2, 2)));
        assert!(store.id("a.b.fc.w").is_some());
        assert!(store.id("a.b.fc.b").is_some());
    }
}
