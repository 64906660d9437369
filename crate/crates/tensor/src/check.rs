//! Central finite-difference verification of analytic gradients.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Max over all coordinates of |analytic − central difference| /
/// max(1, |central difference|) for a scalar function of one tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_multi(|g, xs| f(g, xs[0]), std::slice::from_ref(x), eps, &[all])
}

/// Same measure for a function of several tensors, restricted to the
/// listed coordinates of each input (`coords[i]` indexes into `xs[i]`).
pub fn finite_diff_check_multi<F>(
    f: F,
    xs: &[Tensor],
    eps: f64,
    coords: &[Vec<usize>],
) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor], grad: bool| -> Result<(f64, Vec<Option<Tensor>>)> {
        let g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| g.input(t.shape(), t.data().to_vec(), grad))
            .collect::<Result<_>>()?;
        let loss = f(&g, &vars)?;
        let v = g.item(loss);
        if !v.is_finite() {
            return Err(TensorError::NonFinite(v));
        }
        if !grad {
            return Ok((v, Vec::new()));
        }
        g.backward(loss)?;
        Ok((v, vars.iter().map(|&x| g.grad(x)).collect()))
    };

    let (_, analytic) = eval(xs, true)?;
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = xs.to_vec();
    for (i, idxs) in coords.iter().enumerate() {
        for &c in idxs {
            let orig = xs[i].data()[c];
            // divide by the step actually taken after rounding
            let (hi, lo) = (orig + eps, orig - eps);
            work[i].data_mut()[c] = hi;
            let (fp, _) = eval(&work, false)?;
            work[i].data_mut()[c] = lo;
            let (fm, _) = eval(&work, false)?;
            work[i].data_mut()[c] = orig;
            let fd = (fp - fm) / (hi - lo);
            let a = analytic[i].as_ref().map_or(0.0, |t| t.data()[c]);
            worst = worst.max((a - fd).abs() / fd.abs().max(1.0));
        }
    }
    Ok(worst)
}
