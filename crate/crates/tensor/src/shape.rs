//! Shape arithmetic. Broadcasting aligns shapes at their trailing axes; a
//! size-1 (or missing) axis stretches to match the other operand.

/// A shape viewed as [outer, n, inner] around one axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Axis3 {
    pub outer: usize,
    pub n: usize,
    pub inner: usize,
}

impl Axis3 {
    pub fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            n: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

pub fn broadcast(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of the broadcast operand
/// with shape `input`.
pub fn broadcast_map(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - input.len();
    // strides of the input expressed on the output axes (0 where stretched)
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..input.len()).rev() {
        if input[i] != 1 {
            strides[i + offset] = s;
        }
        s *= input[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..total {
        map.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            flat -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}
