//! Dense numeric kernels. Parallel kernels split work by output rows only,
//! so every output element is summed in a fixed order and results do not
//! depend on the thread count.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 16;

/// c[m×n] = a[m×k] · b[k×n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 {
        return c;
    }
    let row = |(i, out): (usize, &mut [f64])| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// c[m×n] = a[m×k] · b[n×k]ᵀ
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 {
        return c;
    }
    let row = |(i, out): (usize, &mut [f64])| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in out.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            *o = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// c[k×n] = a[m×k]ᵀ · b[m×n]
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let at = transpose(a, m, k);
    matmul(&at, b, k, m, n)
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        c: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Some(Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }
}

/// Unfolds [c×h×w] into columns [(c·kh·kw) × (oh·ow)].
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.oh * g.ow;
    let mut cols = vec![0.0; g.c * g.kh * g.kw * p];
    cols.par_chunks_mut(p).enumerate().for_each(|(r, out)| {
        let ci = r / (g.kh * g.kw);
        let ki = (r / g.kw) % g.kh;
        let kj = r % g.kw;
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for oy in 0..g.oh {
            let Some(iy) = g.src(oy, ki, g.h) else { continue };
            for ox in 0..g.ow {
                if let Some(ix) = g.src(ox, kj, g.w) {
                    out[oy * g.ow + ox] = plane[iy * g.w + ix];
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`].
pub fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.oh * g.ow;
    let kk = g.kh * g.kw;
    let mut x = vec![0.0; g.c * g.h * g.w];
    x.par_chunks_mut(g.h * g.w).enumerate().for_each(|(ci, plane)| {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = ci * kk + ki * g.kw + kj;
                let row = &cols[r * p..(r + 1) * p];
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ki, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(ix) = g.src(ox, kj, g.w) {
                            plane[iy * g.w + ix] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    });
    x
}

/// Depthwise convolution: one [kh×kw] filter per channel.
pub fn depthwise(x: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.c * g.oh * g.ow];
    out.par_chunks_mut(g.oh * g.ow)
        .enumerate()
        .for_each(|(ci, o)| {
            let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            let f = &wt[ci * g.kh * g.kw..(ci + 1) * g.kh * g.kw];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0.0;
                    for ki in 0..g.kh {
                        let Some(iy) = g.src(oy, ki, g.h) else { continue };
                        for kj in 0..g.kw {
                            if let Some(ix) = g.src(ox, kj, g.w) {
                                acc += f[ki * g.kw + kj] * plane[iy * g.w + ix];
                            }
                        }
                    }
                    o[oy * g.ow + ox] = acc;
                }
            }
        });
    out
}

/// Gradients of [`depthwise`] with respect to input and filters.
pub fn depthwise_backward(
    x: &[f64],
    wt: &[f64],
    gout: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>) {
    let kk = g.kh * g.kw;
    let per: Vec<(Vec<f64>, Vec<f64>)> = (0..g.c)
        .into_par_iter()
        .map(|ci| {
            let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            let f = &wt[ci * kk..(ci + 1) * kk];
            let go = &gout[ci * g.oh * g.ow..(ci + 1) * g.oh * g.ow];
            let mut gx = vec![0.0; g.h * g.w];
            let mut gw = vec![0.0; kk];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let d = go[oy * g.ow + ox];
                    if d == 0.0 {
                        continue;
                    }
                    for ki in 0..g.kh {
                        let Some(iy) = g.src(oy, ki, g.h) else { continue };
                        for kj in 0..g.kw {
                            if let Some(ix) = g.src(ox, kj, g.w) {
                                gw[ki * g.kw + kj] += d * plane[iy * g.w + ix];
                                gx[iy * g.w + ix] += d * f[ki * g.kw + kj];
                            }
                        }
                    }
                }
            }
            (gx, gw)
        })
        .collect();
    let mut gx = Vec::with_capacity(x.len());
    let mut gw = Vec::with_capacity(wt.len());
    for (a, b) in per {
        gx.extend(a);
        gw.extend(b);
    }
    (gx, gw)
}

/// Per-axis bilinear resampling weights with half-pixel centres
/// (align_corners = false); negative source coordinates clamp to 0.
#[derive(Debug, Clone)]
pub struct Lerp1d {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl Lerp1d {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for d in 0..output {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let l = (src.floor() as usize).min(input - 1);
            let h = (l + 1).min(input - 1);
            lo.push(l);
            hi.push(h);
            frac.push(if h == l { 0.0 } else { src - l as f64 });
        }
        Self { lo, hi, frac }
    }
}

/// Resizes each of `c` planes of size h×w to oh×ow.
pub fn resize_bilinear(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ly = Lerp1d::new(h, oh);
    let lx = Lerp1d::new(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        let p = &x[ci * h * w..(ci + 1) * h * w];
        let o = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
        for y in 0..oh {
            let (y0, y1, fy) = (ly.lo[y], ly.hi[y], ly.frac[y]);
            for xx in 0..ow {
                let (x0, x1, fx) = (lx.lo[xx], lx.hi[xx], lx.frac[xx]);
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                o[y * ow + xx] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward(
    g: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ly = Lerp1d::new(h, oh);
    let lx = Lerp1d::new(w, ow);
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        let gi = &g[ci * oh * ow..(ci + 1) * oh * ow];
        let o = &mut out[ci * h * w..(ci + 1) * h * w];
        for y in 0..oh {
            let (y0, y1, fy) = (ly.lo[y], ly.hi[y], ly.frac[y]);
            for xx in 0..ow {
                let (x0, x1, fx) = (lx.lo[xx], lx.hi[xx], lx.frac[xx]);
                let d = gi[y * ow + xx];
                o[y0 * w + x0] += d * (1.0 - fy) * (1.0 - fx);
                o[y0 * w + x1] += d * (1.0 - fy) * fx;
                o[y1 * w + x0] += d * fy * (1.0 - fx);
                o[y1 * w + x1] += d * fy * fx;
            }
        }
    }
    out
}

/// Bilinear lookup footprint of one continuous pixel coordinate, clamped to
/// the border.
#[derive(Debug, Clone, Copy)]
pub struct Tap {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
    /// false when the coordinate was clamped on that axis
    pub free_x: bool,
    pub free_y: bool,
}

impl Tap {
    pub fn new(x: f64, y: f64, h: usize, w: usize) -> Self {
        let (x0, x1, fx, free_x) = axis(x, w);
        let (y0, y1, fy, free_y) = axis(y, h);
        Self {
            x0,
            x1,
            y0,
            y1,
            fx,
            fy,
            free_x,
            free_y,
        }
    }
}

fn axis(v: f64, n: usize) -> (usize, usize, f64, bool) {
    let hi = (n - 1) as f64;
    if v.is_nan() || v <= 0.0 {
        return (0, 0, 0.0, false);
    }
    if v >= hi {
        return (n - 1, n - 1, 0.0, false);
    }
    let l = v.floor() as usize;
    (l, l + 1, v - l as f64, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        let bt = transpose(&b, 3, 4);
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 4), c);
        let at = transpose(&a, 2, 3);
        assert_eq!(matmul_tn(&at, &b, 3, 2, 4), c);
        assert_eq!(c[0], 0.0 * 0.0 + 1.0 * 2.0 + 2.0 * 4.0);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 5, 4, 3, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..40).map(|v| ((v * 7) % 11) as f64).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|v| ((v * 3) % 5) as f64 - 2.0).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, &g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn resize_same_size_is_identity() {
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        assert_eq!(resize_bilinear(&x, 1, 3, 4, 3, 4), x);
    }
}
