//! Classical image operations: grayscale, Gaussian smoothing, Canny edges,
//! edge overlay, bilinear resize and the first principal component used to
//! seed the attention mask.
//!
//! Images are stored channel-major (`[c][y][x]`) with values in [0, 1].

use std::path::Path;

use focus_tensor::kernels;

use crate::error::{invalid, shape_err, Result};
use crate::io::atomic_write;

/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if c != 1 && c != 3 {
            return Err(invalid(format!("image must have 1 or 3 channels, got {c}")));
        }
        if data.len() != h * w * c {
            return Err(shape_err("image", h * w * c, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { h, w, c, data })
    }

    /// Builds an image, clamping values into [0, 1].
    pub fn from_clamped(h: usize, w: usize, c: usize, mut data: Vec<f64>) -> Result<Self> {
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Self::new(h, w, c, data)
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Result<Self> {
        Self::new(h, w, c, vec![value; h * w * c])
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, ch: usize) -> &[f64] {
        &self.data[ch * self.h * self.w..(ch + 1) * self.h * self.w]
    }

    pub fn get(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.data[(ch * self.h + y) * self.w + x]
    }
}

/// Binary edge indicator, one value per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl EdgeMap {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v > 0.0).count()
    }
}

pub fn to_grayscale(img: &Image) -> Result<Image> {
    if img.c != 3 {
        return Err(invalid(format!("grayscale needs 3 channels, got {}", img.c)));
    }
    let n = img.h * img.w;
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let data = (0..n)
        // same weights, rearranged so gray inputs map to themselves exactly
        .map(|i| (g[i] + LUMA[0] * (r[i] - g[i]) + LUMA[2] * (b[i] - g[i])).clamp(0.0, 1.0))
        .collect();
    Image::new(img.h, img.w, 1, data)
}

/// Normalized 1-D Gaussian taps for offsets −r..=r, r = ⌈3σ⌉.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("gaussian sigma must be > 0, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    Ok(k)
}

/// Half-sample symmetric reflection: index −1 maps to 0, n maps to n−1.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn convolve_rows(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as i64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * row[reflect(x as i64 + j as i64 - r, w)])
                .sum();
        }
    }
    out
}

fn convolve_cols(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as i64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * src[reflect(y as i64 + j as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Separable Gaussian blur of a single-channel image with reflect padding.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    if img.c != 1 {
        return Err(invalid(format!("blur needs 1 channel, got {}", img.c)));
    }
    let k = gaussian_kernel(sigma)?;
    let tmp = convolve_rows(&img.data, img.h, img.w, &k);
    let out = convolve_cols(&tmp, img.h, img.w, &k);
    Image::from_clamped(img.h, img.w, 1, out)
}

/// Sobel gradients with replicated borders.
fn sobel(img: &Image) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (img.h, img.w);
    let at = |y: i64, x: i64| {
        let y = y.clamp(0, h as i64 - 1) as usize;
        let x = x.clamp(0, w as i64 - 1) as usize;
        img.data[y * w + x]
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        }
    }
    (gx, gy)
}

/// Sobel gradient magnitude scaled into [0, 1] (the largest possible Sobel
/// response on a [0, 1] image is 4√2).
pub fn gradient_magnitude(img: &Image) -> Result<Vec<f64>> {
    if img.c != 1 {
        return Err(invalid(format!("gradient needs 1 channel, got {}", img.c)));
    }
    let (gx, gy) = sobel(img);
    let norm = 4.0 * std::f64::consts::SQRT_2;
    Ok(gx
        .iter()
        .zip(&gy)
        .map(|(a, b)| (a.hypot(*b) / norm).min(1.0))
        .collect())
}

/// Canny edges on an already smoothed single-channel image: Sobel
/// gradients, non-maximum suppression over four direction sectors, double
/// thresholding and 8-connected hysteresis. Border pixels never fire.
pub fn edge_detect(img: &Image, low: f64, high: f64) -> Result<EdgeMap> {
    if !(0.0 <= low && low < high && high <= 1.0) {
        return Err(invalid(format!("edge thresholds need 0 <= low < high <= 1, got {low}, {high}")));
    }
    if img.c != 1 {
        return Err(invalid(format!("edge detection needs 1 channel, got {}", img.c)));
    }
    let (h, w) = (img.h, img.w);
    let (gx, gy) = sobel(img);
    let norm = 4.0 * std::f64::consts::SQRT_2;
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b) / norm).collect();

    let mut thin = vec![0.0; h * w];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let angle = gy[i].atan2(gx[i]).to_degrees().rem_euclid(180.0);
            // neighbour offsets along the gradient: (before, after)
            let (dy, dx): (i64, i64) = if !(22.5..157.5).contains(&angle) {
                (0, 1)
            } else if angle < 67.5 {
                (1, 1)
            } else if angle < 112.5 {
                (1, 0)
            } else {
                (1, -1)
            };
            let nb = |s: i64| mag[((y as i64 + s * dy) as usize) * w + (x as i64 + s * dx) as usize];
            // ties resolve towards the positive side so plateaus keep one pixel
            if m >= nb(-1) && m > nb(1) {
                thin[i] = m;
            }
        }
    }

    let mut out = vec![0.0; h * w];
    let mut stack: Vec<usize> = Vec::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= high {
            out[i] = 1.0;
            stack.push(i);
        }
    }
    while let Some(i) = stack.pop() {
        let (y, x) = ((i / w) as i64, (i % w) as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out[j] == 0.0 && thin[j] >= low && thin[j] > 0.0 {
                    out[j] = 1.0;
                    stack.push(j);
                }
            }
        }
    }
    Ok(EdgeMap { h, w, data: out })
}

/// Grayscale, blur and [`edge_detect`] in one call.
pub fn canny(img: &Image, sigma: f64, low: f64, high: f64) -> Result<EdgeMap> {
    let gray = if img.c == 3 { to_grayscale(img)? } else { img.clone() };
    edge_detect(&gaussian_blur(&gray, sigma)?, low, high)
}

/// Adds a per-pixel map to every channel and clamps to [0, 1].
pub fn overlay_map(img: &Image, map: &[f64]) -> Result<Image> {
    let n = img.h * img.w;
    if map.len() != n {
        return Err(shape_err("overlay", n, map.len()));
    }
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, v)| (v + map[i % n]).clamp(0.0, 1.0))
        .collect();
    Image::new(img.h, img.w, img.c, data)
}

pub fn overlay_edges(img: &Image, edges: &EdgeMap) -> Result<Image> {
    if edges.h != img.h || edges.w != img.w {
        return Err(shape_err(
            "overlay_edges",
            format!("{}x{}", img.h, img.w),
            format!("{}x{}", edges.h, edges.w),
        ));
    }
    overlay_map(img, &edges.data)
}

/// Bilinear resize with half-pixel centres (align_corners = false).
pub fn resize_bilinear(img: &Image, oh: usize, ow: usize) -> Result<Image> {
    if oh == 0 || ow == 0 {
        return Err(invalid(format!("resize target {oh}x{ow} has a zero dimension")));
    }
    let out = kernels::resize_bilinear(&img.data, img.c, img.h, img.w, oh, ow);
    Image::from_clamped(oh, ow, img.c, out)
}

/// Resize of an arbitrary real-valued single map.
pub fn resize_map(map: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Result<Vec<f64>> {
    if oh == 0 || ow == 0 {
        return Err(invalid(format!("resize target {oh}x{ow} has a zero dimension")));
    }
    if map.len() != h * w {
        return Err(shape_err("resize_map", h * w, map.len()));
    }
    Ok(kernels::resize_bilinear(map, 1, h, w, oh, ow))
}

#[derive(Debug, Clone)]
pub struct Pca {
    /// Unit eigenvector of the sample covariance with the largest eigenvalue.
    pub direction: Vec<f64>,
    pub scores: Vec<f64>,
    pub eigenvalue: f64,
}

pub const PCA_MAX_ITERS: usize = 200;
pub const PCA_TOL: f64 = 1e-9;

/// First principal component of `n` row vectors of length `c` by power
/// iteration, started from the centred row of largest norm.
///
/// The sign is fixed so that the mean magnitude of positive scores is at
/// least the mean magnitude of negative scores; the smaller, more distant
/// cluster therefore scores positive. On a tie the largest-magnitude score
/// is made positive.
pub fn pca_first_component(features: &[f64], n: usize, c: usize) -> Result<Pca> {
    if n < 2 {
        return Err(invalid(format!("pca needs at least 2 rows, got {n}")));
    }
    if features.len() != n * c {
        return Err(shape_err("pca", n * c, features.len()));
    }
    let mut mean = vec![0.0; c];
    for row in features.chunks(c) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred: Vec<f64> = features
        .chunks(c)
        .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m).collect::<Vec<_>>())
        .collect();

    let (start, best) = centred
        .chunks(c)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .enumerate()
        .fold((0, 0.0), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    let scale = mean.iter().fold(1.0f64, |a, m| a.max(m.abs()));
    if best <= 1e-12 * scale {
        return Err(crate::Error::DegenerateFeatures);
    }

    let mut cov = kernels::matmul_tn(&centred, &centred, n, c, c);
    cov.iter_mut().for_each(|v| *v /= (n - 1) as f64);

    let mut v: Vec<f64> = centred[start * c..(start + 1) * c].iter().map(|x| x / best).collect();
    let mut lambda = 0.0;
    for _ in 0..PCA_MAX_ITERS {
        let mut next = kernels::matmul(&cov, &v, c, c, 1);
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= f64::MIN_POSITIVE {
            return Err(crate::Error::DegenerateFeatures);
        }
        next.iter_mut().for_each(|x| *x /= norm);
        lambda = norm;
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        v = next;
        if delta < PCA_TOL {
            break;
        }
    }

    let mut scores = kernels::matmul(&centred, &v, n, c, 1);
    let (mut pos, mut np, mut neg, mut nn) = (0.0, 0usize, 0.0, 0usize);
    for s in &scores {
        if *s > 0.0 {
            pos += s;
            np += 1;
        } else if *s < 0.0 {
            neg -= s;
            nn += 1;
        }
    }
    let mp = if np > 0 { pos / np as f64 } else { 0.0 };
    let mn = if nn > 0 { neg / nn as f64 } else { 0.0 };
    // scores sum to zero, so the means tie whenever the counts do; then the
    // largest-magnitude score decides
    let flip = if (mp - mn).abs() <= 1e-9 * mp.max(mn) {
        let far = scores.iter().copied().fold(0.0f64, |a, s| if s.abs() > a.abs() * (1.0 + 1e-9) { s } else { a });
        far < 0.0
    } else {
        mp < mn
    };
    if flip {
        v.iter_mut().for_each(|x| *x = -*x);
        scores.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(Pca {
        direction: v,
        scores,
        eigenvalue: lambda,
    })
}

pub fn binarize(scores: &[f64], threshold: f64) -> Vec<f64> {
    scores.iter().map(|s| if *s > threshold { 1.0 } else { 0.0 }).collect()
}

/// Reads an 8-bit PNG. Colour inputs become 3 channels, grayscale 1.
pub fn read_png(path: &Path) -> Result<Image> {
    let dynimg = image::open(path)?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    match dynimg {
        image::DynamicImage::ImageLuma8(buf) => {
            let data = buf.as_raw().iter().map(|v| *v as f64 / 255.0).collect();
            Image::new(h, w, 1, data)
        }
        other => {
            let rgb = other.to_rgb8();
            let raw = rgb.as_raw();
            let mut data = vec![0.0; 3 * h * w];
            for i in 0..h * w {
                for ch in 0..3 {
                    data[ch * h * w + i] = raw[3 * i + ch] as f64 / 255.0;
                }
            }
            Image::new(h, w, 3, data)
        }
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let (h, w) = (img.h, img.w);
    let dynimg = if img.c == 1 {
        let raw = img.data.iter().map(|v| to_u8(*v)).collect();
        image::DynamicImage::ImageLuma8(
            image::GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer size"),
        )
    } else {
        let mut raw = vec![0u8; 3 * h * w];
        for i in 0..h * w {
            for ch in 0..3 {
                raw[3 * i + ch] = to_u8(img.data[ch * h * w + i]);
            }
        }
        image::DynamicImage::ImageRgb8(
            image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer size"),
        )
    };
    let mut bytes = Vec::new();
    dynimg.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    Ok(bytes)
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    atomic_write(path, &encode_png(img)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_is_half_sample_symmetric() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
        assert_eq!(reflect(-1, 1), 0);
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.0, 0.0]).is_err());
    }
}
