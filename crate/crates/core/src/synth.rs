//! Synthetic foreground scenes and the images/ + masks/ dataset layout.
//!
//! A scene is a smooth closed blob on a band-limited sinusoid texture. All
//! randomness comes from [`SplitMix64`], so a seed reproduces the same
//! bytes everywhere.

use std::f64::consts::PI;
use std::path::Path;

use crate::criterion::tight_box;
use crate::error::{invalid, Error, Result};
use crate::imgproc::{read_png, write_png, Image};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Salient,
    Camouflage,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "salient" => Ok(Mode::Salient),
            "camouflage" => Ok(Mode::Camouflage),
            other => Err(Error::Config(format!(
                "unknown synth mode {other:?} (expected salient or camouflage)"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Salient => "salient",
            Mode::Camouflage => "camouflage",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureParams {
    /// Sinusoids per channel.
    pub waves: usize,
    /// Largest spatial frequency in cycles per image.
    pub max_freq: f64,
    /// Total amplitude per channel.
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeParams {
    /// Highest harmonic of the radius function.
    pub order: usize,
    /// Base radius range as a fraction of the image size.
    pub scale: (f64, f64),
    /// Bound on the harmonic coefficients' total relative amplitude.
    pub wobble: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub mode: Mode,
    pub size: usize,
    pub seed: u64,
    pub texture: TextureParams,
    pub shape: ShapeParams,
    /// Histogram distance separating the two modes.
    pub hist_bound: f64,
}

pub const SIZES: [usize; 3] = [64, 96, 128];
pub const MAX_ATTEMPTS: usize = 20;
pub const MARGIN: f64 = 2.0;
pub const MIN_AREA: f64 = 0.05;
pub const MAX_AREA: f64 = 0.60;
pub const MIN_COLOR_DISTANCE: f64 = 0.3;
pub const MAX_PERTURBATION: f64 = 0.05;
const SUPERSAMPLE: usize = 4;
const HIST_BINS: usize = 4;

impl SceneSpec {
    pub fn new(mode: Mode, size: usize, seed: u64) -> Self {
        Self {
            mode,
            size,
            seed,
            texture: TextureParams {
                waves: 4,
                max_freq: 6.0,
                amplitude: 0.12,
            },
            shape: ShapeParams {
                order: 3,
                scale: (0.18, 0.32),
                wobble: 0.3,
            },
            hist_bound: 0.5,
        }
    }

    fn validate(&self) -> Result<()> {
        if !SIZES.contains(&self.size) {
            return Err(invalid(format!("scene size {} not in {SIZES:?}", self.size)));
        }
        let t = &self.texture;
        if t.waves == 0 || !(t.max_freq > 0.0) || !(0.0..=0.2).contains(&t.amplitude) {
            return Err(invalid("texture parameters out of range"));
        }
        let s = &self.shape;
        let (lo, hi) = s.scale;
        if s.order == 0 || !(0.0 < lo && lo <= hi && hi < 0.5) || !(0.0..1.0).contains(&s.wobble) {
            return Err(invalid("shape parameters out of range"));
        }
        if hi * (1.0 + s.wobble) * self.size as f64 + MARGIN >= self.size as f64 / 2.0 {
            return Err(invalid("object scale too large for the image"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Image,
    pub fg_mask: Vec<f64>,
    pub bg_mask: Vec<f64>,
    pub fg_box: [f64; 4],
    pub bg_box: [f64; 4],
}

impl ImageSample {
    /// Derives the background mask and both boxes from a binary mask.
    pub fn from_mask(id: impl Into<String>, image: Image, fg_mask: Vec<f64>) -> Result<Self> {
        let (h, w) = (image.height(), image.width());
        if fg_mask.len() != h * w {
            return Err(crate::error::shape_err("sample mask", h * w, fg_mask.len()));
        }
        let fg: Vec<f64> = fg_mask.iter().map(|v| if *v > 0.5 { 1.0 } else { 0.0 }).collect();
        let bg: Vec<f64> = fg.iter().map(|v| 1.0 - v).collect();
        Ok(Self {
            id: id.into(),
            fg_box: tight_box(&fg, h, w),
            bg_box: tight_box(&bg, h, w),
            image,
            fg_mask: fg,
            bg_mask: bg,
        })
    }

    pub fn area_fraction(&self) -> f64 {
        self.fg_mask.iter().sum::<f64>() / self.fg_mask.len() as f64
    }
}

#[derive(Debug, Clone)]
struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

#[derive(Debug, Clone)]
struct Texture {
    base: [f64; 3],
    waves: [Vec<Wave>; 3],
}

impl Texture {
    fn random(rng: &mut SplitMix64, p: &TextureParams, base: [f64; 3]) -> Self {
        let mut channel = || {
            let raw: Vec<f64> = (0..p.waves).map(|_| rng.uniform(0.2, 1.0)).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter()
                .map(|a| {
                    let f = rng.uniform(1.0, p.max_freq);
                    let theta = rng.uniform(0.0, 2.0 * PI);
                    Wave {
                        fx: f * theta.cos(),
                        fy: f * theta.sin(),
                        phase: rng.uniform(0.0, 2.0 * PI),
                        amp: p.amplitude * a / total,
                    }
                })
                .collect::<Vec<_>>()
        };
        let waves = [channel(), channel(), channel()];
        Self { base, waves }
    }

    /// Same waves with every phase shifted and the base colour nudged.
    fn perturbed(&self, rng: &mut SplitMix64) -> Self {
        let mut t = self.clone();
        for c in 0..3 {
            t.base[c] = (t.base[c] + rng.uniform(-MAX_PERTURBATION, MAX_PERTURBATION)).clamp(0.0, 1.0);
        }
        let shift = rng.uniform(0.25 * PI, 1.75 * PI);
        t.waves
            .iter_mut()
            .flatten()
            .for_each(|w| w.phase += shift);
        t
    }

    fn sample(&self, c: usize, u: f64, v: f64) -> f64 {
        let s: f64 = self.waves[c]
            .iter()
            .map(|w| w.amp * (2.0 * PI * (w.fx * u + w.fy * v) + w.phase).sin())
            .sum();
        (self.base[c] + s).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone)]
struct Blob {
    cx: f64,
    cy: f64,
    r0: f64,
    harmonics: Vec<(f64, f64)>,
}

impl Blob {
    fn random(rng: &mut SplitMix64, p: &ShapeParams, size: f64) -> Self {
        let r0 = size * rng.uniform(p.scale.0, p.scale.1);
        let per = p.wobble / p.order as f64;
        let harmonics = (0..p.order)
            .map(|_| (rng.uniform(-per, per) / 2.0, rng.uniform(-per, per) / 2.0))
            .collect();
        let mut b = Self {
            cx: 0.0,
            cy: 0.0,
            r0,
            harmonics,
        };
        let reach = b.max_radius() + MARGIN;
        b.cx = rng.uniform(reach, size - reach);
        b.cy = rng.uniform(reach, size - reach);
        b
    }

    fn max_radius(&self) -> f64 {
        self.r0 * (1.0 + self.harmonics.iter().map(|(a, b)| a.abs() + b.abs()).sum::<f64>())
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let theta = dy.atan2(dx);
        let r = self.r0
            * (1.0
                + self
                    .harmonics
                    .iter()
                    .enumerate()
                    .map(|(k, (a, b))| {
                        let k = (k + 1) as f64;
                        a * (k * theta).cos() + b * (k * theta).sin()
                    })
                    .sum::<f64>());
        dx * dx + dy * dy < r * r
    }

    /// Fraction of a 4 × 4 grid of sub-pixel samples inside the blob.
    fn coverage(&self, px: usize, py: usize) -> f64 {
        let n = SUPERSAMPLE;
        let mut hits = 0;
        for sy in 0..n {
            for sx in 0..n {
                let x = px as f64 + (sx as f64 + 0.5) / n as f64;
                let y = py as f64 + (sy as f64 + 0.5) / n as f64;
                hits += self.inside(x, y) as usize;
            }
        }
        hits as f64 / (n * n) as f64
    }
}

/// Per-channel mean of the masked pixels.
fn mean_color(img: &Image, mask: &[f64], want: bool) -> [f64; 3] {
    let mut out = [0.0; 3];
    let n = mask.iter().filter(|m| (**m > 0.5) == want).count().max(1);
    for (c, o) in out.iter_mut().enumerate() {
        *o = img
            .plane(c)
            .iter()
            .zip(mask)
            .filter(|(_, m)| (**m > 0.5) == want)
            .map(|(v, _)| v)
            .sum::<f64>()
            / n as f64;
    }
    out
}

/// Mean over channels of |object mean − background mean|.
pub fn color_distance(img: &Image, mask: &[f64]) -> f64 {
    let a = mean_color(img, mask, true);
    let b = mean_color(img, mask, false);
    (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>() / 3.0
}

/// Total-variation distance between the joint colour histograms
/// (4 bins per channel) of object and background pixels.
pub fn histogram_distance(img: &Image, mask: &[f64]) -> f64 {
    let bins = HIST_BINS;
    let mut hf = vec![0.0f64; bins * bins * bins];
    let mut hb = hf.clone();
    let (mut nf, mut nb) = (0.0f64, 0.0f64);
    let bin = |v: f64| ((v * bins as f64) as usize).min(bins - 1);
    for (i, m) in mask.iter().enumerate() {
        let k = (bin(img.plane(0)[i]) * bins + bin(img.plane(1)[i])) * bins + bin(img.plane(2)[i]);
        if *m > 0.5 {
            hf[k] += 1.0;
            nf += 1.0;
        } else {
            hb[k] += 1.0;
            nb += 1.0;
        }
    }
    if nf == 0.0 || nb == 0.0 {
        return 0.0;
    }
    0.5 * hf.iter().zip(&hb).map(|(a, b)| (a / nf - b / nb).abs()).sum::<f64>()
}

fn random_color(rng: &mut SplitMix64) -> [f64; 3] {
    [rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85), rng.uniform(0.15, 0.85)]
}

fn try_scene(spec: &SceneSpec, rng: &mut SplitMix64) -> Result<Option<(Image, Vec<f64>)>> {
    let n = spec.size;
    let base = random_color(rng);
    let bg_tex = Texture::random(rng, &spec.texture, base);
    let fg_tex = match spec.mode {
        Mode::Salient => {
            // move each channel towards its farther end of [0.05, 0.95]
            let mut c = [0.0; 3];
            for (k, ck) in c.iter_mut().enumerate() {
                let b = bg_tex.base[k];
                let (room, dir) = if b < 0.5 { (0.95 - b, 1.0) } else { (b - 0.05, -1.0) };
                *ck = b + dir * rng.uniform(MIN_COLOR_DISTANCE + 0.05, room);
            }
            Texture::random(rng, &spec.texture, c)
        }
        Mode::Camouflage => bg_tex.perturbed(rng),
    };
    let blob = Blob::random(rng, &spec.shape, n as f64);
    let mut data = vec![0.0; 3 * n * n];
    let mut mask = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let a = blob.coverage(x, y);
            let (u, v) = ((x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64);
            for c in 0..3 {
                let b = bg_tex.sample(c, u, v);
                let f = if a > 0.0 { fg_tex.sample(c, u, v) } else { 0.0 };
                data[c * n * n + y * n + x] = a * f + (1.0 - a) * b;
            }
            mask[y * n + x] = if a >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    let area = mask.iter().sum::<f64>() / (n * n) as f64;
    if !(MIN_AREA..=MAX_AREA).contains(&area) {
        return Ok(None);
    }
    let img = Image::from_clamped(n, n, 3, data)?;
    let hist = histogram_distance(&img, &mask);
    let ok = match spec.mode {
        Mode::Salient => color_distance(&img, &mask) >= MIN_COLOR_DISTANCE && hist > spec.hist_bound,
        Mode::Camouflage => hist < spec.hist_bound,
    };
    Ok(ok.then_some((img, mask)))
}

/// One scene; resamples up to [`MAX_ATTEMPTS`] times when the object
/// area or the mode self-check is out of bounds.
pub fn gen_scene(spec: &SceneSpec, id: impl Into<String>) -> Result<ImageSample> {
    spec.validate()?;
    let mut rng = SplitMix64::stream(spec.seed, "scene");
    for _ in 0..MAX_ATTEMPTS {
        if let Some((img, mask)) = try_scene(spec, &mut rng)? {
            return ImageSample::from_mask(id, img, mask);
        }
    }
    Err(Error::Dataset(format!(
        "no valid {} scene for seed {} after {MAX_ATTEMPTS} attempts",
        spec.mode, spec.seed
    )))
}

/// Scene seed for sample `index` of `split`.
pub fn sample_seed(seed: u64, split: &str, index: usize) -> u64 {
    SplitMix64::stream(seed, &format!("synth/{split}/{index}")).next_u64()
}

pub fn gen_split(mode: Mode, size: usize, seed: u64, split: &str, count: usize) -> Result<Vec<ImageSample>> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let spec = SceneSpec::new(mode, size, sample_seed(seed, split, i));
            gen_scene(&spec, format!("{split}_{i:04}"))
        })
        .collect()
}

pub fn write_dataset(dir: &Path, samples: &[ImageSample]) -> Result<()> {
    for s in samples {
        write_png(&dir.join("images").join(format!("{}.png", s.id)), &s.image)?;
        let (h, w) = (s.image.height(), s.image.width());
        let mask = Image::new(h, w, 1, s.fg_mask.clone())?;
        write_png(&dir.join("masks").join(format!("{}.png", s.id)), &mask)?;
    }
    Ok(())
}

fn png_ids(dir: &Path) -> Result<Vec<String>> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("missing directory {}", dir.display())));
    }
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Reads every `images/{id}.png` with its `masks/{id}.png`, sorted by id.
/// Grayscale images are replicated to three channels.
pub fn read_dataset(dir: &Path) -> Result<Vec<ImageSample>> {
    let ids = png_ids(&dir.join("images"))?;
    let mask_ids = png_ids(&dir.join("masks"))?;
    if let Some(orphan) = mask_ids.iter().find(|m| ids.binary_search(m).is_err()) {
        return Err(Error::Dataset(format!("mask {orphan} has no image")));
    }
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let mpath = dir.join("masks").join(format!("{id}.png"));
        if !mpath.exists() {
            return Err(Error::Dataset(format!("image {id} has no mask")));
        }
        let mut img = read_png(&dir.join("images").join(format!("{id}.png")))?;
        if img.channels() == 1 {
            let (h, w) = (img.height(), img.width());
            img = Image::new(h, w, 3, img.data().repeat(3))?;
        }
        let m = read_png(&mpath)?;
        if (m.height(), m.width()) != (img.height(), img.width()) {
            return Err(Error::Dataset(format!("mask {id} size differs from its image")));
        }
        out.push(ImageSample::from_mask(id, img, m.plane(0).to_vec())?);
    }
    if out.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", dir.display())));
    }
    Ok(out)
}
