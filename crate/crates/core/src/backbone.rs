//! Patch-16 ViT-style backbone producing per-block token features, and the
//! first attention mask derived from the PCA of its last block.

use focus_tensor::Var;

use crate::error::{invalid, Result};
use crate::imgproc::{binarize, pca_first_component, resize_map, Image};
use crate::nn::{Conv, Init, LayerNorm, Linear, Session};

pub const PATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    patch: Conv,
    pos: crate::nn::ParamId,
    blocks: Vec<Block>,
}

/// Per-block outputs, each [N × C_b] with N = (H/16)(W/16).
#[derive(Debug, Clone)]
pub struct BackboneFeatures {
    pub blocks: Vec<Var>,
    pub grid: (usize, usize),
}

/// Scaled dot-product attention split over `heads` column groups.
/// `q` is [Nq × C], `k` and `v` are [Nk × C].
pub fn multi_head(s: &Session, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let g = s.g;
    let c = g.shape(q)[1];
    if c % heads != 0 {
        return Err(invalid(format!("dim {c} not divisible by {heads} heads")));
    }
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.narrow(q, 1, h * d, d)?;
        let kh = g.narrow(k, 1, h * d, d)?;
        let vh = g.narrow(v, 1, h * d, d)?;
        let logits = g.scale(g.matmul(qh, g.transpose(kh)?)?, scale);
        let a = g.softmax(logits, None)?;
        outs.push(g.matmul(a, vh)?);
    }
    Ok(if heads == 1 { outs[0] } else { g.concat(&outs, 1)? })
}

impl Backbone {
    pub fn new(init: &mut Init, cfg: BackboneConfig) -> Result<Self> {
        if cfg.image_size % PATCH != 0 || cfg.image_size == 0 {
            return Err(invalid(format!("image size {} not divisible by {PATCH}", cfg.image_size)));
        }
        let n = (cfg.image_size / PATCH).pow(2);
        let c = cfg.dim;
        init.scope("backbone", |init| {
            let bound = (6.0 / (3 * PATCH * PATCH) as f64).sqrt();
            let patch = init.scope("patch", |i| Conv {
                w: i.uniform("w", &[c, 3, PATCH, PATCH], bound),
                b: i.zeros("b", &[c]),
                stride: PATCH,
                pad: 0,
                depthwise: false,
            });
            let pos = init.normal("pos", &[n, c], 0.02);
            let blocks = (0..cfg.blocks)
                .map(|b| {
                    init.scope(&format!("blocks.{b}"), |i| Block {
                        ln1: i.layer_norm("ln1", c),
                        qkv: i.linear("qkv", c, 3 * c),
                        proj: i.linear("proj", c, c),
                        ln2: i.layer_norm("ln2", c),
                        fc1: i.linear("fc1", c, c * cfg.mlp_ratio),
                        fc2: i.linear("fc2", c * cfg.mlp_ratio, c),
                    })
                })
                .collect();
            Ok(Self {
                cfg,
                patch,
                pos,
                blocks,
            })
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn grid(&self) -> (usize, usize) {
        let n = self.cfg.image_size / PATCH;
        (n, n)
    }

    /// Patch embedding plus positional embedding: [N × C_b].
    pub fn embed(&self, s: &Session, img: &Image) -> Result<Var> {
        let size = self.cfg.image_size;
        if img.height() != size || img.width() != size || img.channels() != 3 {
            return Err(invalid(format!(
                "backbone expects a 3-channel {size}x{size} image, got {}x{}x{}",
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        let g = s.g;
        let x = g.constant(&[3, size, size], img.data().to_vec())?;
        let x = g.add_scalar(x, -0.5);
        let y = self.patch.forward(s, x)?;
        let t = crate::nn::to_tokens(g, y)?;
        Ok(g.add(t, s.p(self.pos))?)
    }

    /// One pre-norm transformer block.
    pub fn block(&self, s: &Session, i: usize, x: Var) -> Result<Var> {
        let g = s.g;
        let b = &self.blocks[i];
        let c = self.cfg.dim;
        let h = b.ln1.forward(s, x)?;
        let qkv = b.qkv.forward(s, h)?;
        let q = g.narrow(qkv, 1, 0, c)?;
        let k = g.narrow(qkv, 1, c, c)?;
        let v = g.narrow(qkv, 1, 2 * c, c)?;
        let a = multi_head(s, q, k, v, self.cfg.heads)?;
        let x = g.add(x, b.proj.forward(s, a)?)?;
        let h = b.ln2.forward(s, x)?;
        let h = b.fc2.forward(s, g.gelu(b.fc1.forward(s, h)?))?;
        Ok(g.add(x, h)?)
    }

    pub fn forward(&self, s: &Session, img: &Image) -> Result<BackboneFeatures> {
        if self.blocks.len() < 4 {
            return Err(invalid(format!("need at least 4 blocks, have {}", self.blocks.len())));
        }
        let mut x = self.embed(s, img)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for i in 0..self.blocks.len() {
            x = self.block(s, i, x)?;
            blocks.push(x);
        }
        Ok(BackboneFeatures {
            blocks,
            grid: self.grid(),
        })
    }
}

/// Additive {0, −∞} mask with a foreground row and a background row.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub tokens: usize,
    /// Row-major [2 × tokens].
    pub data: Vec<f64>,
}

impl AttentionMask {
    pub fn unmasked(tokens: usize) -> Self {
        Self {
            tokens,
            data: vec![0.0; 2 * tokens],
        }
    }

    /// Mask from per-query binary maps: 0 where the map is 1, −∞ elsewhere.
    pub fn from_binary(fg: &[f64], bg: &[f64]) -> Self {
        let add = |v: &f64| if *v > 0.5 { 0.0 } else { f64::NEG_INFINITY };
        let mut data: Vec<f64> = fg.iter().map(add).collect();
        data.extend(bg.iter().map(add));
        Self {
            tokens: fg.len(),
            data,
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.tokens..(r + 1) * self.tokens]
    }
}

/// Binary map from the first principal component of `last_block`
/// ([N × C], row-major), on the (gh × gw) token grid.
pub fn pca_binary_map(last_block: &[f64], n: usize, c: usize) -> Result<Vec<f64>> {
    let pca = pca_first_component(last_block, n, c)?;
    Ok(binarize(&pca.scores, 0.0))
}

/// First attention mask from the last backbone block, resized to the
/// (th × tw) grid of the first decoder level. Degenerate features give an
/// unmasked result and a warning.
pub fn init_attention_mask(
    last_block: &[f64],
    grid: (usize, usize),
    c: usize,
    target: (usize, usize),
) -> Result<AttentionMask> {
    let (gh, gw) = grid;
    let (th, tw) = target;
    let n = gh * gw;
    if last_block.len() != n * c {
        return Err(crate::error::shape_err("init_attention_mask", n * c, last_block.len()));
    }
    let b = match pca_binary_map(last_block, n, c) {
        Ok(b) => b,
        Err(crate::Error::DegenerateFeatures) => {
            log::warn!("degenerate backbone features; first attention mask left unmasked");
            return Ok(AttentionMask::unmasked(th * tw));
        }
        Err(e) => return Err(e),
    };
    let b = if (gh, gw) == (th, tw) {
        b
    } else {
        binarize(&resize_map(&b, gh, gw, th, tw)?, 0.5)
    };
    let bg: Vec<f64> = b.iter().map(|v| 1.0 - v).collect();
    Ok(AttentionMask::from_binary(&b, &bg))
}
