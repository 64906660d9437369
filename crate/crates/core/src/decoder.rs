//! Pixel decoder over the fused pyramid and the two-query masked-attention
//! decoder with mask, class and box heads.

use focus_tensor::Var;

use crate::backbone::{multi_head, AttentionMask};
use crate::edge::{Levels, Msda, MsdaConfig, Pyramid};
use crate::error::{invalid, shape_err, Result};
use crate::imgproc::resize_map;
use crate::nn::{Init, LayerNorm, Linear, ParamId, Session};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    /// Width of the pyramid levels entering the pixel decoder.
    pub in_dim: usize,
    /// Query / pixel-embedding width C.
    pub dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub points: usize,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    msda: Msda,
    ln1: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    ln2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct PixelDecoder {
    cfg: DecoderConfig,
    input_proj: Vec<Linear>,
    level_embed: ParamId,
    layers: Vec<EncoderLayer>,
    lateral: Linear,
    mask_proj: Linear,
}

#[derive(Debug, Clone)]
pub struct PixelOutput {
    /// [(H/4)(W/4) × C].
    pub pixel_embed: Var,
    pub pixel_grid: (usize, usize),
    /// Refined 1/8, 1/16, 1/32 tokens, each [N_l × C].
    pub levels: Vec<Var>,
    pub shapes: Vec<(usize, usize)>,
}

impl PixelDecoder {
    pub fn new(init: &mut Init, cfg: DecoderConfig) -> Result<Self> {
        let c = cfg.dim;
        init.scope("pixel_decoder", |init| {
            let input_proj = (0..4)
                .map(|i| init.linear(&format!("input_proj.{i}"), cfg.in_dim, c))
                .collect();
            let level_embed = init.normal("level_embed", &[3, c], 0.02);
            let mut layers = Vec::new();
            for l in 0..cfg.encoder_layers {
                layers.push(init.scope(&format!("layers.{l}"), |i| {
                    Ok::<_, crate::Error>(EncoderLayer {
                        msda: Msda::new(
                            i,
                            "msda",
                            MsdaConfig {
                                dim: c,
                                heads: cfg.heads,
                                points: cfg.points,
                                levels: 3,
                            },
                        )?,
                        ln1: i.layer_norm("ln1", c),
                        fc1: i.linear("fc1", c, 2 * c),
                        fc2: i.linear("fc2", 2 * c, c),
                        ln2: i.layer_norm("ln2", c),
                    })
                })?);
            }
            Ok(Self {
                cfg,
                input_proj,
                level_embed,
                layers,
                lateral: init.linear("lateral", c, c),
                mask_proj: init.linear("mask_proj", c, c),
            })
        })
    }

    pub fn forward(&self, s: &Session, pyr: &Pyramid) -> Result<PixelOutput> {
        let g = s.g;
        if pyr.levels.len() != 4 {
            return Err(invalid(format!("pixel decoder needs 4 levels, got {}", pyr.levels.len())));
        }
        let proj: Vec<Var> = pyr
            .levels
            .iter()
            .zip(&self.input_proj)
            .map(|(l, p)| p.forward(s, *l))
            .collect::<Result<_>>()?;
        let shapes: Vec<(usize, usize)> = pyr.shapes[1..].to_vec();
        let levels = Levels::new(shapes.clone());
        let mut x = g.concat(&proj[1..], 0)?;
        if !self.layers.is_empty() {
            let pos_parts = (0..3)
                .map(|i| {
                    let e = g.narrow(s.p(self.level_embed), 0, i, 1)?;
                    let (h, w) = shapes[i];
                    let zeros = g.constant(&[h * w, self.cfg.dim], vec![0.0; h * w * self.cfg.dim])?;
                    g.add(zeros, e)
                })
                .collect::<focus_tensor::Result<Vec<_>>>()?;
            let pos = g.concat(&pos_parts, 0)?;
            let refs = levels.ref_points();
            for layer in &self.layers {
                let q = g.add(x, pos)?;
                let a = layer.msda.forward(s, q, &refs, x, &levels)?;
                x = layer.ln1.forward(s, g.add(x, a)?)?;
                let f = layer.fc2.forward(s, g.relu(layer.fc1.forward(s, x)?))?;
                x = layer.ln2.forward(s, g.add(x, f)?)?;
            }
        }
        let refined = levels.split(s, x)?;
        let (h4, w4) = pyr.shapes[0];
        let (h8, w8) = shapes[0];
        let l8 = crate::nn::from_tokens(g, refined[0], h8, w8)?;
        let up = crate::nn::to_tokens(g, g.resize_bilinear(l8, h4, w4)?)?;
        let lat = self.lateral.forward(s, proj[0])?;
        let pixel_embed = self.mask_proj.forward(s, g.add(lat, up)?)?;
        Ok(PixelOutput {
            pixel_embed,
            pixel_grid: (h4, w4),
            levels: refined,
            shapes,
        })
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    cross_ln: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    self_ln: LayerNorm,
    sq: Linear,
    sk: Linear,
    sv: Linear,
    so: Linear,
    ffn_ln: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct Heads {
    pub norm: LayerNorm,
    pub mask1: Linear,
    pub mask2: Linear,
    pub class: Linear,
    pub bbox1: Linear,
    pub bbox2: Linear,
}

#[derive(Debug, Clone)]
pub struct GroundDecoder {
    pub cfg: DecoderConfig,
    pub x0: ParamId,
    pub query_embed: ParamId,
    layers: Vec<DecoderLayer>,
    pub heads: Heads,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerPrediction {
    /// [2 × (H/4)(W/4)].
    pub mask_logits: Var,
    /// [2 × 2], class 0 = foreground, 1 = background.
    pub class_logits: Var,
    /// [2 × 4] normalized (cx, cy, w, h).
    pub bbox: Var,
}

#[derive(Debug, Clone)]
pub struct PredictionSet {
    /// Layer-0 prediction first, then one per decoder layer.
    pub layers: Vec<LayerPrediction>,
    pub mask_grid: (usize, usize),
    /// Attention mask fed to each decoder layer.
    pub masks: Vec<AttentionMask>,
}

impl PredictionSet {
    pub fn last(&self) -> &LayerPrediction {
        self.layers.last().expect("at least the layer-0 prediction")
    }
}

/// Refined-level index used by decoder layer `l`: 1/32, 1/16, 1/8, repeat.
pub fn level_for_layer(l: usize) -> usize {
    2 - (l % 3)
}

/// Binarised attention mask from [2 × h·w] mask logits resized to `target`.
pub fn mask_to_attention(
    logits: &[f64],
    grid: (usize, usize),
    target: (usize, usize),
) -> Result<AttentionMask> {
    let (h, w) = grid;
    if logits.len() != 2 * h * w {
        return Err(shape_err("mask_to_attention", 2 * h * w, logits.len()));
    }
    let mut rows = Vec::with_capacity(2);
    for r in 0..2 {
        let p: Vec<f64> = logits[r * h * w..(r + 1) * h * w]
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let p = if (h, w) == target {
            p
        } else {
            resize_map(&p, h, w, target.0, target.1)?
        };
        rows.push(p.into_iter().map(|v| if v > 0.5 { 1.0 } else { 0.0 }).collect::<Vec<_>>());
    }
    Ok(AttentionMask::from_binary(&rows[0], &rows[1]))
}

impl GroundDecoder {
    pub fn new(init: &mut Init, cfg: DecoderConfig) -> Result<Self> {
        let c = cfg.dim;
        let x0 = init.scope("ground_decoder", |i| i.normal("x0", &[2, c], 1.0));
        let query_embed = init.scope("ground_decoder", |i| i.normal("query_embed", &[2, c], 1.0));
        let layers = init.scope("ground_decoder", |init| {
            (0..cfg.decoder_layers)
                .map(|l| {
                    init.scope(&format!("layers.{l}"), |i| DecoderLayer {
                        cross_ln: i.layer_norm("cross_ln", c),
                        wq: i.linear("wq", c, c),
                        wk: i.linear("wk", c, c),
                        wv: i.linear("wv", c, c),
                        self_ln: i.layer_norm("self_ln", c),
                        sq: i.linear("sq", c, c),
                        sk: i.linear("sk", c, c),
                        sv: i.linear("sv", c, c),
                        so: i.linear("so", c, c),
                        ffn_ln: i.layer_norm("ffn_ln", c),
                        fc1: i.linear("fc1", c, 2 * c),
                        fc2: i.linear("fc2", 2 * c, c),
                    })
                })
                .collect()
        });
        let heads = init.scope("heads", |i| Heads {
            norm: i.layer_norm("norm", c),
            mask1: i.linear("mask1", c, c),
            mask2: i.linear("mask2", c, c),
            class: i.linear("class", c, 2),
            bbox1: i.linear("bbox1", c, c),
            bbox2: i.linear("bbox2", c, 4),
        });
        Ok(Self {
            cfg,
            x0,
            query_embed,
            layers,
            heads,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Masked cross-attention with residual:
    /// X + softmax(𝓜 + (LN(X) + E_q)W_q (K W_k)ᵀ / √C) (V W_v).
    pub fn cross_attention(
        &self,
        s: &Session,
        l: usize,
        x: Var,
        kv: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let g = s.g;
        let layer = &self.layers[l];
        let n = g.shape(kv)[0];
        if mask.tokens != n {
            return Err(shape_err("cross attention mask", n, mask.tokens));
        }
        let gq = g.add(layer.cross_ln.forward(s, x)?, s.p(self.query_embed))?;
        let q = layer.wq.forward(s, gq)?;
        let k = layer.wk.forward(s, kv)?;
        let v = layer.wv.forward(s, kv)?;
        let scale = 1.0 / (self.cfg.dim as f64).sqrt();
        let logits = g.scale(g.matmul(q, g.transpose(k)?)?, scale);
        let a = g.softmax(logits, Some(&mask.data))?;
        Ok(g.add(x, g.matmul(a, v)?)?)
    }

    pub fn layer_forward(
        &self,
        s: &Session,
        l: usize,
        x: Var,
        kv: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let g = s.g;
        let layer = &self.layers[l];
        let x = self.cross_attention(s, l, x, kv, mask)?;
        let h = layer.self_ln.forward(s, x)?;
        let qk = g.add(h, s.p(self.query_embed))?;
        let a = multi_head(
            s,
            layer.sq.forward(s, qk)?,
            layer.sk.forward(s, qk)?,
            layer.sv.forward(s, h)?,
            self.cfg.heads,
        )?;
        let x = g.add(x, layer.so.forward(s, a)?)?;
        let h = layer.ffn_ln.forward(s, x)?;
        let f = layer.fc2.forward(s, g.relu(layer.fc1.forward(s, h)?))?;
        Ok(g.add(x, f)?)
    }

    pub fn predict(&self, s: &Session, x: Var, pixel_embed: Var) -> Result<LayerPrediction> {
        let g = s.g;
        let hd = &self.heads;
        let h = hd.norm.forward(s, x)?;
        let me = hd.mask2.forward(s, g.relu(hd.mask1.forward(s, h)?))?;
        let mask_logits = mask_logits(s, me, pixel_embed)?;
        let class_logits = hd.class.forward(s, h)?;
        let bbox = g.sigmoid(hd.bbox2.forward(s, g.relu(hd.bbox1.forward(s, h)?))?);
        Ok(LayerPrediction {
            mask_logits,
            class_logits,
            bbox,
        })
    }

    pub fn forward(&self, s: &Session, px: &PixelOutput, m0: &AttentionMask) -> Result<PredictionSet> {
        let g = s.g;
        let mut x = s.p(self.x0);
        let mut layers = vec![self.predict(s, x, px.pixel_embed)?];
        let mut masks = Vec::with_capacity(self.layers.len());
        let mut mask = m0.clone();
        for l in 0..self.layers.len() {
            let li = level_for_layer(l);
            let target = px.shapes[li];
            if mask.tokens != target.0 * target.1 {
                return Err(shape_err("initial attention mask", target.0 * target.1, mask.tokens));
            }
            masks.push(mask.clone());
            x = self.layer_forward(s, l, x, px.levels[li], &mask)?;
            let pred = self.predict(s, x, px.pixel_embed)?;
            if l + 1 < self.layers.len() {
                let next = px.shapes[level_for_layer(l + 1)];
                mask = mask_to_attention(&g.data(pred.mask_logits), px.pixel_grid, next)?;
            }
            layers.push(pred);
        }
        Ok(PredictionSet {
            layers,
            mask_grid: px.pixel_grid,
            masks,
        })
    }
}

/// Query mask embeddings [2 × C] against pixel embeddings [P × C].
pub fn mask_logits(s: &Session, mask_embed: Var, pixel_embed: Var) -> Result<Var> {
    let g = s.g;
    Ok(g.matmul(mask_embed, g.transpose(pixel_embed)?)?)
}
