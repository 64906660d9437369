//! Edge pathway: a convolutional STEM and residual pyramid over the
//! edge-overlaid image, deformable-attention injector/extractor fusion with
//! the backbone, and assembly of the four-level feature pyramid.

use focus_tensor::Var;

use crate::backbone::{Backbone, BackboneFeatures};
use crate::error::{invalid, shape_err, Result};
use crate::imgproc::Image;
use crate::nn::{from_tokens, to_tokens, Conv, GroupNorm, Init, LayerNorm, Linear, ParamId, Session};

/// Spatial layouts of concatenated token levels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Levels {
    pub shapes: Vec<(usize, usize)>,
}

impl Levels {
    pub fn new(shapes: Vec<(usize, usize)>) -> Self {
        Self { shapes }
    }

    pub fn lens(&self) -> Vec<usize> {
        self.shapes.iter().map(|(h, w)| h * w).collect()
    }

    pub fn total(&self) -> usize {
        self.lens().iter().sum()
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    /// Normalized centre of every token, level by level, as (x, y).
    pub fn ref_points(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.total());
        for &(h, w) in &self.shapes {
            for y in 0..h {
                for x in 0..w {
                    out.push(((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64));
                }
            }
        }
        out
    }

    pub fn split(&self, s: &Session, tokens: Var) -> Result<Vec<Var>> {
        let n = s.g.shape(tokens)[0];
        if n != self.total() {
            return Err(shape_err("levels.split", self.total(), n));
        }
        Ok(s.g.split(tokens, 0, &self.lens())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsdaConfig {
    pub dim: usize,
    pub heads: usize,
    pub points: usize,
    pub levels: usize,
}

/// Multi-scale deformable attention. Offsets and weights are predicted
/// from each query; offsets are in pixels of the sampled level.
#[derive(Debug, Clone)]
pub struct Msda {
    pub cfg: MsdaConfig,
    pub value: Linear,
    pub offsets: Linear,
    pub weights: Linear,
    pub out: Linear,
}

impl Msda {
    pub fn new(init: &mut Init, name: &str, cfg: MsdaConfig) -> Result<Self> {
        if cfg.dim % cfg.heads != 0 {
            return Err(invalid(format!("dim {} not divisible by {} heads", cfg.dim, cfg.heads)));
        }
        let hlk = cfg.heads * cfg.levels * cfg.points;
        Ok(init.scope(name, |i| Self {
            cfg,
            value: i.linear("value", cfg.dim, cfg.dim),
            offsets: i.linear_zero("offsets", cfg.dim, 2 * hlk),
            weights: i.linear_zero("weights", cfg.dim, hlk),
            out: i.linear("out", cfg.dim, cfg.dim),
        }))
    }

    /// Softmax-normalised sampling weights, [Nq × heads·levels·points]
    /// with each head's levels·points block summing to one.
    pub fn attention_weights(&self, s: &Session, query: Var) -> Result<Var> {
        let g = s.g;
        let lk = self.cfg.levels * self.cfg.points;
        let raw = self.weights.forward(s, query)?;
        let heads = (0..self.cfg.heads)
            .map(|h| g.softmax(g.narrow(raw, 1, h * lk, lk)?, None))
            .collect::<focus_tensor::Result<Vec<_>>>()?;
        Ok(if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? })
    }

    pub fn forward(
        &self,
        s: &Session,
        query: Var,
        refs: &[(f64, f64)],
        values: Var,
        levels: &Levels,
    ) -> Result<Var> {
        let g = s.g;
        let MsdaConfig {
            dim,
            heads,
            points,
            levels: nl,
        } = self.cfg;
        let nq = g.shape(query)[0];
        if refs.len() != nq {
            return Err(shape_err("msda refs", nq, refs.len()));
        }
        if let Some(r) = refs
            .iter()
            .find(|(x, y)| !(0.0..=1.0).contains(x) || !(0.0..=1.0).contains(y))
        {
            return Err(invalid(format!("reference point {r:?} outside [0, 1]^2")));
        }
        if levels.len() != nl {
            return Err(shape_err("msda levels", nl, levels.len()));
        }
        let d = dim / heads;
        let v = self.value.forward(s, values)?;
        let vlev = levels.split(s, v)?;
        let off = self.offsets.forward(s, query)?;
        let attn = self.attention_weights(s, query)?;

        let mut head_out = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut acc: Option<Var> = None;
            for (l, &(lh, lw)) in levels.shapes.iter().enumerate() {
                let vh = g.narrow(vlev[l], 1, h * d, d)?;
                let base: Vec<f64> = refs
                    .iter()
                    .flat_map(|&(x, y)| {
                        let p = [x * lw as f64 - 0.5, y * lh as f64 - 0.5];
                        std::iter::repeat(p).take(points).flatten()
                    })
                    .collect();
                let base = g.constant(&[nq * points, 2], base)?;
                let col = ((h * nl + l) * points) * 2;
                let o = g.reshape(g.narrow(off, 1, col, 2 * points)?, &[nq * points, 2])?;
                let coords = g.add(base, o)?;
                let sampled = g.grid_sample(vh, lh, lw, coords)?;
                let wcol = (h * nl + l) * points;
                let w = g.reshape(g.narrow(attn, 1, wcol, points)?, &[nq * points, 1])?;
                let weighted = g.reshape(g.mul(sampled, w)?, &[nq, points, d])?;
                let summed = g.sum_axis(weighted, 1)?;
                acc = Some(match acc {
                    None => summed,
                    Some(a) => g.add(a, summed)?,
                });
            }
            head_out.push(acc.expect("at least one level"));
        }
        let cat = if heads == 1 { head_out[0] } else { g.concat(&head_out, 1)? };
        self.out.forward(s, cat)
    }
}

/// F̂ = F + γ · MSDA(LN(F), LN(F_edge)).
#[derive(Debug, Clone)]
pub struct Injector {
    pub ln_query: LayerNorm,
    pub ln_value: LayerNorm,
    pub msda: Msda,
    pub gamma: ParamId,
}

impl Injector {
    pub fn forward(
        &self,
        s: &Session,
        f_dino: Var,
        dino_refs: &[(f64, f64)],
        f_edge: Var,
        edge_levels: &Levels,
    ) -> Result<Var> {
        let g = s.g;
        let q = self.ln_query.forward(s, f_dino)?;
        let v = self.ln_value.forward(s, f_edge)?;
        let a = self.msda.forward(s, q, dino_refs, v, edge_levels)?;
        Ok(g.add(f_dino, g.mul(s.p(self.gamma), a)?)?)
    }
}

/// FC → depthwise 3×3 on each restored level → GELU → FC.
#[derive(Debug, Clone)]
pub struct ConvFfn {
    pub fc1: Linear,
    pub dw: Conv,
    pub fc2: Linear,
}

impl ConvFfn {
    pub fn forward(&self, s: &Session, x: Var, levels: &Levels) -> Result<Var> {
        let g = s.g;
        let h = self.fc1.forward(s, x)?;
        let parts = levels.split(s, h)?;
        let mut conv = Vec::with_capacity(parts.len());
        for (p, &(lh, lw)) in parts.into_iter().zip(&levels.shapes) {
            let m = from_tokens(g, p, lh, lw)?;
            conv.push(to_tokens(g, self.dw.forward(s, m)?)?);
        }
        let h = if conv.len() == 1 { conv[0] } else { g.concat(&conv, 0)? };
        self.fc2.forward(s, g.gelu(h))
    }
}

/// F̂_edge = F_edge + ConvFFN(MSDA(LN(F_edge), LN(F_next))).
#[derive(Debug, Clone)]
pub struct Extractor {
    pub ln_query: LayerNorm,
    pub ln_value: LayerNorm,
    pub msda: Msda,
    pub ffn: ConvFfn,
}

impl Extractor {
    pub fn forward(
        &self,
        s: &Session,
        f_edge: Var,
        edge_levels: &Levels,
        f_next: Var,
        dino_levels: &Levels,
    ) -> Result<Var> {
        let q = self.ln_query.forward(s, f_edge)?;
        let v = self.ln_value.forward(s, f_next)?;
        let a = self.msda.forward(s, q, &edge_levels.ref_points(), v, dino_levels)?;
        Ok(s.g.add(f_edge, self.ffn.forward(s, a, edge_levels)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeConfig {
    pub image_size: usize,
    pub dim: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; 3],
    pub blocks_per_stage: usize,
    pub groups: usize,
    pub heads: usize,
    pub points: usize,
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv,
    gn1: GroupNorm,
    conv2: Conv,
    gn2: GroupNorm,
}

impl ResBlock {
    fn forward(&self, s: &Session, x: Var) -> Result<Var> {
        let g = s.g;
        let h = g.relu(self.gn1.forward(s, self.conv1.forward(s, x)?)?);
        let h = self.gn2.forward(s, self.conv2.forward(s, h)?)?;
        Ok(g.relu(g.add(x, h)?))
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: Conv,
    norm: GroupNorm,
    blocks: Vec<ResBlock>,
    proj: Conv,
}

/// STEM plus three residual stages at 1/8, 1/16 and 1/32.
#[derive(Debug, Clone)]
pub struct EdgeNet {
    pub cfg: EdgeConfig,
    stem_conv: Conv,
    stem_norm: GroupNorm,
    stem_proj: Conv,
    stages: Vec<Stage>,
}

#[derive(Debug, Clone)]
pub struct EdgeFeatures {
    /// [D × H/4 × W/4].
    pub stem: Var,
    /// Concatenated [ΣN × D] tokens, 1/8 level first.
    pub pyramid: Var,
    pub levels: Levels,
}

impl EdgeNet {
    pub fn new(init: &mut Init, cfg: EdgeConfig) -> Result<Self> {
        if cfg.image_size % 32 != 0 || cfg.image_size == 0 {
            return Err(invalid(format!("image size {} not divisible by 32", cfg.image_size)));
        }
        let gn = |c: usize| cfg.groups.min(c);
        init.scope("edge_net", |init| {
            let stem_conv = init.conv("stem.conv", 3, cfg.stem_channels, 7, 2);
            let stem_norm = init.group_norm("stem.norm", cfg.stem_channels, gn(cfg.stem_channels));
            let stem_proj = init.conv("stem.proj", cfg.stem_channels, cfg.dim, 1, 1);
            let mut prev = cfg.stem_channels;
            let mut stages = Vec::new();
            for (si, &ch) in cfg.stage_channels.iter().enumerate() {
                let stage = init.scope(&format!("stages.{si}"), |i| {
                    let down = i.conv("down", prev, ch, 3, 2);
                    let norm = i.group_norm("norm", ch, gn(ch));
                    let blocks = (0..cfg.blocks_per_stage)
                        .map(|b| {
                            i.scope(&format!("blocks.{b}"), |i| ResBlock {
                                conv1: i.conv("conv1", ch, ch, 3, 1),
                                gn1: i.group_norm("gn1", ch, gn(ch)),
                                conv2: i.conv("conv2", ch, ch, 3, 1),
                                gn2: i.group_norm("gn2", ch, gn(ch)),
                            })
                        })
                        .collect();
                    let proj = i.conv("proj", ch, cfg.dim, 1, 1);
                    Stage {
                        down,
                        norm,
                        blocks,
                        proj,
                    }
                });
                stages.push(stage);
                prev = ch;
            }
            Ok(Self {
                cfg,
                stem_conv,
                stem_norm,
                stem_proj,
                stages,
            })
        })
    }

    fn stem_raw(&self, s: &Session, img: &Image) -> Result<Var> {
        let g = s.g;
        let (h, w) = (img.height(), img.width());
        if h % 4 != 0 || w % 4 != 0 {
            return Err(invalid(format!("stem input {h}x{w} not divisible by 4")));
        }
        if img.channels() != 3 {
            return Err(invalid("stem expects a 3-channel image"));
        }
        let x = g.constant(&[3, h, w], img.data().to_vec())?;
        let y = g.relu(self.stem_norm.forward(s, self.stem_conv.forward(s, x)?)?);
        Ok(g.max_pool2d(y, 3, 2, 1)?)
    }

    /// STEM feature at 1/4 resolution, projected to D.
    pub fn stem_forward(&self, s: &Session, img: &Image) -> Result<Var> {
        let raw = self.stem_raw(s, img)?;
        self.stem_proj.forward(s, raw)
    }

    pub fn forward(&self, s: &Session, img: &Image) -> Result<EdgeFeatures> {
        let g = s.g;
        let (h, w) = (img.height(), img.width());
        if h % 32 != 0 || w % 32 != 0 {
            return Err(invalid(format!("edge pyramid input {h}x{w} not divisible by 32")));
        }
        let raw = self.stem_raw(s, img)?;
        let stem = self.stem_proj.forward(s, raw)?;
        let mut x = raw;
        let mut tokens = Vec::new();
        let mut shapes = Vec::new();
        for st in &self.stages {
            x = g.relu(st.norm.forward(s, st.down.forward(s, x)?)?);
            for b in &st.blocks {
                x = b.forward(s, x)?;
            }
            let sh = g.shape(x);
            shapes.push((sh[1], sh[2]));
            tokens.push(to_tokens(g, st.proj.forward(s, x)?)?);
        }
        Ok(EdgeFeatures {
            stem,
            pyramid: g.concat(&tokens, 0)?,
            levels: Levels::new(shapes),
        })
    }
}

/// Injector/extractor pairs, tap projections and pyramid assembly.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub injectors: Vec<Injector>,
    pub extractors: Vec<Extractor>,
    pub tap_proj: Vec<Linear>,
    /// Backbone block ranges covered by each interaction.
    pub groups: Vec<std::ops::Range<usize>>,
    pub dim: usize,
}

/// The four fused levels at 1/4, 1/8, 1/16 and 1/32, as [N × D] tokens.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: Vec<Var>,
    pub shapes: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct FusedFeatures {
    /// Backbone features after each interaction's last block.
    pub taps: Vec<Var>,
    pub edge: Var,
    pub pyramid: Pyramid,
}

/// Splits `blocks` into four contiguous groups of near-equal size.
pub fn tap_groups(blocks: usize) -> Vec<std::ops::Range<usize>> {
    (0..4).map(|i| (i * blocks / 4)..((i + 1) * blocks / 4)).collect()
}

impl Fusion {
    pub fn new(init: &mut Init, backbone_dim: usize, blocks: usize, cfg: EdgeConfig) -> Result<Self> {
        if blocks < 4 {
            return Err(invalid(format!("need at least 4 backbone blocks, have {blocks}")));
        }
        if backbone_dim != cfg.dim {
            return Err(invalid(format!(
                "fusion needs backbone dim {backbone_dim} to equal edge dim {}",
                cfg.dim
            )));
        }
        let d = cfg.dim;
        let hidden = (d / 2).max(1);
        let msda = |levels| MsdaConfig {
            dim: d,
            heads: cfg.heads,
            points: cfg.points,
            levels,
        };
        init.scope("fusion", |init| {
            let mut injectors = Vec::new();
            let mut extractors = Vec::new();
            for i in 0..4 {
                injectors.push(init.scope(&format!("injector.{i}"), |init| {
                    Ok::<_, crate::Error>(Injector {
                        ln_query: init.layer_norm("ln_query", d),
                        ln_value: init.layer_norm("ln_value", d),
                        msda: Msda::new(init, "msda", msda(3))?,
                        gamma: init.zeros("gamma", &[]),
                    })
                })?);
                extractors.push(init.scope(&format!("extractor.{i}"), |init| {
                    Ok::<_, crate::Error>(Extractor {
                        ln_query: init.layer_norm("ln_query", d),
                        ln_value: init.layer_norm("ln_value", d),
                        msda: Msda::new(init, "msda", msda(1))?,
                        ffn: init.scope("ffn", |i| ConvFfn {
                            fc1: i.linear("fc1", d, hidden),
                            dw: i.depthwise("dw", hidden, 3),
                            fc2: i.linear("fc2", hidden, d),
                        }),
                    })
                })?);
            }
            let tap_proj = (0..4)
                .map(|i| init.linear(&format!("tap_proj.{i}"), backbone_dim, d))
                .collect();
            Ok(Self {
                injectors,
                extractors,
                tap_proj,
                groups: tap_groups(blocks),
                dim: d,
            })
        })
    }

    pub fn forward(
        &self,
        s: &Session,
        backbone: &Backbone,
        img: &Image,
        edge: &EdgeFeatures,
    ) -> Result<FusedFeatures> {
        let (gh, gw) = backbone.grid();
        let dino_levels = Levels::new(vec![(gh, gw)]);
        let dino_refs = dino_levels.ref_points();
        let mut x = backbone.embed(s, img)?;
        let mut c = edge.pyramid;
        let mut taps = Vec::with_capacity(4);
        for i in 0..4 {
            x = self.injectors[i].forward(s, x, &dino_refs, c, &edge.levels)?;
            for b in self.groups[i].clone() {
                x = backbone.block(s, b, x)?;
            }
            c = self.extractors[i].forward(s, c, &edge.levels, x, &dino_levels)?;
            taps.push(x);
        }
        let feats = BackboneFeatures {
            blocks: taps.clone(),
            grid: (gh, gw),
        };
        let pyramid = self.assemble(s, &feats, c, &edge.levels, edge.stem)?;
        Ok(FusedFeatures {
            taps,
            edge: c,
            pyramid,
        })
    }

    /// Level 1/4 = resized tap 0 + STEM; levels 1/8..1/32 = resized taps
    /// 1..3 + the matching split of the last extractor output.
    pub fn assemble(
        &self,
        s: &Session,
        feats: &BackboneFeatures,
        last_extractor: Var,
        edge_levels: &Levels,
        stem: Var,
    ) -> Result<Pyramid> {
        let g = s.g;
        if feats.blocks.len() != 4 {
            return Err(shape_err("assemble taps", 4, feats.blocks.len()));
        }
        let (gh, gw) = feats.grid;
        let stem_shape = g.shape(stem);
        let mut shapes = vec![(stem_shape[1], stem_shape[2])];
        shapes.extend(edge_levels.shapes.iter().copied());
        if shapes.len() != 4 {
            return Err(shape_err("assemble levels", 4, shapes.len()));
        }
        let edge_parts = edge_levels.split(s, last_extractor)?;
        let mut levels = Vec::with_capacity(4);
        for (i, &(lh, lw)) in shapes.iter().enumerate() {
            let t = self.tap_proj[i].forward(s, feats.blocks[i])?;
            let m = from_tokens(g, t, gh, gw)?;
            let r = to_tokens(g, g.resize_bilinear(m, lh, lw)?)?;
            let extra = if i == 0 { to_tokens(g, stem)? } else { edge_parts[i - 1] };
            levels.push(g.add(r, extra)?);
        }
        Ok(Pyramid { levels, shapes })
    }
}
