//! Run configuration: flat `key = value` text with dotted keys.
//!
//! Files are read as TOML and flattened, so `[optim]\nlr = 1e-4` and
//! `optim.lr = 1e-4` are the same setting. Unknown keys are rejected.

use std::path::PathBuf;

use crate::backbone::BackboneConfig;
use crate::criterion::LossWeights;
use crate::decoder::DecoderConfig;
use crate::edge::EdgeConfig;
use crate::error::{Error, Result};
use crate::metrics::EMeasure;
use crate::refiner::{PromptPair, RefinerConfig};
use crate::synth::Mode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeSource {
    /// Binary edges from the full detection chain.
    Canny,
    /// Normalized Sobel magnitude of the blurred grayscale image.
    Magnitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverlayMode {
    /// clamp(img + edges).
    Add,
    /// edges · 1 + (1 − edges) · img.
    Blend,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,

    pub backbone_dim: usize,
    pub backbone_blocks: usize,
    pub backbone_heads: usize,
    pub mlp_ratio: usize,
    pub edge_width: usize,
    pub edge_blocks: usize,
    pub groups: usize,
    pub decoder_dim: usize,
    pub decoder_layers: usize,
    pub encoder_layers: usize,
    pub msda_heads: usize,
    pub msda_points: usize,

    pub refiner: bool,
    pub embed_dim: usize,
    pub refiner_resolution: usize,
    pub refiner_align: usize,
    pub tau: f64,
    pub prompts: PromptPair,

    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,

    pub iterations: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub deep_supervision: bool,

    pub weights: LossWeights,

    pub edge_source: EdgeSource,
    pub overlay: OverlayMode,
    pub edge_sigma: f64,
    pub edge_low: f64,
    pub edge_high: f64,

    pub synth_mode: Mode,
    pub synth_train: usize,
    pub synth_test: usize,

    pub data_dir: PathBuf,
    pub out_dir: PathBuf,

    pub e_measure: EMeasure,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    v.as_integer()
        .filter(|i| *i >= 0)
        .map(|i| i as usize)
        .ok_or_else(|| cfg_err(format!("{key}: expected a non-negative integer, got {v}")))
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(cfg_err(format!("{key}: expected a number, got {v}"))),
    }
}

fn as_bool(key: &str, v: &toml::Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| cfg_err(format!("{key}: expected true or false, got {v}")))
}

fn as_str<'a>(key: &str, v: &'a toml::Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| cfg_err(format!("{key}: expected a string, got {v}")))
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

/// All keys in canonical order.
pub const KEYS: &[&str] = &[
    "seed",
    "image_size",
    "model.backbone_dim",
    "model.backbone_blocks",
    "model.backbone_heads",
    "model.mlp_ratio",
    "model.edge_width",
    "model.edge_blocks",
    "model.groups",
    "model.decoder_dim",
    "model.decoder_layers",
    "model.encoder_layers",
    "model.msda_heads",
    "model.msda_points",
    "refiner.enabled",
    "refiner.embed_dim",
    "refiner.resolution",
    "refiner.align_scenes",
    "loss.tau",
    "prompt.foreground",
    "prompt.background",
    "optim.lr",
    "optim.weight_decay",
    "optim.clip_norm",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "train.iterations",
    "train.batch_size",
    "train.checkpoint_every",
    "train.deep_supervision",
    "loss.clip",
    "loss.label",
    "loss.mask",
    "loss.bbox",
    "loss.l1",
    "loss.giou",
    "edge.source",
    "edge.overlay",
    "edge.sigma",
    "edge.low",
    "edge.high",
    "synth.mode",
    "synth.train",
    "synth.test",
    "data.dir",
    "out.dir",
    "eval.e_measure",
];

impl RunConfig {
    /// Desk-scale defaults: 96 px images, 64-wide model, 3000 steps.
    pub fn desk() -> Self {
        Self {
            seed: 7,
            image_size: 96,
            backbone_dim: 64,
            backbone_blocks: 4,
            backbone_heads: 4,
            mlp_ratio: 2,
            edge_width: 16,
            edge_blocks: 1,
            groups: 8,
            decoder_dim: 64,
            decoder_layers: 3,
            encoder_layers: 2,
            msda_heads: 4,
            msda_points: 4,
            refiner: true,
            embed_dim: 32,
            refiner_resolution: 64,
            refiner_align: 64,
            tau: 0.07,
            prompts: PromptPair::default(),
            lr: 2e-4,
            weight_decay: 0.05,
            clip_norm: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            iterations: 3000,
            batch_size: 4,
            checkpoint_every: 500,
            deep_supervision: true,
            weights: LossWeights::default(),
            edge_source: EdgeSource::Canny,
            overlay: OverlayMode::Add,
            edge_sigma: 1.0,
            edge_low: 0.015,
            edge_high: 0.03,
            synth_mode: Mode::Salient,
            synth_train: 300,
            synth_test: 50,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            e_measure: EMeasure::Adaptive,
        }
    }

    /// Published training schedule: 512 px, lr 1e-5, 20 000 steps, batch 8.
    pub fn paper() -> Self {
        Self {
            image_size: 512,
            lr: 1e-5,
            iterations: 20_000,
            batch_size: 8,
            checkpoint_every: 2000,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(cfg_err(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }

    pub fn set(&mut self, key: &str, v: &toml::Value) -> Result<()> {
        match key {
            "seed" => {
                self.seed = v
                    .as_integer()
                    .filter(|i| *i >= 0)
                    .ok_or_else(|| cfg_err(format!("seed: expected a non-negative integer, got {v}")))?
                    as u64
            }
            "image_size" => self.image_size = as_usize(key, v)?,
            "model.backbone_dim" => self.backbone_dim = as_usize(key, v)?,
            "model.backbone_blocks" => self.backbone_blocks = as_usize(key, v)?,
            "model.backbone_heads" => self.backbone_heads = as_usize(key, v)?,
            "model.mlp_ratio" => self.mlp_ratio = as_usize(key, v)?,
            "model.edge_width" => self.edge_width = as_usize(key, v)?,
            "model.edge_blocks" => self.edge_blocks = as_usize(key, v)?,
            "model.groups" => self.groups = as_usize(key, v)?,
            "model.decoder_dim" => self.decoder_dim = as_usize(key, v)?,
            "model.decoder_layers" => self.decoder_layers = as_usize(key, v)?,
            "model.encoder_layers" => self.encoder_layers = as_usize(key, v)?,
            "model.msda_heads" => self.msda_heads = as_usize(key, v)?,
            "model.msda_points" => self.msda_points = as_usize(key, v)?,
            "refiner.enabled" => self.refiner = as_bool(key, v)?,
            "refiner.embed_dim" => self.embed_dim = as_usize(key, v)?,
            "refiner.resolution" => self.refiner_resolution = as_usize(key, v)?,
            "refiner.align_scenes" => self.refiner_align = as_usize(key, v)?,
            "loss.tau" => self.tau = as_f64(key, v)?,
            "prompt.foreground" => self.prompts.foreground = as_str(key, v)?.to_string(),
            "prompt.background" => self.prompts.background = as_str(key, v)?.to_string(),
            "optim.lr" => self.lr = as_f64(key, v)?,
            "optim.weight_decay" => self.weight_decay = as_f64(key, v)?,
            "optim.clip_norm" => self.clip_norm = as_f64(key, v)?,
            "optim.beta1" => self.beta1 = as_f64(key, v)?,
            "optim.beta2" => self.beta2 = as_f64(key, v)?,
            "optim.eps" => self.adam_eps = as_f64(key, v)?,
            "train.iterations" => self.iterations = as_usize(key, v)?,
            "train.batch_size" => self.batch_size = as_usize(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = as_usize(key, v)?,
            "train.deep_supervision" => self.deep_supervision = as_bool(key, v)?,
            "loss.clip" => self.weights.clip = as_f64(key, v)?,
            "loss.label" => self.weights.label = as_f64(key, v)?,
            "loss.mask" => self.weights.mask = as_f64(key, v)?,
            "loss.bbox" => self.weights.bbox = as_f64(key, v)?,
            "loss.l1" => self.weights.l1 = as_f64(key, v)?,
            "loss.giou" => self.weights.giou = as_f64(key, v)?,
            "edge.source" => {
                self.edge_source = match as_str(key, v)? {
                    "canny" => EdgeSource::Canny,
                    "magnitude" => EdgeSource::Magnitude,
                    s => return Err(cfg_err(format!("edge.source: unknown value {s:?}"))),
                }
            }
            "edge.overlay" => {
                self.overlay = match as_str(key, v)? {
                    "add" => OverlayMode::Add,
                    "blend" => OverlayMode::Blend,
                    s => return Err(cfg_err(format!("edge.overlay: unknown value {s:?}"))),
                }
            }
            "edge.sigma" => self.edge_sigma = as_f64(key, v)?,
            "edge.low" => self.edge_low = as_f64(key, v)?,
            "edge.high" => self.edge_high = as_f64(key, v)?,
            "synth.mode" => {
                self.synth_mode = as_str(key, v)?
                    .parse()
                    .map_err(|e: Error| cfg_err(format!("synth.mode: {e}")))?
            }
            "synth.train" => self.synth_train = as_usize(key, v)?,
            "synth.test" => self.synth_test = as_usize(key, v)?,
            "data.dir" => self.data_dir = PathBuf::from(as_str(key, v)?),
            "out.dir" => self.out_dir = PathBuf::from(as_str(key, v)?),
            "eval.e_measure" => {
                self.e_measure = as_str(key, v)?
                    .parse()
                    .map_err(|e: Error| cfg_err(format!("eval.e_measure: {e}")))?
            }
            other => return Err(cfg_err(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Value of `key` as a TOML literal.
    pub fn get(&self, key: &str) -> Result<toml::Value> {
        use toml::Value as V;
        let i = |x: usize| V::Integer(x as i64);
        let s = |x: &str| V::String(x.to_string());
        Ok(match key {
            "seed" => V::Integer(self.seed as i64),
            "image_size" => i(self.image_size),
            "model.backbone_dim" => i(self.backbone_dim),
            "model.backbone_blocks" => i(self.backbone_blocks),
            "model.backbone_heads" => i(self.backbone_heads),
            "model.mlp_ratio" => i(self.mlp_ratio),
            "model.edge_width" => i(self.edge_width),
            "model.edge_blocks" => i(self.edge_blocks),
            "model.groups" => i(self.groups),
            "model.decoder_dim" => i(self.decoder_dim),
            "model.decoder_layers" => i(self.decoder_layers),
            "model.encoder_layers" => i(self.encoder_layers),
            "model.msda_heads" => i(self.msda_heads),
            "model.msda_points" => i(self.msda_points),
            "refiner.enabled" => V::Boolean(self.refiner),
            "refiner.embed_dim" => i(self.embed_dim),
            "refiner.resolution" => i(self.refiner_resolution),
            "refiner.align_scenes" => i(self.refiner_align),
            "loss.tau" => V::Float(self.tau),
            "prompt.foreground" => s(&self.prompts.foreground),
            "prompt.background" => s(&self.prompts.background),
            "optim.lr" => V::Float(self.lr),
            "optim.weight_decay" => V::Float(self.weight_decay),
            "optim.clip_norm" => V::Float(self.clip_norm),
            "optim.beta1" => V::Float(self.beta1),
            "optim.beta2" => V::Float(self.beta2),
            "optim.eps" => V::Float(self.adam_eps),
            "train.iterations" => i(self.iterations),
            "train.batch_size" => i(self.batch_size),
            "train.checkpoint_every" => i(self.checkpoint_every),
            "train.deep_supervision" => V::Boolean(self.deep_supervision),
            "loss.clip" => V::Float(self.weights.clip),
            "loss.label" => V::Float(self.weights.label),
            "loss.mask" => V::Float(self.weights.mask),
            "loss.bbox" => V::Float(self.weights.bbox),
            "loss.l1" => V::Float(self.weights.l1),
            "loss.giou" => V::Float(self.weights.giou),
            "edge.source" => s(match self.edge_source {
                EdgeSource::Canny => "canny",
                EdgeSource::Magnitude => "magnitude",
            }),
            "edge.overlay" => s(match self.overlay {
                OverlayMode::Add => "add",
                OverlayMode::Blend => "blend",
            }),
            "edge.sigma" => V::Float(self.edge_sigma),
            "edge.low" => V::Float(self.edge_low),
            "edge.high" => V::Float(self.edge_high),
            "synth.mode" => s(&self.synth_mode.to_string()),
            "synth.train" => i(self.synth_train),
            "synth.test" => i(self.synth_test),
            "data.dir" => s(&self.data_dir.to_string_lossy()),
            "out.dir" => s(&self.out_dir.to_string_lossy()),
            "eval.e_measure" => s(match self.e_measure {
                EMeasure::Adaptive => "adaptive",
                EMeasure::Mean => "mean",
                EMeasure::Max => "max",
            }),
            other => return Err(cfg_err(format!("unknown key {other:?}"))),
        })
    }

    /// Applies every `key = value` of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| cfg_err(e.to_string()))?;
        let mut entries = Vec::new();
        flatten("", &table, &mut entries);
        for (k, v) in entries {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Applies one `key=value` override; bare words are taken as strings.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| cfg_err(format!("override {assignment:?} is not key=value")))?;
        let (k, v) = (k.trim(), v.trim());
        let value = format!("x = {v}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("x"))
            .unwrap_or_else(|| toml::Value::String(v.to_string()));
        self.set(k, &value)
    }

    pub fn from_text(base: Self, text: &str) -> Result<Self> {
        let mut c = base;
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Canonical `key = value` serialization, one line per key.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let v = self.get(k).expect("every canonical key is readable");
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("model.backbone_dim", self.backbone_dim),
            ("model.backbone_heads", self.backbone_heads),
            ("model.mlp_ratio", self.mlp_ratio),
            ("model.edge_width", self.edge_width),
            ("model.groups", self.groups),
            ("model.decoder_dim", self.decoder_dim),
            ("model.decoder_layers", self.decoder_layers),
            ("model.msda_heads", self.msda_heads),
            ("model.msda_points", self.msda_points),
            ("refiner.embed_dim", self.embed_dim),
            ("refiner.resolution", self.refiner_resolution),
            ("train.batch_size", self.batch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(cfg_err(format!("{k} must be positive")));
            }
        }
        if self.image_size % 32 != 0 {
            return Err(cfg_err(format!("image_size {} must be divisible by 32", self.image_size)));
        }
        if self.backbone_blocks < 4 {
            return Err(cfg_err("model.backbone_blocks must be at least 4"));
        }
        if self.backbone_dim % self.backbone_heads != 0 {
            return Err(cfg_err("model.backbone_dim must be divisible by model.backbone_heads"));
        }
        if self.backbone_dim % self.msda_heads != 0 || self.decoder_dim % self.msda_heads != 0 {
            return Err(cfg_err("model dims must be divisible by model.msda_heads"));
        }
        for (k, c) in [("stem", self.edge_width), ("stages", 2 * self.edge_width), ("proj", self.backbone_dim)] {
            if c % self.groups != 0 {
                return Err(cfg_err(format!("edge {k} width {c} not divisible by model.groups")));
            }
        }
        let pos = [
            ("loss.tau", self.tau),
            ("optim.lr", self.lr),
            ("optim.clip_norm", self.clip_norm),
            ("optim.eps", self.adam_eps),
            ("edge.sigma", self.edge_sigma),
        ];
        for (k, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(cfg_err(format!("{k} must be positive and finite, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(cfg_err("optim.beta1 and optim.beta2 must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(cfg_err("optim.weight_decay must be non-negative"));
        }
        let w = &self.weights;
        for (k, v) in [
            ("loss.clip", w.clip),
            ("loss.label", w.label),
            ("loss.mask", w.mask),
            ("loss.bbox", w.bbox),
            ("loss.l1", w.l1),
            ("loss.giou", w.giou),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(cfg_err(format!("{k} must be non-negative, got {v}")));
            }
        }
        if !(0.0 <= self.edge_low && self.edge_low < self.edge_high && self.edge_high <= 1.0) {
            return Err(cfg_err("edge thresholds must satisfy 0 <= low < high <= 1"));
        }
        PromptPair::new(&self.prompts.foreground, &self.prompts.background)
            .map_err(|e| cfg_err(e.to_string()))?;
        Ok(())
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            image_size: self.image_size,
            dim: self.backbone_dim,
            blocks: self.backbone_blocks,
            heads: self.backbone_heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn edge(&self) -> EdgeConfig {
        let w = self.edge_width;
        EdgeConfig {
            image_size: self.image_size,
            dim: self.backbone_dim,
            stem_channels: w,
            stage_channels: [2 * w, 2 * w, 2 * w],
            blocks_per_stage: self.edge_blocks,
            groups: self.groups,
            heads: self.msda_heads,
            points: self.msda_points,
        }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig {
            in_dim: self.backbone_dim,
            dim: self.decoder_dim,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            heads: self.msda_heads,
            points: self.msda_points,
        }
    }

    pub fn refiner_config(&self) -> RefinerConfig {
        RefinerConfig {
            embed_dim: self.embed_dim,
            resolution: self.refiner_resolution,
            align_scenes: self.refiner_align,
            tau: self.tau,
            ..RefinerConfig::default()
        }
    }
}
