//! The full network: backbone, edge pathway and fusion, pixel decoder,
//! ground-query decoder and heads, sharing one parameter store.

use focus_tensor::Graph;

use crate::backbone::{init_attention_mask, AttentionMask, Backbone};
use crate::checkpoint::Checkpoint;
use crate::config::{EdgeSource, OverlayMode, RunConfig};
use crate::decoder::{level_for_layer, GroundDecoder, PixelDecoder, PredictionSet};
use crate::edge::{EdgeNet, Fusion};
use crate::error::{invalid, Result};
use crate::imgproc::{binarize, canny, pca_first_component, gaussian_blur, gradient_magnitude, overlay_map, to_grayscale, Image};
use crate::inference::{fuse_probs, MoiResult};
use crate::nn::{Init, ParamStore, Session};
use crate::rng::SplitMix64;

/// Top-level parameter name prefixes, in store order.
pub const SECTIONS: [&str; 6] = [
    "backbone",
    "edge_net",
    "fusion",
    "pixel_decoder",
    "ground_decoder",
    "heads",
];

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub edge_net: EdgeNet,
    pub fusion: Fusion,
    pub pixel_decoder: PixelDecoder,
    pub ground_decoder: GroundDecoder,
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::stream(cfg.seed, "model");
        let mut init = Init::new(&mut store, &mut rng);
        let backbone = Backbone::new(&mut init, cfg.backbone())?;
        let edge_net = EdgeNet::new(&mut init, cfg.edge())?;
        let fusion = Fusion::new(&mut init, cfg.backbone_dim, cfg.backbone_blocks, cfg.edge())?;
        let pixel_decoder = PixelDecoder::new(&mut init, cfg.decoder())?;
        let ground_decoder = GroundDecoder::new(&mut init, cfg.decoder())?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            edge_net,
            fusion,
            pixel_decoder,
            ground_decoder,
        })
    }

    /// Rebuilds the model recorded in a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = RunConfig::from_text(RunConfig::desk(), &ckpt.config)?;
        let mut m = Self::new(&cfg)?;
        m.store.load(&ckpt.params)?;
        Ok(m)
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let n = self.cfg.image_size;
        if img.channels() != 3 || img.height() != n || img.width() != n {
            return Err(invalid(format!(
                "model expects a 3-channel {n}x{n} image, got {}x{}x{}",
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        Ok(())
    }

    /// The image with its edge map overlaid, input of the edge network.
    pub fn edge_input(&self, img: &Image) -> Result<Image> {
        let c = &self.cfg;
        let map = match c.edge_source {
            EdgeSource::Canny => canny(img, c.edge_sigma, c.edge_low, c.edge_high)?.data,
            EdgeSource::Magnitude => gradient_magnitude(&gaussian_blur(&to_grayscale(img)?, c.edge_sigma)?)?,
        };
        match c.overlay {
            OverlayMode::Add => overlay_map(img, &map),
            OverlayMode::Blend => {
                let n = map.len();
                let data = img
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| map[i % n] + (1.0 - map[i % n]) * v)
                    .collect();
                Image::from_clamped(img.height(), img.width(), img.channels(), data)
            }
        }
    }

    /// First attention mask from the plain backbone's last block, on the
    /// grid of the first decoder level. Computed on values only.
    pub fn initial_mask(&self, img: &Image) -> Result<AttentionMask> {
        let g = Graph::new();
        let s = Session::new(&g, &self.store, false);
        let feats = self.backbone.forward(&s, img)?;
        let last = g.data(*feats.blocks.last().expect("forward checks the block count")).to_vec();
        let size = self.cfg.image_size;
        let shapes = [size / 8, size / 16, size / 32];
        let t = shapes[level_for_layer(0)];
        init_attention_mask(&last, feats.grid, self.cfg.backbone_dim, (t, t))
    }

    /// First principal-component scores of the last backbone block,
    /// min-max normalized to [0, 1], with their binarization at 0, on the
    /// backbone token grid.
    pub fn pca_maps(&self, img: &Image) -> Result<(Vec<f64>, Vec<f64>, (usize, usize))> {
        let g = Graph::new();
        let s = Session::new(&g, &self.store, false);
        let feats = self.backbone.forward(&s, img)?;
        let last = g.data(*feats.blocks.last().expect("forward checks the block count")).to_vec();
        let (gh, gw) = feats.grid;
        let pca = pca_first_component(&last, gh * gw, self.cfg.backbone_dim)?;
        let binary = binarize(&pca.scores, 0.0);
        let lo = pca.scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = pca.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(f64::MIN_POSITIVE);
        let norm = pca.scores.iter().map(|v| (v - lo) / span).collect();
        Ok((norm, binary, feats.grid))
    }

    /// Forward pass with a precomputed edge input and initial mask.
    pub fn forward_with(
        &self,
        s: &Session,
        img: &Image,
        edge_img: &Image,
        m0: &AttentionMask,
    ) -> Result<PredictionSet> {
        self.check_image(img)?;
        let edge = self.edge_net.forward(s, edge_img)?;
        let fused = self.fusion.forward(s, &self.backbone, img, &edge)?;
        let px = self.pixel_decoder.forward(s, &fused.pyramid)?;
        self.ground_decoder.forward(s, &px, m0)
    }

    pub fn forward(&self, s: &Session, img: &Image) -> Result<PredictionSet> {
        self.check_image(img)?;
        let edge_img = self.edge_input(img)?;
        let m0 = self.initial_mask(img)?;
        self.forward_with(s, img, &edge_img, &m0)
    }

    /// Final mask at input resolution.
    pub fn predict(&self, img: &Image) -> Result<MoiResult> {
        let g = Graph::new();
        let s = Session::new(&g, &self.store, false);
        let preds = self.forward(&s, img)?;
        let last = preds.last();
        let mask = g.data(last.mask_logits).to_vec();
        let class = g.data(last.class_logits).to_vec();
        fuse_probs(&mask, &class, preds.mask_grid, img.height(), img.width())
    }
}
