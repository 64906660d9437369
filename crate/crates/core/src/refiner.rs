//! Training-only contrastive refiner: fuses soft masks with the image,
//! embeds fused images and prompts with frozen encoders and scores them
//! with a symmetric two-way contrastive loss.

use focus_tensor::{Graph, Var};

use crate::error::{invalid, Result};
use crate::imgproc::Image;
use crate::nn::{Conv, Init, ParamId, ParamStore, Session};
use crate::rng::SplitMix64;
use crate::synth::{gen_scene, Mode, SceneSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct PromptPair {
    pub foreground: String,
    pub background: String,
}

impl PromptPair {
    pub fn new(foreground: &str, background: &str) -> Result<Self> {
        if foreground.trim().is_empty() || background.trim().is_empty() {
            return Err(invalid("prompts must be non-empty"));
        }
        if foreground == background {
            return Err(invalid("foreground and background prompts must differ"));
        }
        Ok(Self {
            foreground: foreground.into(),
            background: background.into(),
        })
    }
}

impl Default for PromptPair {
    fn default() -> Self {
        Self {
            foreground: "salient objects without background".into(),
            background: "background with salient objects removed".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinerConfig {
    pub embed_dim: usize,
    pub resolution: usize,
    pub vocab: usize,
    pub text_dim: usize,
    pub tau: f64,
    /// Synthetic scenes used to fit the image projection before it is
    /// frozen; 0 keeps the random projection.
    pub align_scenes: usize,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            resolution: 64,
            vocab: 1024,
            text_dim: 32,
            tau: 0.07,
            align_scenes: 64,
        }
    }
}

/// Frozen image and text encoders. Parameters live in their own store and
/// are always bound as constants.
#[derive(Debug, Clone)]
pub struct Refiner {
    pub cfg: RefinerConfig,
    pub store: ParamStore,
    conv1: Conv,
    conv2: Conv,
    img_proj: ParamId,
    tokens: ParamId,
    text_proj: ParamId,
}

/// Lower-cased whitespace/punctuation words hashed with FNV-1a.
pub fn tokenize(text: &str, vocab: usize) -> Vec<usize> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for b in w.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            (h % vocab as u64) as usize
        })
        .collect()
}

pub const CHANNELS: [usize; 2] = [16, 32];
pub const ALIGN_STEPS: usize = 300;
pub const ALIGN_LR: f64 = 0.02;
const ALIGN_SIZE: usize = 64;

impl Refiner {
    pub fn new(seed: u64, cfg: RefinerConfig) -> Result<Self> {
        if !(cfg.tau > 0.0) {
            return Err(invalid(format!("temperature must be > 0, got {}", cfg.tau)));
        }
        if cfg.resolution % 4 != 0 || cfg.resolution == 0 {
            return Err(invalid(format!("encoder resolution {} not divisible by 4", cfg.resolution)));
        }
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::stream(seed, "refiner");
        let mut init = Init::new(&mut store, &mut rng);
        let (conv1, conv2, img_proj, tokens, text_proj) = init.scope("refiner", |i| {
            let conv1 = i.conv("image.conv1", 3, CHANNELS[0], 5, 2);
            let conv2 = i.conv("image.conv2", CHANNELS[0], CHANNELS[1], 3, 2);
            let img_proj = i.normal("image.proj", &[CHANNELS[1], cfg.embed_dim], 1.0);
            let tokens = i.normal("text.tokens", &[cfg.vocab, cfg.text_dim], 1.0);
            let text_proj = i.normal("text.proj", &[cfg.text_dim, cfg.embed_dim], 1.0);
            (conv1, conv2, img_proj, tokens, text_proj)
        });
        Ok(Self {
            cfg,
            store,
            conv1,
            conv2,
            img_proj,
            tokens,
            text_proj,
        })
    }

    pub fn session<'a>(&'a self, g: &'a Graph) -> Session<'a> {
        Session::new(g, &self.store, false)
    }

    /// Image embedding of a [3 × H × W] graph value, [1 × S], unit norm.
    pub fn encode_image(&self, s: &Session, img: Var) -> Result<Var> {
        let g = s.g;
        let pooled = self.pool(s, img)?;
        Ok(g.l2_normalize(g.matmul(pooled, s.p(self.img_proj))?)?)
    }

    /// Globally pooled conv features [1 × CHANNELS[1]].
    fn pool(&self, s: &Session, img: Var) -> Result<Var> {
        let g = s.g;
        let r = self.cfg.resolution;
        let x = g.resize_bilinear(img, r, r)?;
        let x = g.relu(self.conv1.forward(s, x)?);
        let x = g.relu(self.conv2.forward(s, x)?);
        let sh = g.shape(x);
        let hw = sh[1] * sh[2];
        let pooled = g.scale(g.sum_axis(g.reshape(x, &[sh[0], hw])?, 1)?, 1.0 / hw as f64);
        Ok(g.reshape(pooled, &[1, sh[0]])?)
    }

    /// Random encoders followed by a contrastive fit of the image
    /// projection on synthetic scenes, so that an image masked by its true
    /// foreground (background) embeds near the foreground (background)
    /// prompt. Everything is frozen afterwards.
    pub fn aligned(seed: u64, cfg: RefinerConfig, prompts: &PromptPair) -> Result<Self> {
        let mut r = Self::new(seed, cfg)?;
        if cfg.align_scenes > 0 {
            r.align(seed, prompts)?;
        }
        Ok(r)
    }

    fn align(&mut self, seed: u64, prompts: &PromptPair) -> Result<()> {
        let mut rng = SplitMix64::stream(seed, "refiner/align");
        let mut feats = Vec::new();
        for i in 0..self.cfg.align_scenes {
            let mode = if i % 2 == 0 { Mode::Salient } else { Mode::Camouflage };
            let scene = gen_scene(&SceneSpec::new(mode, ALIGN_SIZE, rng.next_u64()), "align")?;
            let n = ALIGN_SIZE * ALIGN_SIZE;
            for mask in [&scene.fg_mask, &scene.bg_mask] {
                let fused: Vec<f64> = scene.image.data().iter().enumerate().map(|(k, v)| v * mask[k % n]).collect();
                let g = Graph::new();
                let s = self.session(&g);
                let x = g.constant(&[3, ALIGN_SIZE, ALIGN_SIZE], fused)?;
                let p = self.pool(&s, x)?;
                feats.extend_from_slice(&g.data(p));
            }
        }
        let t_f = self.encode_text_value(&prompts.foreground)?;
        let t_b = self.encode_text_value(&prompts.background)?;
        let txt: Vec<f64> = t_f.iter().chain(&t_b).copied().collect();
        let (c, e) = (CHANNELS[1], self.cfg.embed_dim);
        let pairs = self.cfg.align_scenes;
        let mut m = vec![0.0; c * e];
        let mut v = vec![0.0; c * e];
        for t in 1..=ALIGN_STEPS {
            let g = Graph::new();
            let proj = self.store.get(self.img_proj).clone();
            let pv = g.input(&[c, e], proj.data().to_vec(), true)?;
            let x = g.constant(&[2 * pairs, c], feats.clone())?;
            let emb = g.l2_normalize(g.matmul(x, pv)?)?;
            let tv = g.constant(&[2, e], txt.clone())?;
            let mut total = None;
            for k in 0..pairs {
                let l = clip_loss(&g, g.narrow(emb, 0, 2 * k, 2)?, tv, self.cfg.tau)?;
                total = Some(match total {
                    None => l,
                    Some(a) => g.add(a, l)?,
                });
            }
            let loss = g.scale(total.expect("at least one scene"), 1.0 / pairs as f64);
            g.backward(loss)?;
            let grad = g.grad(pv).expect("projection requires grad");
            let (b1, b2) = (0.9f64, 0.999f64);
            let data = self.store.get_mut(self.img_proj).data_mut();
            for (i, gi) in grad.data().iter().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / (1.0 - b1.powi(t as i32));
                let vh = v[i] / (1.0 - b2.powi(t as i32));
                data[i] -= ALIGN_LR * mh / (vh.sqrt() + 1e-8);
            }
            if t == 1 || t == ALIGN_STEPS {
                log::debug!("refiner alignment step {t}: loss {:.4}", g.item(loss));
            }
        }
        Ok(())
    }

    pub fn encode_image_value(&self, img: &Image) -> Result<Vec<f64>> {
        let g = Graph::new();
        let s = self.session(&g);
        let x = g.constant(&[img.channels(), img.height(), img.width()], img.data().to_vec())?;
        let e = self.encode_image(&s, x)?;
        let out = g.data(e).to_vec();
        Ok(out)
    }

    /// Text embedding [1 × S], unit norm.
    pub fn encode_text(&self, s: &Session, text: &str) -> Result<Var> {
        let ids = tokenize(text, self.cfg.vocab);
        if ids.is_empty() {
            return Err(invalid("cannot encode empty text"));
        }
        let g = s.g;
        let table = s.store().get(self.tokens);
        let d = self.cfg.text_dim;
        let mut mean = vec![0.0; d];
        for id in &ids {
            mean.iter_mut()
                .zip(&table.data()[id * d..(id + 1) * d])
                .for_each(|(m, v)| *m += v / ids.len() as f64);
        }
        let m = g.constant(&[1, d], mean)?;
        Ok(g.l2_normalize(g.matmul(m, s.p(self.text_proj))?)?)
    }

    pub fn encode_text_value(&self, text: &str) -> Result<Vec<f64>> {
        let g = Graph::new();
        let s = self.session(&g);
        let e = self.encode_text(&s, text)?;
        let out = g.data(e).to_vec();
        Ok(out)
    }

    /// Contrastive loss of a fused foreground/background image pair
    /// against the prompt pair.
    pub fn loss(
        &self,
        s: &Session,
        fused_fg: Var,
        fused_bg: Var,
        prompts: &PromptPair,
    ) -> Result<Var> {
        let g = s.g;
        let i_f = self.encode_image(s, fused_fg)?;
        let i_b = self.encode_image(s, fused_bg)?;
        let t_f = self.encode_text(s, &prompts.foreground)?;
        let t_b = self.encode_text(s, &prompts.background)?;
        let img = g.concat(&[i_f, i_b], 0)?;
        let txt = g.concat(&[t_f, t_b], 0)?;
        clip_loss(g, img, txt, self.cfg.tau)
    }
}

/// Masks the image with sigmoid(logits) resized to the image size.
/// `img` is [3 × H × W]; `logits` is [h × w].
pub fn fuse_mask(g: &Graph, img: Var, logits: Var) -> Result<Var> {
    let sh = g.shape(img);
    let ls = g.shape(logits);
    if sh.len() != 3 || ls.len() != 2 {
        return Err(crate::error::shape_err(
            "fuse_mask",
            "[3, H, W] image and [h, w] logits",
            format!("{sh:?}, {ls:?}"),
        ));
    }
    let m = g.sigmoid(g.resize_bilinear(logits, sh[1], sh[2])?);
    Ok(g.mul(img, m)?)
}

/// Symmetric two-way contrastive loss. Rows of `img` and `txt` ([2 × S])
/// are (foreground, background); matching rows are the positives.
pub fn clip_loss(g: &Graph, img: Var, txt: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(invalid(format!("temperature must be > 0, got {tau}")));
    }
    let sim = g.scale(g.matmul(img, g.transpose(txt)?)?, 1.0 / tau);
    let i2t = diag_nll(g, sim)?;
    let t2i = diag_nll(g, g.transpose(sim)?)?;
    Ok(g.scale(g.add(i2t, t2i)?, 0.5))
}

/// Mean over rows of −log softmax(row)[row index], for a 2 × 2 matrix.
fn diag_nll(g: &Graph, logits: Var) -> Result<Var> {
    let ls = g.log_softmax(logits)?;
    let eye = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0])?;
    Ok(g.scale(g.sum(g.mul(ls, eye)?), -0.5))
}
