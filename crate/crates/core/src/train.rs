//! Training loop: per-sample graphs, batch-averaged gradients, global-norm
//! clipping and AdamW, with periodic checkpoints and a per-step loss log.

use std::path::{Path, PathBuf};

use focus_tensor::{Graph, Tensor};
use rayon::prelude::*;

use crate::backbone::AttentionMask;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::criterion::{match_layer, total_loss, LossReport, TargetSet};
use crate::error::{invalid, Error, Result};
use crate::imgproc::Image;
use crate::io::atomic_write;
use crate::model::Model;
use crate::nn::{ParamStore, Session};
use crate::refiner::{fuse_mask, Refiner};
use crate::rng::SplitMix64;
use crate::synth::ImageSample;

pub const LOSS_SCHEMA_VERSION: u32 = 1;
pub const LOSS_HEADER: &str = "schema_version,step,total,clip,label,mask,bbox,grad_norm";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.csv";

/// Decoupled-weight-decay Adam. Decay applies to matrices and kernels
/// (rank ≥ 2) only; biases, norms, scalars and embeddings-as-vectors are
/// left undecayed.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &RunConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let decay = if p.rank() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *x *= 1.0 - self.lr * decay;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    fn to_entries(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = vec![("step".to_string(), Tensor::scalar(self.t as f64))];
        for (k, (name, t)) in store.iter().enumerate() {
            let shape = t.shape();
            out.push((format!("m.{name}"), Tensor::new(shape, self.m[k].clone()).expect("moment shape")));
            out.push((format!("v.{name}"), Tensor::new(shape, self.v[k].clone()).expect("moment shape")));
        }
        out
    }

    fn load_entries(&mut self, store: &ParamStore, entries: &[(String, Tensor)]) -> Result<()> {
        let find = |n: &str| {
            entries
                .iter()
                .find(|(e, _)| e == n)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer entry {n} missing")))
        };
        self.t = find("step")?.item() as u64;
        for (k, (name, t)) in store.iter().enumerate() {
            for (prefix, slot) in [("m", &mut self.m[k]), ("v", &mut self.v[k])] {
                let e = find(&format!("{prefix}.{name}"))?;
                if e.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("optimizer entry {prefix}.{name} has the wrong shape")));
                }
                *slot = e.data().to_vec();
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place to global L2 norm ≤ `max_norm`; returns the
/// norm after clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
        grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    } else {
        norm
    }
}

/// Per-step record written to the loss CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: LossReport,
    pub grad_norm: f64,
}

impl StepLog {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{LOSS_SCHEMA_VERSION},{},{},{},{},{},{},{}",
            self.step, l.total, l.clip, l.label, l.mask, l.bbox, self.grad_norm
        )
    }

    pub fn parse(row: &str) -> Result<Self> {
        let f: Vec<&str> = row.split(',').collect();
        let bad = || Error::Invalid(format!("malformed loss row {row:?}"));
        if f.len() != 8 || f[0] != LOSS_SCHEMA_VERSION.to_string() {
            return Err(bad());
        }
        let n = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(Self {
            step: f[1].parse().map_err(|_| bad())?,
            loss: LossReport {
                total: n(2)?,
                clip: n(3)?,
                label: n(4)?,
                mask: n(5)?,
                bbox: n(6)?,
            },
            grad_norm: n(7)?,
        })
    }
}

pub fn write_loss_csv(path: &Path, logs: &[StepLog]) -> Result<()> {
    let mut s = String::from(LOSS_HEADER);
    s.push('\n');
    for l in logs {
        s.push_str(&l.csv_row());
        s.push('\n');
    }
    atomic_write(path, s.as_bytes())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<StepLog>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_HEADER) {
        return Err(invalid(format!("{} has an unexpected header", path.display())));
    }
    lines.filter(|l| !l.is_empty()).map(StepLog::parse).collect()
}

/// Inputs of one training sample that do not depend on parameters.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub image: Image,
    pub edge_image: Image,
    pub targets: TargetSet,
}

pub fn prepare(model: &Model, samples: &[ImageSample]) -> Result<Vec<Prepared>> {
    let n = model.cfg.image_size;
    let grid = (n / 4, n / 4);
    samples
        .par_iter()
        .map(|s| {
            if s.image.height() != n || s.image.width() != n {
                return Err(invalid(format!(
                    "sample {} is {}x{}, model expects {n}x{n}",
                    s.id,
                    s.image.height(),
                    s.image.width()
                )));
            }
            Ok(Prepared {
                edge_image: model.edge_input(&s.image)?,
                targets: TargetSet::from_mask(&s.fg_mask, n, n, grid)?,
                image: s.image.clone(),
            })
        })
        .collect()
}

pub struct SampleResult {
    pub grads: Vec<Vec<f64>>,
    pub loss: LossReport,
}

/// Loss and parameter gradients of one sample.
pub fn sample_step(
    model: &Model,
    refiner: Option<&Refiner>,
    sample: &Prepared,
    m0: &AttentionMask,
) -> Result<SampleResult> {
    let cfg = &model.cfg;
    let g = Graph::new();
    let s = Session::new(&g, &model.store, true);
    let preds = model.forward_with(&s, &sample.image, &sample.edge_image, m0)?;
    let clip = match refiner {
        Some(r) => {
            let last = preds.last();
            let assign = match_layer(&g, last, &sample.targets, &cfg.weights)?;
            let q_fg = assign.iter().position(|&t| t == 0).expect("perfect assignment");
            let img = &sample.image;
            let x = g.constant(&[3, img.height(), img.width()], img.data().to_vec())?;
            let (mh, mw) = preds.mask_grid;
            let row = |q: usize| -> Result<_> {
                Ok(g.reshape(g.narrow(last.mask_logits, 0, q, 1)?, &[mh, mw])?)
            };
            let fused_fg = fuse_mask(&g, x, row(q_fg)?)?;
            let fused_bg = fuse_mask(&g, x, row(1 - q_fg)?)?;
            let rs = r.session(&g);
            Some(r.loss(&rs, fused_fg, fused_bg, &cfg.prompts)?)
        }
        None => None,
    };
    let (terms, loss) = total_loss(&g, &preds, &sample.targets, clip, &cfg.weights, cfg.deep_supervision)?;
    if !loss.total.is_finite() {
        return Ok(SampleResult { grads: Vec::new(), loss });
    }
    g.backward(terms.total)?;
    let grads = s
        .grads()
        .into_iter()
        .zip(model.store.iter())
        .map(|(gr, (_, t))| gr.unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    Ok(SampleResult { grads, loss })
}

pub struct Trainer {
    pub model: Model,
    pub refiner: Option<Refiner>,
    pub opt: AdamW,
    pub step: usize,
    pub logs: Vec<StepLog>,
    pub data: Vec<Prepared>,
    pub out_dir: PathBuf,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, samples: &[ImageSample], out_dir: &Path) -> Result<Self> {
        let model = Model::new(cfg)?;
        let refiner = if cfg.refiner {
            Some(Refiner::aligned(cfg.seed, cfg.refiner_config(), &cfg.prompts)?)
        } else {
            None
        };
        if samples.is_empty() {
            return Err(Error::Dataset("no training samples".into()));
        }
        let data = prepare(&model, samples)?;
        let opt = AdamW::new(cfg, &model.store);
        Ok(Self {
            model,
            refiner,
            opt,
            step: 0,
            logs: Vec::new(),
            data,
            out_dir: out_dir.to_path_buf(),
        })
    }

    /// Continues from a checkpoint written by an earlier run of the same
    /// config, keeping that run's loss rows up to the checkpoint.
    pub fn resume(cfg: &RunConfig, samples: &[ImageSample], out_dir: &Path, ckpt: &Checkpoint) -> Result<Self> {
        let saved = RunConfig::from_text(RunConfig::desk(), &ckpt.config)?;
        let mut expected = saved.clone();
        expected.iterations = cfg.iterations;
        expected.out_dir = cfg.out_dir.clone();
        expected.data_dir = cfg.data_dir.clone();
        if &expected != cfg {
            return Err(Error::Checkpoint("config differs from the checkpoint's".into()));
        }
        let mut t = Self::new(cfg, samples, out_dir)?;
        t.model.store.load(&ckpt.params)?;
        t.opt.load_entries(&t.model.store, &ckpt.optimizer)?;
        t.step = ckpt.iteration as usize;
        let csv = out_dir.join(LOSS_FILE);
        if csv.exists() {
            t.logs = read_loss_csv(&csv)?;
            t.logs.retain(|l| l.step <= t.step);
        }
        if t.logs.len() != t.step {
            return Err(Error::Checkpoint(format!(
                "loss log has {} rows for a checkpoint at step {}",
                t.logs.len(),
                t.step
            )));
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.step as u64,
            config: self.model.cfg.to_text(),
            params: self
                .model
                .store
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            optimizer: self.opt.to_entries(&self.model.store),
        }
    }

    pub fn save(&self) -> Result<()> {
        self.checkpoint().save(&self.out_dir.join(CHECKPOINT_FILE))?;
        write_loss_csv(&self.out_dir.join(LOSS_FILE), &self.logs)
    }

    /// Dataset indices of the batch for `step` (0-based): consecutive
    /// positions in a per-epoch seeded shuffle.
    pub fn batch_indices(&self, step: usize) -> Vec<usize> {
        batch_indices(self.model.cfg.seed, self.data.len(), self.model.cfg.batch_size, step)
    }

    /// One optimizer step.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let idx = self.batch_indices(self.step);
        let model = &self.model;
        let refiner = self.refiner.as_ref();
        let results: Vec<SampleResult> = idx
            .par_iter()
            .map(|&i| {
                let m0 = model.initial_mask(&self.data[i].image)?;
                sample_step(model, refiner, &self.data[i], &m0)
            })
            .collect::<Result<_>>()?;
        let b = results.len() as f64;
        let mut loss = LossReport::default();
        for r in &results {
            if !r.loss.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step + 1,
                    value: r.loss.total,
                });
            }
            loss.total += r.loss.total / b;
            loss.clip += r.loss.clip / b;
            loss.label += r.loss.label / b;
            loss.mask += r.loss.mask / b;
            loss.bbox += r.loss.bbox / b;
        }
        let mut grads: Vec<Vec<f64>> = self.model.store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        for r in &results {
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                acc.iter_mut().zip(g).for_each(|(a, x)| *a += x / b);
            }
        }
        let grad_norm = clip_global_norm(&mut grads, self.model.cfg.clip_norm);
        self.opt.step(&mut self.model.store, &grads);
        self.step += 1;
        let log = StepLog {
            step: self.step,
            loss,
            grad_norm,
        };
        self.logs.push(log);
        Ok(log)
    }

    /// Runs to `cfg.iterations`, checkpointing every `checkpoint_every`
    /// steps and at the end. A non-finite loss stops the run after saving
    /// the last good state.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepLog)) -> Result<()> {
        let every = self.model.cfg.checkpoint_every;
        while self.step < self.model.cfg.iterations {
            match self.train_step() {
                Ok(log) => on_step(&log),
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    self.save()?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
            if every > 0 && self.step % every == 0 {
                self.save()?;
            }
        }
        self.save()
    }
}

pub fn batch_indices(seed: u64, n: usize, batch: usize, step: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for j in 0..batch {
        let pos = step * batch + j;
        let epoch = pos / n;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut order: Vec<usize> = (0..n).collect();
            SplitMix64::stream(seed, &format!("epoch/{epoch}")).shuffle(&mut order);
            cached = Some((epoch, order));
        }
        out.push(cached.as_ref().expect("just filled").1[pos % n]);
    }
    out
}

/// Mean of `values` over a trailing window ending at index `end`
/// (exclusive).
pub fn window_mean(values: &[f64], end: usize, window: usize) -> f64 {
    let start = end.saturating_sub(window);
    let s = &values[start..end];
    s.iter().sum::<f64>() / s.len() as f64
}
