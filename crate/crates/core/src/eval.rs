//! Dataset evaluation and mask export.

use std::path::Path;

use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::error::{invalid, Result};
use crate::imgproc::{encode_png, Image};
use crate::inference::MoiResult;
use crate::io::atomic_write;
use crate::metrics::{evaluate, EMeasure, MetricsReport, METRIC_NAMES};
use crate::model::Model;
use crate::synth::ImageSample;

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const THREADS_ENV: &str = "FOCUS_THREADS";

#[derive(Debug, Clone)]
pub struct ImageResult {
    pub id: String,
    pub moi: MoiResult,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub images: Vec<ImageResult>,
    pub aggregate: MetricsReport,
}

/// Worker count from `FOCUS_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|n| *n > 0)
}

fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match thread_cap() {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| invalid(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Soft mask as an 8-bit grayscale PNG.
pub fn mask_png(moi: &MoiResult) -> Result<Vec<u8>> {
    let img = Image::new(moi.h, moi.w, 1, moi.soft_fg.clone())?;
    encode_png(&img)
}

pub fn evaluate_dataset(model: &Model, samples: &[ImageSample], e: EMeasure) -> Result<EvalReport> {
    let images = with_pool(|| {
        samples
            .par_iter()
            .map(|s| {
                let moi = model.predict(&s.image)?;
                let (h, w) = (s.image.height(), s.image.width());
                let metrics = evaluate(&moi.soft_fg, &s.fg_mask, h, w, e)?;
                Ok(ImageResult {
                    id: s.id.clone(),
                    moi,
                    metrics,
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let reports: Vec<MetricsReport> = images.iter().map(|r| r.metrics).collect();
    Ok(EvalReport {
        aggregate: MetricsReport::mean(&reports),
        images,
    })
}

fn num(v: f64) -> Value {
    serde_json::Number::from_f64(v).map(Value::Number).unwrap_or(Value::Null)
}

fn metrics_object(m: &MetricsReport) -> Value {
    let mut o = Map::new();
    for (k, v) in METRIC_NAMES.iter().zip(m.values()) {
        o.insert(k.to_string(), num(v));
    }
    Value::Object(o)
}

impl EvalReport {
    pub fn to_json(&self, dataset: &str, e: EMeasure) -> Value {
        json!({
            "schema_version": METRICS_SCHEMA_VERSION,
            "dataset": dataset,
            "images": self.images.len(),
            "e_measure": format!("{e:?}").to_lowercase(),
            "metrics": metrics_object(&self.aggregate),
        })
    }

    /// One row per image, then an `aggregate` row.
    pub fn to_csv(&self) -> String {
        let fmt = |v: f64| if v.is_nan() { String::new() } else { v.to_string() };
        let mut s = format!("schema_version,id,{}\n", METRIC_NAMES.join(","));
        let rows = self
            .images
            .iter()
            .map(|r| (r.id.as_str(), &r.metrics))
            .chain(std::iter::once(("aggregate", &self.aggregate)));
        for (id, m) in rows {
            let vals: Vec<String> = m.values().iter().map(|v| fmt(*v)).collect();
            s.push_str(&format!("{METRICS_SCHEMA_VERSION},{id},{}\n", vals.join(",")));
        }
        s
    }

    pub fn write(&self, out_dir: &Path, dataset: &str, e: EMeasure, masks: bool) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_json(dataset, e)).expect("serializable");
        atomic_write(&out_dir.join("metrics.json"), json.as_bytes())?;
        atomic_write(&out_dir.join("metrics.csv"), self.to_csv().as_bytes())?;
        if masks {
            for r in &self.images {
                atomic_write(&out_dir.join("masks").join(format!("{}.png", r.id)), &mask_png(&r.moi)?)?;
            }
        }
        Ok(())
    }
}

/// MAE of the best constant prediction on a split, averaged per image
/// as evaluation does. The mean over images of |c − g| is linear in c, so
/// the optimum is c = 0 or c = 1 and the value is min(f̄, 1 − f̄) for the
/// mean foreground fraction f̄.
pub fn constant_predictor_mae(samples: &[ImageSample]) -> f64 {
    let n = samples.len() as f64;
    let f = samples.iter().map(|s| s.area_fraction()).sum::<f64>() / n;
    f.min(1.0 - f)
}
