//! Sweeps of one pipeline setting at a time.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{evaluate, EvalReport, ModelPredictor, SequenceScore};
use crate::error::{invalid, Result};
use crate::pipeline::{variant, variants, PipelineConfig, VideoSample};
use crate::registry::Registry;

/// A named pipeline setting that an ablation varies.
pub trait AblationAxis: Send + Sync {
    fn description(&self) -> &'static str;

    fn default_values(&self) -> Vec<Value>;

    /// Writes `value` into `cfg`.
    fn apply(&self, cfg: &mut PipelineConfig, value: &Value) -> Result<()>;
}

fn as_usize(value: &Value) -> Result<usize> {
    value
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| invalid!("expected a nonnegative integer, got {value}"))
}

fn as_f64(value: &Value) -> Result<f64> {
    value.as_f64().ok_or_else(|| invalid!("expected a number, got {value}"))
}

struct NumFrames;

impl AblationAxis for NumFrames {
    fn description(&self) -> &'static str {
        "frames per window"
    }

    fn default_values(&self) -> Vec<Value> {
        [1, 3, 5, 7, 9, 11].iter().map(|v| json!(v)).collect()
    }

    fn apply(&self, cfg: &mut PipelineConfig, value: &Value) -> Result<()> {
        cfg.num_frames = as_usize(value)?;
        Ok(())
    }
}

struct SdIters;

impl AblationAxis for SdIters {
    fn description(&self) -> &'static str {
        "steepest-descent iterations at inference"
    }

    fn default_values(&self) -> Vec<Value> {
        [5, 10, 15, 20].iter().map(|v| json!(v)).collect()
    }

    fn apply(&self, cfg: &mut PipelineConfig, value: &Value) -> Result<()> {
        cfg.sd_iters_infer = as_usize(value)?;
        Ok(())
    }
}

struct CropScale;

impl AblationAxis for CropScale {
    fn description(&self) -> &'static str {
        "crop size relative to the box at inference"
    }

    fn default_values(&self) -> Vec<Value> {
        [2.0, 3.0, 4.0, 5.0].iter().map(|v| json!(v)).collect()
    }

    fn apply(&self, cfg: &mut PipelineConfig, value: &Value) -> Result<()> {
        cfg.crop_scale_infer = as_f64(value)?;
        Ok(())
    }
}

struct Interval;

impl AblationAxis for Interval {
    fn description(&self) -> &'static str {
        "spacing between window frames"
    }

    fn default_values(&self) -> Vec<Value> {
        [1, 5, 10, 15].iter().map(|v| json!(v)).collect()
    }

    fn apply(&self, cfg: &mut PipelineConfig, value: &Value) -> Result<()> {
        cfg.interval = as_usize(value)?;
        Ok(())
    }
}

struct Variant;

impl AblationAxis for Variant {
    fn description(&self) -> &'static str {
        "architecture variant"
    }

    fn default_values(&self) -> Vec<Value> {
        [variant::SINGLE_IMAGE, variant::MULTI_FRAME, variant::MULTI_FRAME_PLUS, variant::ITERATIVE]
            .iter()
            .map(|v| json!(v))
            .collect()
    }

    fn apply(&self, cfg: &mut PipelineConfig, value: &Value) -> Result<()> {
        let name = value.as_str().ok_or_else(|| invalid!("expected a variant name, got {value}"))?;
        variants().get(name)?;
        cfg.variant = name.to_string();
        Ok(())
    }
}

pub const NUM_FRAMES: &str = "num_frames";
pub const SD_ITERS: &str = "sd_iters";
pub const CROP_SCALE: &str = "crop_scale";
pub const INTERVAL: &str = "interval";
pub const VARIANT: &str = "variant";

pub fn axes() -> &'static Registry<dyn AblationAxis> {
    static REGISTRY: OnceLock<Registry<dyn AblationAxis>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut r: Registry<dyn AblationAxis> = Registry::new("ablation axis");
        r.register(NUM_FRAMES, Box::new(NumFrames));
        r.register(SD_ITERS, Box::new(SdIters));
        r.register(CROP_SCALE, Box::new(CropScale));
        r.register(INTERVAL, Box::new(Interval));
        r.register(VARIANT, Box::new(Variant));
        r
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub value: Value,
    pub sequences: Vec<SequenceScore>,
    pub dataset_j: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: String,
    pub cells: Vec<AblationCell>,
}

/// Evaluates `predictor` once per value of `axis` (the axis defaults when
/// `values` is `None`). The top level of the returned report is the
/// evaluation under the predictor's own configuration.
pub fn ablate(
    dataset: &[VideoSample],
    predictor: &ModelPredictor,
    axis: &str,
    values: Option<&[Value]>,
    workers: usize,
) -> Result<EvalReport> {
    let ax = axes().get(axis)?;
    let values = values.map_or_else(|| ax.default_values(), <[Value]>::to_vec);
    if values.is_empty() {
        return Err(invalid!("ablation over `{axis}` needs at least one value"));
    }
    let configs = values
        .iter()
        .map(|v| {
            let mut cfg = predictor.config.clone();
            ax.apply(&mut cfg, v)?;
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::with_capacity(values.len());
    let mut base: Option<EvalReport> = None;
    for (value, cfg) in values.into_iter().zip(configs) {
        let report = evaluate(dataset, &predictor.with_config(cfg.clone())?, "model", &cfg, workers, None)?;
        cells.push(AblationCell { value, sequences: report.sequences.clone(), dataset_j: report.dataset_j });
        if cfg == predictor.config && base.is_none() {
            base = Some(report);
        }
    }
    let mut report = match base {
        Some(r) => r,
        None => evaluate(dataset, predictor, "model", &predictor.config, workers, None)?,
    };
    report.ablation = Some(AblationTable { axis: axis.to_string(), cells });
    Ok(report)
}
