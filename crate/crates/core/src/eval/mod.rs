//! Jaccard evaluation, ablation sweeps and pseudo-label export.

pub mod ablation;
pub mod export;

use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

pub use ablation::{ablate, axes, AblationAxis, AblationCell, AblationTable};
pub use export::{export_pseudo_labels, export_samples, selected_frames, ExportManifest, ExportPolicy, ExportedSequence};

use crate::data::io::{frame_file, write_rgb_png};
use crate::error::{invalid, shape_err, Error, Result};
use crate::geometry::rasterize_box;
use crate::model::{Model, ParamStore};
use crate::pipeline::{infer_frames, parallel_map, variants, Checkpoint, PipelineConfig, VideoSample};
use crate::registry::Registry;
use crate::tensor::Tensor;

/// Intersection over union of two binary masks (`> 0.5` is foreground).
/// Two empty masks score 1.
pub fn jaccard(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(shape_err!("jaccard: prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p > 0.5, g > 0.5);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Produces binary masks for selected frames of a sequence.
pub trait Predictor: Send + Sync {
    fn description(&self) -> &'static str;

    /// One `H×W×1` mask per entry of `frames`.
    fn predict(&self, sample: &VideoSample, frames: &[usize]) -> Result<Vec<Tensor>>;
}

/// Runs the trained network.
pub struct ModelPredictor {
    pub model: Model,
    pub params: ParamStore,
    pub config: PipelineConfig,
    /// Threads used inside one sequence.
    pub workers: usize,
}

impl ModelPredictor {
    pub fn new(model: Model, params: ParamStore, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        params.validate(&model.specs())?;
        Ok(Self { model, params, config, workers: 1 })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Self::new(ck.model()?, ck.params.clone(), ck.config.clone())
    }

    /// Same weights under a different pipeline configuration. The model
    /// dimensions must not change.
    pub fn with_config(&self, config: PipelineConfig) -> Result<Self> {
        if config.model != self.config.model {
            return Err(invalid!("model dimensions cannot change between evaluations"));
        }
        config.validate()?;
        Ok(Self { model: self.model.clone(), params: self.params.clone(), config, workers: self.workers })
    }
}

impl Predictor for ModelPredictor {
    fn description(&self) -> &'static str {
        "trained network"
    }

    fn predict(&self, sample: &VideoSample, frames: &[usize]) -> Result<Vec<Tensor>> {
        let variant = variants().get(&self.config.variant)?;
        Ok(infer_frames(&self.model, &self.params, sample, &self.config, variant, frames, self.workers)?.masks)
    }
}

struct BoxPredictor;

impl Predictor for BoxPredictor {
    fn description(&self) -> &'static str {
        "filled box"
    }

    fn predict(&self, sample: &VideoSample, frames: &[usize]) -> Result<Vec<Tensor>> {
        let (h, w) = sample.image_size().ok_or_else(|| invalid!("sequence `{}` has no frames", sample.id))?;
        frames.iter().map(|&i| rasterize_box(&sample.boxes[i], h, w)).collect()
    }
}

struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn description(&self) -> &'static str {
        "ground truth fed back"
    }

    fn predict(&self, sample: &VideoSample, frames: &[usize]) -> Result<Vec<Tensor>> {
        let gt = ground_truth(sample)?;
        Ok(frames.iter().map(|&i| gt[i].clone()).collect())
    }
}

struct EmptyPredictor;

impl Predictor for EmptyPredictor {
    fn description(&self) -> &'static str {
        "all background"
    }

    fn predict(&self, sample: &VideoSample, frames: &[usize]) -> Result<Vec<Tensor>> {
        let (h, w) = sample.image_size().ok_or_else(|| invalid!("sequence `{}` has no frames", sample.id))?;
        Ok(frames.iter().map(|_| Tensor::zeros(&[h, w, 1])).collect())
    }
}

pub const BOX_BASELINE: &str = "box";
pub const ORACLE: &str = "oracle";
pub const EMPTY: &str = "empty";

/// Reference predictors that need no weights.
pub fn baselines() -> &'static Registry<dyn Predictor> {
    static REGISTRY: OnceLock<Registry<dyn Predictor>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut r: Registry<dyn Predictor> = Registry::new("baseline predictor");
        r.register(BOX_BASELINE, Box::new(BoxPredictor));
        r.register(ORACLE, Box::new(OraclePredictor));
        r.register(EMPTY, Box::new(EmptyPredictor));
        r
    })
}

fn ground_truth(sample: &VideoSample) -> Result<&[Tensor]> {
    sample
        .gt_masks
        .as_deref()
        .ok_or_else(|| Error::Data(format!("sequence `{}` has no ground-truth masks", sample.id)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub id: String,
    pub frames: usize,
    /// Mean of the per-frame J.
    pub mean_j: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub predictor: String,
    pub config: PipelineConfig,
    pub sequences: Vec<SequenceScore>,
    /// Unweighted mean of the per-sequence means.
    pub dataset_j: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationTable>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Scores one sequence; returns the predictions alongside.
pub fn score_sequence(predictor: &dyn Predictor, sample: &VideoSample) -> Result<(SequenceScore, Vec<Tensor>)> {
    sample.validate()?;
    let gt = ground_truth(sample)?;
    let frames: Vec<usize> = (0..sample.len()).collect();
    let pred = predictor.predict(sample, &frames)?;
    let js = pred.iter().zip(gt).map(|(p, g)| jaccard(p, g)).collect::<Result<Vec<_>>>()?;
    let mean_j = js.iter().sum::<f64>() / js.len() as f64;
    Ok((SequenceScore { id: sample.id.clone(), frames: js.len(), mean_j }, pred))
}

/// Per-frame J averaged per sequence, then over sequences. Sequences run on
/// up to `workers` threads; the report is assembled in sequence-id order.
pub fn evaluate(
    dataset: &[VideoSample],
    predictor: &dyn Predictor,
    name: &str,
    config: &PipelineConfig,
    workers: usize,
    dump_dir: Option<&Path>,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(invalid!("cannot evaluate an empty dataset"));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by(|&a, &b| dataset[a].id.cmp(&dataset[b].id));
    let scored = parallel_map(order.len(), workers, |k| {
        let sample = &dataset[order[k]];
        let (score, pred) = score_sequence(predictor, sample)?;
        if let Some(dir) = dump_dir {
            dump_comparison(&dir.join(&sample.id), sample, &pred)?;
        }
        Ok(score)
    });
    let sequences: Vec<SequenceScore> = scored.into_iter().collect::<Result<_>>()?;
    let dataset_j = sequences.iter().map(|s| s.mean_j).sum::<f64>() / sequences.len() as f64;
    Ok(EvalReport { predictor: name.to_string(), config: config.clone(), sequences, dataset_j, ablation: None })
}

/// Writes `frame | prediction | ground truth` strips, one PNG per frame.
pub fn dump_comparison(dir: &Path, sample: &VideoSample, pred: &[Tensor]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let gt = ground_truth(sample)?;
    for (i, p) in pred.iter().enumerate() {
        let (h, w, _) = p.hwc()?;
        let mut strip = Tensor::zeros(&[h, 3 * w, 3]);
        let out = strip.data_mut();
        for r in 0..h {
            for c in 0..w {
                let px = r * w + c;
                for ch in 0..3 {
                    out[(r * 3 * w + c) * 3 + ch] = sample.frames[i].data()[px * 3 + ch];
                    out[(r * 3 * w + w + c) * 3 + ch] = p.data()[px];
                    out[(r * 3 * w + 2 * w + c) * 3 + ch] = gt[i].data()[px];
                }
            }
        }
        write_rgb_png(&dir.join(frame_file(i)), &strip)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
