//! End-to-end box-to-mask pipeline: cropping, the window forward pass with
//! its architecture variants, the training loss and loop, checkpoints and
//! sliding-window inference.

pub mod checkpoint;
pub mod crop;
pub mod forward;
pub mod infer;
pub mod loss;
pub mod train;
pub mod variant;

use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use crop::{crop_resample, CropResult, CropTransform};
pub use forward::{encode_frame, forward_window, FrameEncoding, WindowContext, WindowOutput};
pub use infer::{infer_frames, infer_video, window_indices, VideoPrediction, WindowPlacement};
pub use loss::{frame_loss, sequence_loss, window_loss, SequenceLoss};
pub use train::{train, TrainConfig, TrainOutcome};
pub use variant::{variants, ArchitectureVariant};

use crate::error::{invalid, Result};
use crate::geometry::BoundingBox;
use crate::model::{ModelDims, STRIDE};
use crate::solver::{SolverParams, SolverTrace};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Frames per window `T`.
    pub num_frames: usize,
    /// Inter-frame interval `Δ` of inference windows.
    pub interval: usize,
    pub sd_iters_train: usize,
    pub sd_iters_infer: usize,
    pub crop_scale_train: f64,
    pub crop_scale_infer: f64,
    /// Patch size `[height, width]` fed to the network.
    pub work_resolution: [usize; 2],
    pub window_placement: WindowPlacement,
    /// Registered architecture variant used for training and inference.
    pub variant: String,
    pub step_guard_eps: f64,
    pub model: ModelDims,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            num_frames: 3,
            interval: 15,
            sd_iters_train: 5,
            sd_iters_infer: 15,
            crop_scale_train: 5.0,
            crop_scale_infer: 4.0,
            work_resolution: [64, 64],
            window_placement: WindowPlacement::Centered,
            variant: variant::ITERATIVE.to_string(),
            step_guard_eps: SolverParams::DEFAULT_GUARD,
            model: ModelDims::default(),
            train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_frames < 1 {
            return Err(invalid!("num_frames must be at least 1"));
        }
        if self.interval < 1 {
            return Err(invalid!("interval must be at least 1"));
        }
        for (name, s) in [("crop_scale_train", self.crop_scale_train), ("crop_scale_infer", self.crop_scale_infer)] {
            if !(s >= 1.0 && s.is_finite()) {
                return Err(invalid!("{name} must be at least 1, got {s}"));
            }
        }
        let [h, w] = self.work_resolution;
        if h == 0 || w == 0 || h % STRIDE != 0 || w % STRIDE != 0 {
            return Err(invalid!("work_resolution {h}×{w} must be positive multiples of {STRIDE}"));
        }
        if !(self.step_guard_eps >= 0.0) {
            return Err(invalid!("step_guard_eps must be nonnegative"));
        }
        self.model.validate()?;
        self.train.validate()?;
        variants().get(&self.variant)?;
        Ok(())
    }
}

/// Frames of one video with a box per frame and optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    /// `H×W×3` tensors with values in `[0, 1]`.
    pub frames: Vec<Tensor>,
    pub boxes: Vec<BoundingBox>,
    /// Binary `H×W×1` masks.
    pub gt_masks: Option<Vec<Tensor>>,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.shape()[0], f.shape()[1]))
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size().ok_or_else(|| invalid!("sequence `{}` has no frames", self.id))?;
        if self.boxes.len() != self.frames.len() {
            return Err(invalid!(
                "sequence `{}`: {} frames but {} boxes",
                self.id,
                self.frames.len(),
                self.boxes.len()
            ));
        }
        for (i, (f, b)) in self.frames.iter().zip(&self.boxes).enumerate() {
            if f.shape() != [h, w, 3] {
                return Err(invalid!("sequence `{}` frame {i} is {:?}, expected [{h}, {w}, 3]", self.id, f.shape()));
            }
            b.validate(h, w)?;
        }
        if let Some(masks) = &self.gt_masks {
            if masks.len() != self.frames.len() {
                return Err(invalid!("sequence `{}`: {} masks for {} frames", self.id, masks.len(), self.frames.len()));
            }
            if let Some(i) = masks.iter().position(|m| m.shape() != [h, w, 1]) {
                return Err(invalid!("sequence `{}` mask {i} has shape {:?}", self.id, masks[i].shape()));
            }
        }
        Ok(())
    }

    /// Mirror image of the whole sample.
    pub fn flip_horizontal(&self) -> Result<VideoSample> {
        let w = self.image_size().map_or(0, |s| s.1);
        Ok(VideoSample {
            id: self.id.clone(),
            frames: self.frames.iter().map(Tensor::flip_horizontal).collect::<Result<_>>()?,
            boxes: self.boxes.iter().map(|b| b.flip_horizontal(w)).collect(),
            gt_masks: match &self.gt_masks {
                Some(m) => Some(m.iter().map(Tensor::flip_horizontal).collect::<Result<_>>()?),
                None => None,
            },
        })
    }
}

/// Mask probabilities of one window at patch resolution.
#[derive(Clone, Debug, Default)]
pub struct SegmentationResult {
    pub y: Vec<Tensor>,
    pub y_hat: Vec<Tensor>,
    /// Traces of the initial and the refinement solve; empty when the
    /// variant skips that solve.
    pub traces: (SolverTrace, SolverTrace),
}

impl SegmentationResult {
    pub fn from_output(out: &WindowOutput<'_>) -> Self {
        let probs = |vs: &[crate::autodiff::Var<'_>]| -> Vec<Tensor> {
            vs.iter().map(|v| v.value().map(crate::autodiff::sigmoid)).collect()
        };
        let y = probs(&out.initial);
        let y_hat = out.refined.as_deref().map_or_else(|| y.clone(), probs);
        Self { y, y_hat, traces: out.traces.clone() }
    }
}

/// Runs `f(0..n)` on up to `workers` threads and returns the results in
/// index order.
pub fn parallel_map<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunks: Vec<Vec<(usize, T)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= n {
                            break done;
                        }
                        done.push((i, f(i)));
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    for (i, v) in chunks.into_iter().flatten() {
        slots[i] = Some(v);
    }
    slots.into_iter().map(|s| s.expect("every index computed")).collect()
}
