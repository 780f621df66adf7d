//! Sliding-window inference over a whole video.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::crop::{crop_resample, CropTransform};
use super::forward::{encode_frame, FrameEncoding, WindowContext};
use super::variant::ArchitectureVariant;
use super::{parallel_map, PipelineConfig, VideoSample};
use crate::autodiff::{sigmoid, Tape};
use crate::error::{invalid, Result};
use crate::model::{Model, ParamStore};
use crate::solver::SolverTrace;
use crate::tensor::Tensor;

/// Where the target frame sits inside its inference window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowPlacement {
    #[default]
    Centered,
    /// Target is the last frame.
    Trailing,
    /// Target is the first frame.
    Leading,
}

/// Frame indices of the window for target `t` in an `n`-frame video, and
/// the target's position in it. Indices are ascending with spacing
/// `interval`; the target's position is the one nearest the preferred
/// placement among those with the fewest out-of-range indices, and any
/// remaining out-of-range indices are clamped to the sequence ends.
pub fn window_indices(
    t: usize,
    n: usize,
    num_frames: usize,
    interval: usize,
    placement: WindowPlacement,
) -> Result<(Vec<usize>, usize)> {
    if t >= n || num_frames == 0 || interval == 0 {
        return Err(invalid!("no window for frame {t} of {n} (T = {num_frames}, Δ = {interval})"));
    }
    let preferred = match placement {
        WindowPlacement::Centered => (num_frames - 1) / 2,
        WindowPlacement::Trailing => num_frames - 1,
        WindowPlacement::Leading => 0,
    };
    let index = |p: usize, j: usize| t as i64 + (j as i64 - p as i64) * interval as i64;
    let out_of_range = |p: usize| (0..num_frames).filter(|&j| !(0..n as i64).contains(&index(p, j))).count();
    let pos = (0..num_frames)
        .min_by_key(|&p| (out_of_range(p), p.abs_diff(preferred), p))
        .expect("num_frames > 0");
    let indices = (0..num_frames)
        .map(|j| index(pos, j).clamp(0, n as i64 - 1) as usize)
        .collect();
    Ok((indices, pos))
}

/// Per-frame outputs at the source resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoPrediction {
    /// Frame index of each entry below.
    pub frames: Vec<usize>,
    pub probabilities: Vec<Tensor>,
    /// `probabilities > 0.5` as `{0, 1}`.
    pub masks: Vec<Tensor>,
    /// Solver traces of each frame's window.
    pub traces: Vec<(SolverTrace, SolverTrace)>,
}

/// Segments every frame of `sample` from its box. See [`infer_frames`].
pub fn infer_video(
    model: &Model,
    store: &ParamStore,
    sample: &VideoSample,
    cfg: &PipelineConfig,
    variant: &dyn ArchitectureVariant,
    workers: usize,
) -> Result<VideoPrediction> {
    let all: Vec<usize> = (0..sample.len()).collect();
    infer_frames(model, store, sample, cfg, variant, &all, workers)
}

/// Segments the frames `targets` of `sample`. Each target gets its own
/// window; windows are processed independently on up to `workers` threads
/// and the result does not depend on the worker count.
pub fn infer_frames(
    model: &Model,
    store: &ParamStore,
    sample: &VideoSample,
    cfg: &PipelineConfig,
    variant: &dyn ArchitectureVariant,
    targets: &[usize],
    workers: usize,
) -> Result<VideoPrediction> {
    sample.validate()?;
    let n = sample.len();
    let windows: Vec<(Vec<usize>, usize)> = targets
        .iter()
        .map(|&t| window_indices(t, n, cfg.num_frames, cfg.interval, cfg.window_placement))
        .collect::<Result<_>>()?;
    let needed: BTreeSet<usize> = windows.iter().flat_map(|(idx, _)| idx.iter().copied()).chain(targets.iter().copied()).collect();
    let needed: Vec<usize> = needed.into_iter().collect();

    let [oh, ow] = cfg.work_resolution;
    let encoded: Vec<(FrameEncoding, CropTransform)> = parallel_map(needed.len(), workers, |k| {
        let i = needed[k];
        let crop = crop_resample(&sample.frames[i], None, &sample.boxes[i], cfg.crop_scale_infer, oh, ow)?;
        Ok((encode_frame(model, store, &crop.patch, &crop.patch_box)?, crop.transform))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let slot: HashMap<usize, usize> = needed.iter().enumerate().map(|(k, &i)| (i, k)).collect();

    let results: Vec<(Tensor, (SolverTrace, SolverTrace))> = parallel_map(targets.len(), workers, |j| {
        let (indices, pos) = &windows[j];
        let frames: Vec<&FrameEncoding> = indices.iter().map(|i| &encoded[slot[i]].0).collect();
        let tape = Tape::new();
        let params = store.bind_frozen(&tape);
        let ctx = WindowContext::from_encodings(
            model,
            &params,
            &tape,
            &frames,
            vec![*pos],
            cfg.sd_iters_infer,
            cfg.step_guard_eps,
        )?;
        let out = variant.forward(&ctx)?;
        let probs = out.final_logits()[0].value().map(sigmoid);
        Ok((encoded[slot[&targets[j]]].1.paste_back(&probs)?, out.traces))
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let (probabilities, traces): (Vec<Tensor>, Vec<_>) = results.into_iter().unzip();
    let masks = probabilities.iter().map(|p| p.map(|v| if v > 0.5 { 1.0 } else { 0.0 })).collect();
    Ok(VideoPrediction { frames: targets.to_vec(), probabilities, masks, traces })
}
