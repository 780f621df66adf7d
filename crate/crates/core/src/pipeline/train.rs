//! Seeded training loop: window sampling, loss, momentum SGD with step
//! decay, metrics log and periodic checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RUN_SUBDIR};
use super::crop::crop_resample;
use super::forward::forward_window;
use super::loss::window_loss;
use super::{variants, PipelineConfig, VideoSample};
use crate::autodiff::{softplus, Tape};
use crate::error::{invalid, Error, Result};
use crate::geometry::{box_from_mask, BoundingBox};
use crate::model::{Model, ParamStore, LAMBDA_PARAM};
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Divisor applied to the learning rate at each milestone.
    pub lr_decay: f64,
    /// Milestones as fractions of `iterations`.
    pub lr_milestones: Vec<f64>,
    /// Frames of one training window are drawn from a span this long.
    pub sample_window: usize,
    pub flip_prob: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 6000,
            learning_rate: 0.01,
            momentum: 0.9,
            lr_decay: 5.0,
            lr_milestones: vec![0.375, 0.75],
            sample_window: 100,
            flip_prob: 0.5,
            grad_clip: Some(10.0),
            checkpoint_every: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid!("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid!("momentum must be in [0, 1)"));
        }
        if !(self.lr_decay >= 1.0) {
            return Err(invalid!("lr_decay must be at least 1"));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(invalid!("lr_milestones must lie in [0, 1]"));
        }
        if self.sample_window < 1 {
            return Err(invalid!("sample_window must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(invalid!("flip_prob must be a probability"));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(invalid!("grad_clip must be positive"));
        }
        Ok(())
    }

    /// Learning rate in effect at zero-based iteration `iter`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let passed = self
            .lr_milestones
            .iter()
            .filter(|&&m| iter >= (m * self.iterations as f64).floor() as usize)
            .count();
        self.learning_rate / self.lr_decay.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub loss: f64,
    pub lambda: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: Vec<LogRecord>,
    pub checkpoint: Option<PathBuf>,
}

/// One training window at patch resolution.
#[derive(Clone, Debug)]
pub struct TrainingWindow {
    pub patches: Vec<Tensor>,
    pub boxes: Vec<BoundingBox>,
    pub masks: Vec<Tensor>,
}

/// Draws a sequence, `T` sorted frames within a `sample_window` span, an
/// optional horizontal flip, and crops around the ground-truth boxes.
pub fn sample_window(dataset: &[VideoSample], cfg: &PipelineConfig, rng: &mut ChaCha8Rng) -> Result<TrainingWindow> {
    let seq = &dataset[rng.gen_range(0..dataset.len())];
    let masks = seq
        .gt_masks
        .as_ref()
        .ok_or_else(|| invalid!("training sequence `{}` has no ground-truth masks", seq.id))?;
    let n = seq.len();
    let t = cfg.num_frames;
    let span = cfg.train.sample_window.min(n);
    let start = rng.gen_range(0..=n - span);
    let mut picks: Vec<usize> = if span >= t {
        sample_indices(rng, span, t).into_iter().map(|i| start + i).collect()
    } else {
        (0..t).map(|_| start + rng.gen_range(0..span)).collect()
    };
    picks.sort_unstable();
    let flip = rng.gen_bool(cfg.train.flip_prob);
    let [oh, ow] = cfg.work_resolution;

    let mut window = TrainingWindow { patches: Vec::new(), boxes: Vec::new(), masks: Vec::new() };
    for i in picks {
        let (frame, mask) = if flip {
            (seq.frames[i].flip_horizontal()?, masks[i].flip_horizontal()?)
        } else {
            (seq.frames[i].clone(), masks[i].clone())
        };
        let b = box_from_mask(&mask).map_err(|_| Error::Data(format!("sequence `{}` frame {i} has an empty mask", seq.id)))?;
        let crop = crop_resample(&frame, Some(&mask), &b, cfg.crop_scale_train, oh, ow)?;
        window.patches.push(crop.patch);
        window.boxes.push(crop.patch_box);
        window.masks.push(crop.patch_mask.expect("mask was supplied"));
    }
    Ok(window)
}

/// Loss and gradients of one window.
pub fn window_gradients(
    model: &Model,
    params: &ParamStore,
    window: &TrainingWindow,
    cfg: &PipelineConfig,
) -> Result<(f64, ParamStore)> {
    let variant = variants().get(&cfg.variant)?;
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = forward_window(
        model,
        &bound,
        &tape,
        &window.patches,
        &window.boxes,
        cfg.sd_iters_train,
        cfg.step_guard_eps,
        variant,
    )?;
    let loss = window_loss(&out, &window.masks)?;
    let grads = tape.backward(loss)?;
    let mut out = ParamStore::new();
    for (name, var) in bound.iter() {
        out.insert(name.clone(), grads.wrt(*var));
    }
    Ok((loss.item(), out))
}

/// Trains from `init` (or a fresh seeded initialization). With `out_dir`,
/// appends one metrics record per iteration to `metrics.jsonl` and writes
/// the checkpoint to `out_dir/checkpoint` every `checkpoint_every`
/// iterations and at the end.
pub fn train(
    dataset: &[VideoSample],
    cfg: &PipelineConfig,
    init: Option<ParamStore>,
    out_dir: Option<&Path>,
    on_log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(invalid!("training set is empty"));
    }
    for s in dataset {
        s.validate()?;
        if s.gt_masks.is_none() {
            return Err(invalid!("training sequence `{}` has no ground-truth masks", s.id));
        }
    }
    let model = Model::new(cfg.model.clone())?;
    let mut params = match init {
        Some(p) => {
            p.validate(model.specs())?;
            p
        }
        None => model.init_params(cfg.train.seed),
    };
    let mut velocity = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x5eed_0f_da7a);

    let mut metrics = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            Some((fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let ckpt_path = out_dir.map(|d| d.join(RUN_SUBDIR));
    let save = |params: &ParamStore, iteration: usize| -> Result<()> {
        if let Some(path) = &ckpt_path {
            Checkpoint { config: cfg.clone(), params: params.clone(), iteration }.save(path)?;
        }
        Ok(())
    };

    let mut log = Vec::with_capacity(cfg.train.iterations);
    for iter in 0..cfg.train.iterations {
        let window = sample_window(dataset, cfg, &mut rng)?;
        let (loss, mut grads) = window_gradients(&model, &params, &window, cfg).map_err(|e| match e {
            Error::NonFinite(op) => Error::NonFinite(format!("{op} at training iteration {iter}")),
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at training iteration {iter}")));
        }
        if let Some(clip) = cfg.train.grad_clip {
            let norm = grads.iter().map(|(_, g)| g.sum_squares()).sum::<f64>().sqrt();
            if norm > clip {
                let names: Vec<String> = grads.names().map(str::to_string).collect();
                for name in names {
                    let g = grads.get_mut(&name)?;
                    *g = g.scale(clip / norm);
                }
            }
        }
        let lr = cfg.train.lr_at(iter);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in &names {
            let g = grads.get(name)?;
            let v = velocity.get_mut(name)?;
            *v = v.scale(cfg.train.momentum);
            v.axpy(1.0, g)?;
            params.get_mut(name)?.axpy(-lr, v)?;
        }
        let record = LogRecord {
            iter,
            loss,
            lambda: softplus(params.get(LAMBDA_PARAM)?.item()?),
            lr,
        };
        if let Some((file, path)) = metrics.as_mut() {
            let mut line = serde_json::to_vec(&record)?;
            line.push(b'\n');
            file.write_all(&line).map_err(|e| Error::io(&*path, e))?;
        }
        on_log(&record);
        log.push(record);
        let done = iter + 1;
        if cfg.train.checkpoint_every > 0 && done % cfg.train.checkpoint_every == 0 && done < cfg.train.iterations {
            save(&params, done)?;
        }
    }
    save(&params, cfg.train.iterations)?;
    Ok(TrainOutcome { params, log, checkpoint: ckpt_path })
}
