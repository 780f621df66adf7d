//! Procedural box-annotated videos: textured shapes moving over a
//! value-noise background, optionally with distractors drawn like the target.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{box_from_mask, BoundingBox};
use crate::pipeline::VideoSample;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    /// Ellipse with a radially perturbed outline.
    Blob,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Trajectory {
    Linear { start: [f64; 2], velocity: [f64; 2] },
    /// Linear drift plus `amplitude · sin(2π t / period)` on each axis.
    Sinusoidal { start: [f64; 2], velocity: [f64; 2], amplitude: [f64; 2], period: f64 },
}

impl Trajectory {
    /// Center `(x, y)` at frame `t`.
    pub fn position(&self, t: usize) -> [f64; 2] {
        let t = t as f64;
        match *self {
            Trajectory::Linear { start, velocity } => [start[0] + velocity[0] * t, start[1] + velocity[1] * t],
            Trajectory::Sinusoidal { start, velocity, amplitude, period } => {
                let s = (2.0 * PI * t / period).sin();
                [
                    start[0] + velocity[0] * t + amplitude[0] * s,
                    start[1] + velocity[1] * t + amplitude[1] * s,
                ]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    /// Half extents `(rx, ry)` in pixels.
    pub radius: [f64; 2],
    pub color: [f64; 3],
    pub texture_amplitude: f64,
    /// Outline perturbation `(a1, φ1, a2, φ2)` of blobs:
    /// `ρ ≤ 1 + a1·sin(2θ + φ1) + a2·cos(3θ + φ2)`.
    pub blob: [f64; 4],
    pub trajectory: Trajectory,
}

impl ObjectSpec {
    /// Largest distance from the center to the outline along either axis.
    fn extent(&self) -> [f64; 2] {
        let k = match self.shape {
            ShapeKind::Blob => 1.0 + self.blob[0].abs() + self.blob[2].abs(),
            _ => 1.0,
        };
        [self.radius[0] * k, self.radius[1] * k]
    }

    fn covers(&self, center: [f64; 2], x: f64, y: f64, grow: f64) -> bool {
        let dx = (x - center[0]) / (self.radius[0] + grow);
        let dy = (y - center[1]) / (self.radius[1] + grow);
        match self.shape {
            ShapeKind::Ellipse => dx * dx + dy * dy <= 1.0,
            ShapeKind::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            ShapeKind::Blob => {
                let theta = dy.atan2(dx);
                let r = 1.0 + self.blob[0] * (2.0 * theta + self.blob[1]).sin() + self.blob[2] * (3.0 * theta + self.blob[3]).cos();
                (dx * dx + dy * dy).sqrt() <= r
            }
        }
    }

    /// Conservative pixel box of the silhouette at frame `t`.
    pub fn bounds(&self, t: usize) -> BoundingBox {
        let c = self.trajectory.position(t);
        let e = self.extent();
        let x0 = (c[0] - e[0]).floor() as i64;
        let y0 = (c[1] - e[1]).floor() as i64;
        let x1 = (c[0] + e[0]).ceil() as i64;
        let y1 = (c[1] + e[1]).ceil() as i64;
        BoundingBox::new(x0, y0, x1 - x0, y1 - y0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub target: ObjectSpec,
    pub distractors: Vec<ObjectSpec>,
    pub background_seed: u64,
    /// Draw distractors in front of the target; occluded target pixels
    /// leave the ground truth.
    pub occlusion: bool,
    /// Blend a one-pixel rim around each shape; the rim is never ground
    /// truth.
    pub antialias: bool,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_frames < 1 {
            return Err(invalid!("scene needs at least one frame"));
        }
        if self.height < 4 || self.width < 4 {
            return Err(invalid!("scene {}×{} is too small", self.height, self.width));
        }
        for obj in std::iter::once(&self.target).chain(&self.distractors) {
            if obj.radius.iter().any(|&r| !(r >= 0.5)) || obj.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(invalid!("invalid object {obj:?}"));
            }
        }
        for t in 0..self.num_frames {
            let c = self.target.trajectory.position(t);
            let e = self.target.extent();
            let inside = c[0] - e[0] >= 1.0
                && c[1] - e[1] >= 1.0
                && c[0] + e[0] <= self.width as f64 - 1.0
                && c[1] + e[1] <= self.height as f64 - 1.0;
            if !inside {
                return Err(invalid!("target leaves the image at frame {t} (center {c:?})"));
            }
        }
        Ok(())
    }
}

/// Smooth lattice noise in `[0, 1]` with cell size `cell` pixels.
struct ValueNoise {
    cell: f64,
    cols: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: f64) -> Self {
        let cols = (w as f64 / cell).ceil() as usize + 2;
        let rows = (h as f64 / cell).ceil() as usize + 2;
        Self { cell, cols, lattice: (0..rows * cols).map(|_| rng.gen::<f64>()).collect() }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = (x.max(0.0) / self.cell, y.max(0.0) / self.cell);
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (fx, fy) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
        let v = |r: usize, c: usize| self.lattice[r * self.cols + c];
        let top = v(iy, ix) * (1.0 - fx) + v(iy, ix + 1) * fx;
        let bottom = v(iy + 1, ix) * (1.0 - fx) + v(iy + 1, ix + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders the scene. `seed` drives the object textures; the background
/// comes from `spec.background_seed`.
pub fn generate_sequence(spec: &SceneSpec, seed: u64, id: &str) -> Result<VideoSample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut bg_rng = ChaCha8Rng::seed_from_u64(spec.background_seed);
    let bg: Vec<(ValueNoise, ValueNoise)> = (0..3)
        .map(|_| (ValueNoise::new(&mut bg_rng, h, w, 24.0), ValueNoise::new(&mut bg_rng, h, w, 6.0)))
        .collect();
    let mut tex_rng = ChaCha8Rng::seed_from_u64(seed);
    let objects: Vec<&ObjectSpec> = std::iter::once(&spec.target).chain(&spec.distractors).collect();
    let textures: Vec<ValueNoise> = objects.iter().map(|_| ValueNoise::new(&mut tex_rng, h, w, 4.0)).collect();
    // Painter's order: index 0 is the target.
    let order: Vec<usize> = if spec.occlusion {
        std::iter::once(0).chain(1..objects.len()).collect()
    } else {
        (1..objects.len()).chain(std::iter::once(0)).collect()
    };

    let mut frames = Vec::with_capacity(spec.num_frames);
    let mut masks = Vec::with_capacity(spec.num_frames);
    let mut boxes = Vec::with_capacity(spec.num_frames);
    for t in 0..spec.num_frames {
        let mut frame = Tensor::zeros(&[h, w, 3]);
        let mut mask = Tensor::zeros(&[h, w, 1]);
        let centers: Vec<[f64; 2]> = objects.iter().map(|o| o.trajectory.position(t)).collect();
        let fd = frame.data_mut();
        for i in 0..h {
            for j in 0..w {
                let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
                let at = (i * w + j) * 3;
                for (ch, (coarse, fine)) in bg.iter().enumerate() {
                    fd[at + ch] = 0.25 + 0.35 * coarse.at(x, y) + 0.15 * fine.at(x, y);
                }
                let mut target_visible = false;
                for &k in &order {
                    let obj = objects[k];
                    let c = centers[k];
                    let solid = obj.covers(c, x, y, 0.0);
                    let rim = spec.antialias && !solid && obj.covers(c, x, y, 1.0);
                    if !(solid || rim) {
                        continue;
                    }
                    // Texture moves with the object.
                    let n = textures[k].at(x - c[0] + w as f64 / 2.0, y - c[1] + h as f64 / 2.0) - 0.5;
                    let alpha = if solid { 1.0 } else { 0.5 };
                    for ch in 0..3 {
                        let v = obj.color[ch] + obj.texture_amplitude * n;
                        fd[at + ch] = alpha * v + (1.0 - alpha) * fd[at + ch];
                    }
                    if solid {
                        target_visible = k == 0;
                    }
                }
                if target_visible {
                    mask.data_mut()[i * w + j] = 1.0;
                }
            }
        }
        for v in fd.iter_mut() {
            *v = quantize(*v);
        }
        let b = box_from_mask(&mask).map_err(|_| invalid!("target fully hidden at frame {t}"))?;
        frames.push(frame);
        masks.push(mask);
        boxes.push(b);
    }
    Ok(VideoSample { id: id.to_string(), frames, boxes, gt_masks: Some(masks) })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    /// One distractor in a clearly different color.
    Easy,
    /// A distractor drawn from the target's distributions whose path
    /// crosses the target's box.
    Hard,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h * 6.0) % 6.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn random_object(rng: &mut ChaCha8Rng, color: [f64; 3], trajectory: Trajectory, radius: [f64; 2]) -> ObjectSpec {
    let shape = [ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Blob][rng.gen_range(0..3)];
    ObjectSpec {
        shape,
        radius,
        color,
        texture_amplitude: 0.12,
        blob: [rng.gen_range(0.05..0.2), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.05..0.15), rng.gen_range(0.0..2.0 * PI)],
        trajectory,
    }
}

/// Draws a scene of the given difficulty. Image size and frame count are
/// fixed by the caller; everything else comes from `rng`.
pub fn random_scene(rng: &mut ChaCha8Rng, difficulty: Difficulty, height: usize, width: usize, num_frames: usize) -> SceneSpec {
    let (hf, wf) = (height as f64, width as f64);
    let scale = hf.min(wf) / 128.0;
    let radius = [rng.gen_range(8.0..15.0) * scale, rng.gen_range(8.0..15.0) * scale];
    let hue = rng.gen::<f64>();
    let color = hsv(hue, rng.gen_range(0.6..0.9), rng.gen_range(0.6..0.95));
    let margin = 1.0 + 1.7 * radius[0].max(radius[1]);
    let span = (num_frames.max(2) - 1) as f64;
    let pick = |rng: &mut ChaCha8Rng, lim: f64| rng.gen_range(margin..(lim - margin).max(margin + 1e-9));
    let start = [pick(rng, wf), pick(rng, hf)];
    let end = [pick(rng, wf), pick(rng, hf)];
    let velocity = [(end[0] - start[0]) / span, (end[1] - start[1]) / span];
    let trajectory = if rng.gen_bool(0.5) {
        Trajectory::Linear { start, velocity }
    } else {
        // Sway kept small enough to stay inside the margin.
        let amp = 0.3 * radius[0].min(radius[1]);
        Trajectory::Sinusoidal { start, velocity, amplitude: [amp, amp], period: rng.gen_range(10.0..30.0) }
    };
    let target = random_object(rng, color, trajectory, radius);

    let distractor = match difficulty {
        Difficulty::Hard => {
            // Drawn from the target's own color distribution, so no color
            // singles out the target within one frame.
            let dcolor = hsv(rng.gen::<f64>(), rng.gen_range(0.6..0.9), rng.gen_range(0.6..0.95));
            // Meet the target's center region mid-sequence, moving fast
            // relative to it.
            let tc = rng.gen_range(num_frames / 4..=(3 * num_frames / 4).max(num_frames / 4));
            let meet = target.trajectory.position(tc);
            let angle = rng.gen_range(0.0..2.0 * PI);
            let speed = rng.gen_range(2.0..3.5) * scale;
            let dv = [velocity[0] + speed * angle.cos(), velocity[1] + speed * angle.sin()];
            let offset = [rng.gen_range(-0.5..0.5) * radius[0], rng.gen_range(-0.5..0.5) * radius[1]];
            let dstart = [meet[0] + offset[0] - dv[0] * tc as f64, meet[1] + offset[1] - dv[1] * tc as f64];
            let dr = [radius[0] * rng.gen_range(0.7..1.1), radius[1] * rng.gen_range(0.7..1.1)];
            random_object(rng, dcolor, Trajectory::Linear { start: dstart, velocity: dv }, dr)
        }
        Difficulty::Easy => {
            let dcolor = hsv((hue + 0.5) % 1.0, 0.8, 0.8);
            let s = [pick(rng, wf), pick(rng, hf)];
            let e = [pick(rng, wf), pick(rng, hf)];
            let dv = [(e[0] - s[0]) / span, (e[1] - s[1]) / span];
            let dr = [radius[0] * 0.8, radius[1] * 0.8];
            random_object(rng, dcolor, Trajectory::Linear { start: s, velocity: dv }, dr)
        }
    };
    SceneSpec {
        height,
        width,
        num_frames,
        target,
        distractors: vec![distractor],
        background_seed: rng.gen(),
        occlusion: false,
        antialias: true,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_sequences: usize,
    pub difficulty: Difficulty,
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { num_sequences: 20, difficulty: Difficulty::Hard, height: 128, width: 128, num_frames: 40, seed: 0 }
    }
}

/// Sequence ids are `seq_00000`, `seq_00001`, ….
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<VideoSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.num_sequences)
        .map(|i| {
            let scene = random_scene(&mut rng, spec.difficulty, spec.height, spec.width, spec.num_frames);
            generate_sequence(&scene, rng.gen(), &format!("seq_{i:05}"))
        })
        .collect()
}
