//! Random aggregation problems for verification runs.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::FrameObservation;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct InstanceBounds {
    pub max_hw: usize,
    pub max_channels: usize,
    pub kernel_sizes: &'static [usize],
    pub max_frames: usize,
    pub lambda_range: (f64, f64),
}

impl Default for InstanceBounds {
    fn default() -> Self {
        Self {
            max_hw: 6,
            max_channels: 2,
            kernel_sizes: &[1, 3],
            max_frames: 4,
            lambda_range: (0.05, 1.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RandomInstance {
    pub frames: Vec<FrameObservation>,
    pub lambda: f64,
    pub k: usize,
}

impl RandomInstance {
    pub fn unknowns(&self) -> usize {
        let d = self.frames[0].x.shape()[2];
        let c = self.frames[0].e.shape()[2];
        self.k * self.k * d * c
    }
}

/// Features and embeddings are standard normal, weights uniform on [0, 1),
/// λ log-uniform on `lambda_range`; extents uniform up to the bounds.
pub fn random_instance<R: Rng>(rng: &mut R, bounds: &InstanceBounds) -> RandomInstance {
    let h = rng.gen_range(1..=bounds.max_hw);
    let w = rng.gen_range(1..=bounds.max_hw);
    let d = rng.gen_range(1..=bounds.max_channels);
    let c = rng.gen_range(1..=bounds.max_channels);
    let k = bounds.kernel_sizes[rng.gen_range(0..bounds.kernel_sizes.len())];
    let t = rng.gen_range(1..=bounds.max_frames);
    let (lo, hi) = bounds.lambda_range;
    let lambda = (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp();
    let frames = (0..t)
        .map(|_| {
            let x = Tensor::from_fn(&[h, w, d], |_| StandardNormal.sample(rng));
            let e = Tensor::from_fn(&[h, w, c], |_| StandardNormal.sample(rng));
            let wt = Tensor::from_fn(&[h, w, c], |_| rng.gen::<f64>());
            FrameObservation { x, e, w: wt }
        })
        .collect();
    RandomInstance { frames, lambda, k }
}
