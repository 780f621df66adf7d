//! Small trainable feature extractor standing in for a pretrained backbone.

use super::nn::{Bound, Conv, ParamSpec};
use super::ModelDims;
use crate::autodiff::Var;
use crate::error::{shape_err, Result};

/// Backbone taps at strides 1, 2 and 4. The last level is the deep
/// feature map `x` used by the encoders and the aggregation layer.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid<'t> {
    pub levels: [Var<'t>; 3],
}

impl<'t> FeaturePyramid<'t> {
    pub fn deepest(&self) -> Var<'t> {
        self.levels[2]
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    stages: [Conv; 3],
}

impl Backbone {
    pub fn new(specs: &mut Vec<ParamSpec>, dims: &ModelDims) -> Self {
        let [c1, c2] = dims.backbone_widths;
        Self {
            stages: [
                Conv::new(specs, "backbone.stage1", 3, 3, c1),
                Conv::new(specs, "backbone.stage2", 3, c1, c2),
                Conv::new(specs, "backbone.stage3", 3, c2, dims.feature_dim),
            ],
        }
    }

    /// `image` is `H×W×3` with values in `[0, 1]`; `H` and `W` must be
    /// multiples of 4.
    pub fn forward<'t>(&self, p: &Bound<'t>, image: Var<'t>) -> Result<FeaturePyramid<'t>> {
        let shape = image.shape();
        if shape.len() != 3 || shape[2] != 3 || shape[0] % 4 != 0 || shape[1] % 4 != 0 || shape[0] == 0 || shape[1] == 0 {
            return Err(shape_err!("backbone expects an H×W×3 image with H, W multiples of 4, got {shape:?}"));
        }
        let t1 = self.stages[0].forward(p, image.add_const(-0.5)?)?.relu()?;
        let t2 = self.stages[1].forward(p, t1.max_pool2()?)?.relu()?;
        let t3 = self.stages[2].forward(p, t2.max_pool2()?)?.relu()?;
        Ok(FeaturePyramid { levels: [t1, t2, t3] })
    }
}
