//! Skip-connected upsampling decoder from `(s, m)` to full-resolution mask
//! logits.

use super::backbone::FeaturePyramid;
use super::nn::{Bound, Conv, ParamSpec};
use super::ModelDims;
use crate::autodiff::Var;
use crate::error::{shape_err, Result};

#[derive(Clone, Debug)]
struct UpStage {
    conv1: Conv,
    conv2: Conv,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    fuse: Conv,
    stages: [UpStage; 2],
    out: Conv,
}

impl Decoder {
    pub fn new(specs: &mut Vec<ParamSpec>, dims: &ModelDims) -> Self {
        let [d0, d1, d2] = dims.decoder_widths;
        let [c1, c2] = dims.backbone_widths;
        let stage = |specs: &mut Vec<ParamSpec>, name: &str, c_in: usize, c_out: usize| UpStage {
            conv1: Conv::new(specs, &format!("{name}.conv1"), 3, c_in, c_out),
            conv2: Conv::new(specs, &format!("{name}.conv2"), 3, c_out, c_out),
        };
        Self {
            fuse: Conv::new(specs, "decoder.fuse", 3, 2 * dims.embed_dim, d0),
            stages: [
                stage(specs, "decoder.up1", d0 + c2, d1),
                stage(specs, "decoder.up2", d1 + c1, d2),
            ],
            out: Conv::new(specs, "decoder.out", 3, d2, 1),
        }
    }

    /// Logits at the resolution of the pyramid's finest level.
    pub fn decode<'t>(&self, p: &Bound<'t>, s: Var<'t>, m: Var<'t>, pyramid: &FeaturePyramid<'t>) -> Result<Var<'t>> {
        let coarse = pyramid.deepest().shape();
        if s.shape()[..2] != coarse[..2] || m.shape()[..2] != coarse[..2] {
            return Err(shape_err!(
                "decoder inputs {:?} and {:?} must match the coarsest pyramid level {:?}",
                s.shape(),
                m.shape(),
                coarse
            ));
        }
        let mut h = self.fuse.forward(p, Var::concat_channels(&[s, m])?)?.relu()?;
        for (stage, skip) in self.stages.iter().zip([pyramid.levels[1], pyramid.levels[0]]) {
            let up = h.upsample2()?;
            h = stage.conv1.forward(p, Var::concat_channels(&[up, skip])?)?.relu()?;
            h = stage.conv2.forward(p, h)?.relu()?;
        }
        self.out.forward(p, h)
    }
}
