//! Frame-wise object encoders: `B(x, b) → (e, w, m)` and the refinement
//! encoder `B̂(y) → (ê, ŵ)`.

use super::nn::{Bound, Conv, Head, ParamSpec, ResBlock};
use super::{ModelDims, STRIDE};
use crate::autodiff::Var;
use crate::error::{invalid, shape_err, Result};

/// Tolerance on the `[0, 1]` range check of refinement inputs.
pub const PROB_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput<'t> {
    pub e: Var<'t>,
    pub w: Var<'t>,
    pub m: Var<'t>,
}

/// Conv + relu, max-pool and two residual blocks applied to a one-channel
/// full-resolution mask; output at feature resolution.
#[derive(Clone, Debug)]
struct MaskStem {
    conv: Conv,
    blocks: [ResBlock; 2],
}

impl MaskStem {
    fn new(specs: &mut Vec<ParamSpec>, name: &str, width: usize) -> Self {
        Self {
            conv: Conv::new(specs, &format!("{name}.conv"), 3, 1, width),
            blocks: [
                ResBlock::new(specs, &format!("{name}.block1"), width, width),
                ResBlock::new(specs, &format!("{name}.block2"), width, width),
            ],
        }
    }

    fn forward<'t>(&self, p: &Bound<'t>, mask: Var<'t>) -> Result<Var<'t>> {
        // Average pooling to half the feature stride keeps fractional box
        // coverage; the max-pool supplies the remaining factor 2.
        let h = mask.avg_pool(STRIDE / 2)?;
        let h = self.conv.forward(p, h)?.relu()?.max_pool2()?;
        let h = self.blocks[0].forward(p, h)?;
        self.blocks[1].forward(p, h)
    }
}

/// One encoder trunk: mask stem, concat with `x` (optional), residual block
/// to the hidden width.
#[derive(Clone, Debug)]
struct Trunk {
    stem: MaskStem,
    fuse: ResBlock,
    with_features: bool,
}

impl Trunk {
    fn new(specs: &mut Vec<ParamSpec>, name: &str, dims: &ModelDims, with_features: bool) -> Self {
        let stem = MaskStem::new(specs, &format!("{name}.stem"), dims.stem_width);
        let c_in = dims.stem_width + if with_features { dims.feature_dim } else { 0 };
        let fuse = ResBlock::new(specs, &format!("{name}.fuse"), c_in, dims.hidden_dim);
        Self { stem, fuse, with_features }
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, mask: Var<'t>) -> Result<Var<'t>> {
        let h = self.stem.forward(p, mask)?;
        let (xs, hs) = (x.shape(), h.shape());
        if xs[..2] != hs[..2] {
            return Err(shape_err!("mask raster pools to {:?} but features are {:?}", &hs[..2], &xs[..2]));
        }
        let h = if self.with_features { Var::concat_channels(&[h, x])? } else { h };
        self.fuse.forward(p, h)
    }
}

/// `B(x_t, b_t)`: a two-head network producing `(e, w)` and a parallel
/// single-head network producing `m`.
#[derive(Clone, Debug)]
pub struct ObjectEncoder {
    trunk: Trunk,
    e_head: Head,
    w_head: Head,
    m_trunk: Trunk,
    m_head: Head,
}

impl ObjectEncoder {
    pub fn new(specs: &mut Vec<ParamSpec>, dims: &ModelDims) -> Self {
        let (hd, c) = (dims.hidden_dim, dims.embed_dim);
        Self {
            trunk: Trunk::new(specs, "encoder", dims, true),
            e_head: Head::new(specs, "encoder.e_head", hd, hd, c),
            w_head: Head::new(specs, "encoder.w_head", hd, hd, c),
            m_trunk: Trunk::new(specs, "encoder.m", dims, true),
            m_head: Head::new(specs, "encoder.m.head", hd, hd, c),
        }
    }

    /// `x` is the deep feature map; `raster` the full-resolution box mask.
    pub fn encode<'t>(&self, p: &Bound<'t>, x: Var<'t>, raster: Var<'t>) -> Result<EncoderOutput<'t>> {
        let h = self.trunk.forward(p, x, raster)?;
        let e = self.e_head.forward(p, h)?;
        let w = self.w_head.forward(p, h)?;
        let hm = self.m_trunk.forward(p, x, raster)?;
        let m = self.m_head.forward(p, hm)?.relu()?;
        Ok(EncoderOutput { e, w, m })
    }
}

/// `B̂(y_t)`: same mask stem applied to a soft mask, two heads, no `m`.
#[derive(Clone, Debug)]
pub struct RefinementEncoder {
    trunk: Trunk,
    e_head: Head,
    w_head: Head,
}

impl RefinementEncoder {
    pub fn new(specs: &mut Vec<ParamSpec>, dims: &ModelDims) -> Self {
        let (hd, c) = (dims.hidden_dim, dims.embed_dim);
        Self {
            trunk: Trunk::new(specs, "refiner", dims, false),
            e_head: Head::new(specs, "refiner.e_head", hd, hd, c),
            w_head: Head::new(specs, "refiner.w_head", hd, hd, c),
        }
    }

    /// `y` holds full-resolution mask probabilities. `x` fixes the output
    /// resolution and is not otherwise read.
    pub fn encode<'t>(&self, p: &Bound<'t>, x: Var<'t>, y: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let values = y.value();
        if let Some(v) = values
            .data()
            .iter()
            .find(|&&v| !(-PROB_TOLERANCE..=1.0 + PROB_TOLERANCE).contains(&v))
        {
            return Err(invalid!("refinement input {v} outside [0, 1]"));
        }
        let h = self.trunk.forward(p, x, y)?;
        Ok((self.e_head.forward(p, h)?, self.w_head.forward(p, h)?))
    }
}
