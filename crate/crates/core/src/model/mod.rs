//! Network components: backbone, object encoders and decoder, plus the
//! scalar regularization parameter of the aggregation layer.

pub mod backbone;
pub mod decoder;
pub mod encoder;
pub mod gradcheck;
pub mod nn;

use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, FeaturePyramid};
pub use decoder::Decoder;
pub use encoder::{EncoderOutput, ObjectEncoder, RefinementEncoder};
pub use nn::{Bound, Init, ParamSpec, ParamStore};

use crate::error::{invalid, Result};
use crate::solver::{inverse_softplus, SolverParams};

/// Spatial stride of the deep feature map relative to the image.
pub const STRIDE: usize = 4;

/// Name of the raw (pre-softplus) regularization parameter.
pub const LAMBDA_PARAM: &str = "aggregation.lambda_raw";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelDims {
    /// Aggregation filter size `K`.
    pub kernel_size: usize,
    /// Embedding channels `C` of `e`, `w`, `m` and `s`.
    pub embed_dim: usize,
    /// Deep feature channels `D`.
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub stem_width: usize,
    /// Channels of the stride-1 and stride-2 backbone stages.
    pub backbone_widths: [usize; 2],
    /// Channels after the fuse conv and after each upsampling stage.
    pub decoder_widths: [usize; 3],
    /// Initial value of the regularization weight.
    pub lambda_init: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            kernel_size: 3,
            embed_dim: 4,
            feature_dim: 32,
            hidden_dim: 32,
            stem_width: 8,
            backbone_widths: [8, 16],
            decoder_widths: [16, 16, 8],
            lambda_init: SolverParams::DEFAULT_LAMBDA,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(invalid!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if !(1..=16).contains(&self.embed_dim) {
            return Err(invalid!("embed_dim must be in 1..=16, got {}", self.embed_dim));
        }
        let widths = [self.feature_dim, self.hidden_dim, self.stem_width]
            .into_iter()
            .chain(self.backbone_widths)
            .chain(self.decoder_widths);
        if widths.into_iter().any(|w| w == 0) {
            return Err(invalid!("layer widths must be positive"));
        }
        if !(self.lambda_init > 0.0 && self.lambda_init.is_finite()) {
            return Err(invalid!("lambda_init must be positive, got {}", self.lambda_init));
        }
        Ok(())
    }
}

/// The full network topology. Weights live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub dims: ModelDims,
    pub backbone: Backbone,
    pub encoder: ObjectEncoder,
    pub refiner: RefinementEncoder,
    pub decoder: Decoder,
    specs: Vec<ParamSpec>,
}

impl Model {
    pub fn new(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let mut specs = Vec::new();
        let backbone = Backbone::new(&mut specs, &dims);
        let encoder = ObjectEncoder::new(&mut specs, &dims);
        let refiner = RefinementEncoder::new(&mut specs, &dims);
        let decoder = Decoder::new(&mut specs, &dims);
        specs.push(ParamSpec {
            name: LAMBDA_PARAM.to_string(),
            shape: vec![],
            init: Init::Const(inverse_softplus(dims.lambda_init)?),
        });
        Ok(Self { dims, backbone, encoder, refiner, decoder, specs })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        use rand::SeedableRng;
        ParamStore::init(&self.specs, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }
}

#[cfg(test)]
mod tests;
