//! The window forward pass: per-frame encoding, aggregation and decoding
//! stages that architecture variants compose.

use super::variant::ArchitectureVariant;
use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::geometry::{rasterize_box, BoundingBox};
use crate::model::{Bound, EncoderOutput, FeaturePyramid, Model, ParamStore, LAMBDA_PARAM};
use crate::solver::{solve_taped, FrameVars, SolverTrace};
use crate::tensor::Tensor;

/// Backbone taps and encoder outputs of one patch, detached from any tape.
#[derive(Clone, Debug)]
pub struct FrameEncoding {
    pub pyramid: [Tensor; 3],
    pub e: Tensor,
    pub w: Tensor,
    pub m: Tensor,
}

/// Runs backbone and object encoder on one patch with frozen weights.
pub fn encode_frame(model: &Model, store: &ParamStore, patch: &Tensor, b: &BoundingBox) -> Result<FrameEncoding> {
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let (pyr, enc) = encode_on_tape(model, &p, &tape, patch, b)?;
    Ok(FrameEncoding {
        pyramid: pyr.levels.map(|v| (*v.value()).clone()),
        e: (*enc.e.value()).clone(),
        w: (*enc.w.value()).clone(),
        m: (*enc.m.value()).clone(),
    })
}

fn encode_on_tape<'t>(
    model: &Model,
    p: &Bound<'t>,
    tape: &'t Tape,
    patch: &Tensor,
    b: &BoundingBox,
) -> Result<(FeaturePyramid<'t>, EncoderOutput<'t>)> {
    let (h, w, _) = patch.hwc()?;
    let pyr = model.backbone.forward(p, tape.constant(patch.clone()))?;
    let raster = tape.constant(rasterize_box(b, h, w)?);
    let enc = model.encoder.encode(p, pyr.deepest(), raster)?;
    Ok((pyr, enc))
}

/// Everything a variant needs to run one window: encoded frames plus the
/// aggregation, decoding and refinement stages.
pub struct WindowContext<'a, 't> {
    model: &'a Model,
    params: &'a Bound<'t>,
    tape: &'t Tape,
    pyramids: Vec<FeaturePyramid<'t>>,
    encodings: Vec<EncoderOutput<'t>>,
    outputs: Vec<usize>,
    sd_iters: usize,
    step_guard_eps: f64,
}

impl<'a, 't> WindowContext<'a, 't> {
    /// Encodes `patches` on `tape` so gradients reach every weight.
    pub fn from_patches(
        model: &'a Model,
        params: &'a Bound<'t>,
        tape: &'t Tape,
        patches: &[Tensor],
        boxes: &[BoundingBox],
        sd_iters: usize,
        step_guard_eps: f64,
    ) -> Result<Self> {
        if patches.is_empty() || patches.len() != boxes.len() {
            return Err(invalid!("window needs one box per patch and at least one patch"));
        }
        let mut pyramids = Vec::with_capacity(patches.len());
        let mut encodings = Vec::with_capacity(patches.len());
        for (patch, b) in patches.iter().zip(boxes) {
            let (pyr, enc) = encode_on_tape(model, params, tape, patch, b)?;
            pyramids.push(pyr);
            encodings.push(enc);
        }
        let outputs = (0..patches.len()).collect();
        Ok(Self { model, params, tape, pyramids, encodings, outputs, sd_iters, step_guard_eps })
    }

    /// Builds a window from cached encodings. Only `outputs` receive a
    /// final prediction.
    pub fn from_encodings(
        model: &'a Model,
        params: &'a Bound<'t>,
        tape: &'t Tape,
        frames: &[&FrameEncoding],
        outputs: Vec<usize>,
        sd_iters: usize,
        step_guard_eps: f64,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(invalid!("window needs at least one frame"));
        }
        if outputs.is_empty() || outputs.iter().any(|&i| i >= frames.len()) {
            return Err(invalid!("output positions {outputs:?} outside a {}-frame window", frames.len()));
        }
        let c = |t: &Tensor| tape.constant(t.clone());
        let pyramids = frames
            .iter()
            .map(|f| FeaturePyramid { levels: [c(&f.pyramid[0]), c(&f.pyramid[1]), c(&f.pyramid[2])] })
            .collect();
        let encodings = frames.iter().map(|f| EncoderOutput { e: c(&f.e), w: c(&f.w), m: c(&f.m) }).collect();
        Ok(Self { model, params, tape, pyramids, encodings, outputs, sd_iters, step_guard_eps })
    }

    pub fn len(&self) -> usize {
        self.pyramids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pyramids.is_empty()
    }

    pub fn all_frames(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Window positions whose final prediction is requested.
    pub fn output_frames(&self) -> &[usize] {
        &self.outputs
    }

    pub fn encodings(&self) -> &[EncoderOutput<'t>] {
        &self.encodings
    }

    pub fn m(&self) -> Vec<Var<'t>> {
        self.encodings.iter().map(|o| o.m).collect()
    }

    /// Zero embeddings standing in for a bypassed input.
    pub fn zeros(&self) -> Vec<Var<'t>> {
        self.encodings.iter().map(|o| self.tape.constant(Tensor::zeros(&o.e.shape()))).collect()
    }

    /// Fits `z` to `{(x_t, e_t, w_t)}` and returns `s_t = x_t ∗ z` for every
    /// frame.
    pub fn aggregate(&self, e: &[Var<'t>], w: &[Var<'t>]) -> Result<(Vec<Var<'t>>, SolverTrace)> {
        let frames: Vec<FrameVars<'t>> = self
            .pyramids
            .iter()
            .zip(e.iter().zip(w))
            .map(|(p, (&e, &w))| FrameVars { x: p.deepest(), e, w })
            .collect();
        let lambda = self.params.get(LAMBDA_PARAM)?.softplus()?;
        let (z, trace) = solve_taped(&frames, lambda, self.model.dims.kernel_size, self.sd_iters, self.step_guard_eps)?;
        let s = self.pyramids.iter().map(|p| p.deepest().conv2d(z)).collect::<Result<_>>()?;
        Ok((s, trace))
    }

    /// Logits for the window positions in `frames`.
    pub fn decode(&self, s: &[Var<'t>], m: &[Var<'t>], frames: &[usize]) -> Result<Vec<Var<'t>>> {
        frames
            .iter()
            .map(|&i| self.model.decoder.decode(self.params, s[i], m[i], &self.pyramids[i]))
            .collect()
    }

    /// `(ê_t, ŵ_t)` from the sigmoid of every frame's logits.
    pub fn refine(&self, logits: &[Var<'t>]) -> Result<(Vec<Var<'t>>, Vec<Var<'t>>)> {
        let mut e = Vec::with_capacity(logits.len());
        let mut w = Vec::with_capacity(logits.len());
        for (l, p) in logits.iter().zip(&self.pyramids) {
            let (ei, wi) = self.model.refiner.encode(self.params, p.deepest(), l.sigmoid()?)?;
            e.push(ei);
            w.push(wi);
        }
        Ok((e, w))
    }
}

/// Logits produced by a variant for `frames` (window positions).
pub struct WindowOutput<'t> {
    pub frames: Vec<usize>,
    pub initial: Vec<Var<'t>>,
    pub refined: Option<Vec<Var<'t>>>,
    pub traces: (SolverTrace, SolverTrace),
}

impl<'t> WindowOutput<'t> {
    /// Refined logits when present, otherwise the initial ones.
    pub fn final_logits(&self) -> &[Var<'t>] {
        self.refined.as_deref().unwrap_or(&self.initial)
    }
}

/// Encodes `patches` on `tape` and runs `variant` over the window.
pub fn forward_window<'t>(
    model: &Model,
    params: &Bound<'t>,
    tape: &'t Tape,
    patches: &[Tensor],
    boxes: &[BoundingBox],
    sd_iters: usize,
    step_guard_eps: f64,
    variant: &dyn ArchitectureVariant,
) -> Result<WindowOutput<'t>> {
    let ctx = WindowContext::from_patches(model, params, tape, patches, boxes, sd_iters, step_guard_eps)?;
    variant.forward(&ctx)
}
