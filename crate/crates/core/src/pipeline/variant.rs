//! Architecture variants: which of `s` and `m` reach the decoder and
//! whether the refinement pass runs.

use std::sync::OnceLock;

use super::forward::{WindowContext, WindowOutput};
use crate::error::Result;
use crate::registry::Registry;
use crate::solver::SolverTrace;

pub const SINGLE_IMAGE: &str = "single-image";
pub const MULTI_FRAME: &str = "multi-frame";
pub const MULTI_FRAME_PLUS: &str = "multi-frame-plus";
pub const ITERATIVE: &str = "multi-frame-iterative";

pub trait ArchitectureVariant: Send + Sync {
    fn description(&self) -> &'static str;
    fn forward<'t>(&self, ctx: &WindowContext<'_, 't>) -> Result<WindowOutput<'t>>;
}

struct SingleImage;
struct MultiFrame;
struct MultiFramePlus;
struct MultiFrameIterative;

impl ArchitectureVariant for SingleImage {
    fn description(&self) -> &'static str {
        "decode(0, m): aggregation bypassed"
    }

    fn forward<'t>(&self, ctx: &WindowContext<'_, 't>) -> Result<WindowOutput<'t>> {
        let frames = ctx.output_frames().to_vec();
        let initial = ctx.decode(&ctx.zeros(), &ctx.m(), &frames)?;
        Ok(WindowOutput { frames, initial, refined: None, traces: Default::default() })
    }
}

fn aggregated<'t>(ctx: &WindowContext<'_, 't>) -> Result<(Vec<crate::autodiff::Var<'t>>, SolverTrace)> {
    let e: Vec<_> = ctx.encodings().iter().map(|o| o.e).collect();
    let w: Vec<_> = ctx.encodings().iter().map(|o| o.w).collect();
    ctx.aggregate(&e, &w)
}

impl ArchitectureVariant for MultiFrame {
    fn description(&self) -> &'static str {
        "decode(s, 0): aggregated embedding only"
    }

    fn forward<'t>(&self, ctx: &WindowContext<'_, 't>) -> Result<WindowOutput<'t>> {
        let (s, trace) = aggregated(ctx)?;
        let frames = ctx.output_frames().to_vec();
        let initial = ctx.decode(&s, &ctx.zeros(), &frames)?;
        Ok(WindowOutput { frames, initial, refined: None, traces: (trace, SolverTrace::default()) })
    }
}

impl ArchitectureVariant for MultiFramePlus {
    fn description(&self) -> &'static str {
        "decode(s, m): aggregation plus single-frame encoding"
    }

    fn forward<'t>(&self, ctx: &WindowContext<'_, 't>) -> Result<WindowOutput<'t>> {
        let (s, trace) = aggregated(ctx)?;
        let frames = ctx.output_frames().to_vec();
        let initial = ctx.decode(&s, &ctx.m(), &frames)?;
        Ok(WindowOutput { frames, initial, refined: None, traces: (trace, SolverTrace::default()) })
    }
}

impl ArchitectureVariant for MultiFrameIterative {
    fn description(&self) -> &'static str {
        "decode(s, m), then one refinement pass through the secondary encoder"
    }

    fn forward<'t>(&self, ctx: &WindowContext<'_, 't>) -> Result<WindowOutput<'t>> {
        let (s, first) = aggregated(ctx)?;
        let m = ctx.m();
        // Every frame's initial mask feeds the second solve.
        let y = ctx.decode(&s, &m, &ctx.all_frames())?;
        let (e, w) = ctx.refine(&y)?;
        let (s_hat, second) = ctx.aggregate(&e, &w)?;
        let frames = ctx.output_frames().to_vec();
        let refined = ctx.decode(&s_hat, &m, &frames)?;
        let initial = frames.iter().map(|&i| y[i]).collect();
        Ok(WindowOutput { frames, initial, refined: Some(refined), traces: (first, second) })
    }
}

/// The registered variants, in ablation-table order.
pub fn variants() -> &'static Registry<dyn ArchitectureVariant> {
    static REGISTRY: OnceLock<Registry<dyn ArchitectureVariant>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut r: Registry<dyn ArchitectureVariant> = Registry::new("architecture variant");
        r.register(SINGLE_IMAGE, Box::new(SingleImage))
            .register(MULTI_FRAME, Box::new(MultiFrame))
            .register(MULTI_FRAME_PLUS, Box::new(MultiFramePlus))
            .register(ITERATIVE, Box::new(MultiFrameIterative));
        r
    })
}
