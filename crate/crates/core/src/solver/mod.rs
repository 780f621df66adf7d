//! Spatio-temporal aggregation: fit one convolution filter `z` jointly over
//! all frames of a window,
//!
//! ```text
//! z* = argmin_z (1/T) Σ_t ‖w_t ⊙ (x_t ∗ z − e_t)‖² + λ‖z‖²
//! ```
//!
//! by a fixed number of steepest-descent steps with exact line search,
//! starting from `z = 0`. [`solve_taped`] records every step on the tape so
//! `z*` is differentiable in all `x_t`, `e_t`, `w_t` and in `λ`. The plain
//! functions ([`objective`], [`gradient`], [`hessian_apply`], [`sd_step`])
//! evaluate the same quantities on values and back the tests and
//! diagnostics. [`dense_oracle_solve`] solves the normal equations directly.

pub mod instances;
pub mod oracle;

use std::cmp::Ordering;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::tensor::conv::{conv2d, conv2d_kernel_grad, kernel_dims};
use crate::tensor::Tensor;

pub use oracle::{dense_oracle_solve, MAX_ORACLE_UNKNOWNS};

/// Per-frame input of the aggregation problem.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameObservation {
    /// `H×W×D` deep features.
    pub x: Tensor,
    /// `H×W×C` object embedding.
    pub e: Tensor,
    /// `H×W×C` confidence weights.
    pub w: Tensor,
}

impl FrameObservation {
    pub fn new(x: Tensor, e: Tensor, w: Tensor) -> Result<Self> {
        check_frame(&x, &e, &w)?;
        Ok(Self { x, e, w })
    }
}

fn check_frame(x: &Tensor, e: &Tensor, w: &Tensor) -> Result<()> {
    let (h, wd, _) = x.hwc()?;
    let (eh, ew, ec) = e.hwc()?;
    if (eh, ew) != (h, wd) {
        return Err(shape_err!("features {:?} vs embedding {:?}", x.shape(), e.shape()));
    }
    if w.shape() != [eh, ew, ec] {
        return Err(shape_err!("embedding {:?} vs weights {:?}", e.shape(), w.shape()));
    }
    if !(x.is_finite() && e.is_finite() && w.is_finite()) {
        return Err(invalid!("non-finite frame observation"));
    }
    Ok(())
}

/// The object representation: a `K×K×D×C` filter.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterZ {
    kernel: Tensor,
}

impl FilterZ {
    pub fn new(kernel: Tensor) -> Result<Self> {
        kernel_dims(&kernel)?;
        if !kernel.is_finite() {
            return Err(invalid!("non-finite filter"));
        }
        Ok(Self { kernel })
    }

    pub fn zeros(k: usize, d: usize, c: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[k, k, d, c]))
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn into_tensor(self) -> Tensor {
        self.kernel
    }

    pub fn size(&self) -> usize {
        self.kernel.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    pub num_iterations: usize,
    /// Unconstrained parameter; the regularization weight is its softplus.
    pub lambda_raw: f64,
    pub step_guard_eps: f64,
}

impl SolverParams {
    pub const DEFAULT_LAMBDA: f64 = 0.05;
    pub const DEFAULT_GUARD: f64 = 1e-12;

    pub fn with_lambda(num_iterations: usize, lambda: f64) -> Result<Self> {
        Ok(Self {
            num_iterations,
            lambda_raw: inverse_softplus(lambda)?,
            step_guard_eps: Self::DEFAULT_GUARD,
        })
    }

    pub fn lambda(&self) -> f64 {
        softplus(self.lambda_raw)
    }
}

pub fn inverse_softplus(lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(invalid!("regularization weight must be positive, got {lambda}"));
    }
    // ln(e^λ - 1), written to stay accurate for large λ.
    Ok(lambda + (-(-lambda).exp_m1()).ln())
}

/// Diagnostics of one solve: the objective at the initial point and after
/// each step, and each step length.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub objectives: Vec<f64>,
    pub alphas: Vec<f64>,
    #[serde(skip)]
    pub grad_norms: Vec<f64>,
    /// Decrease predicted by the quadratic model, `‖g‖⁴ / (2⟨g,Hg⟩)`.
    #[serde(skip)]
    pub predicted_decrease: Vec<f64>,
}

/// Slack for evaluation round-off when comparing consecutive objectives.
pub const MONOTONE_RTOL: f64 = 1e-13;

impl SolverTrace {
    /// Objective never increases beyond round-off.
    pub fn is_monotone(&self) -> bool {
        self.objectives
            .windows(2)
            .all(|w| w[1] <= w[0] + MONOTONE_RTOL * w[0].abs())
    }

    /// Strict decrease on every step taken with `‖g‖ > grad_floor`, except
    /// where the predicted decrease is below evaluation round-off.
    pub fn is_strictly_decreasing(&self, grad_floor: f64) -> bool {
        self.objectives.windows(2).enumerate().all(|(k, w)| {
            let resolvable = self.predicted_decrease.get(k).copied().unwrap_or(0.0)
                > MONOTONE_RTOL * w[0].abs();
            let g = self.grad_norms.get(k).copied().unwrap_or(0.0);
            !(g > grad_floor && resolvable) || w[1] < w[0]
        })
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.objectives.last().copied()
    }
}

static SOLVES: AtomicUsize = AtomicUsize::new(0);
static NON_MONOTONE: AtomicUsize = AtomicUsize::new(0);

/// Gradient norm below which a step no longer has to decrease the objective.
pub const STRICT_GRAD_FLOOR: f64 = 1e-10;

/// `(solves run, solves whose trace increased, or stalled while
/// ‖g‖ > STRICT_GRAD_FLOOR)` in this process.
pub fn solver_stats() -> (usize, usize) {
    (SOLVES.load(AtomicOrdering::Relaxed), NON_MONOTONE.load(AtomicOrdering::Relaxed))
}

struct FrameRef<'a> {
    x: &'a Tensor,
    e: &'a Tensor,
    w: &'a Tensor,
}

fn check_frames(frames: &[FrameRef<'_>]) -> Result<(usize, usize)> {
    let first = frames.first().ok_or_else(|| invalid!("aggregation needs at least one frame"))?;
    let d = first.x.hwc()?.2;
    let c = first.e.hwc()?.2;
    for f in frames {
        check_frame(f.x, f.e, f.w)?;
        if f.x.hwc()?.2 != d || f.e.hwc()?.2 != c {
            return Err(shape_err!("frames disagree on channel counts"));
        }
    }
    Ok((d, c))
}

fn check_filter(z: &Tensor, d: usize, c: usize) -> Result<usize> {
    let (k, zd, zc) = kernel_dims(z)?;
    if (zd, zc) != (d, c) {
        return Err(shape_err!("filter {:?} for D={d}, C={c}", z.shape()));
    }
    Ok(k)
}

fn refs(frames: &[FrameObservation]) -> Vec<FrameRef<'_>> {
    frames.iter().map(|f| FrameRef { x: &f.x, e: &f.e, w: &f.w }).collect()
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

/// Order in which per-frame terms are reduced: sorted by frame content, so
/// the result does not depend on how the caller listed the frames.
fn canonical_order(frames: &[FrameRef<'_>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (&frames[a], &frames[b]);
        lexicographic(fa.x.data(), fb.x.data())
            .then_with(|| lexicographic(fa.e.data(), fb.e.data()))
            .then_with(|| lexicographic(fa.w.data(), fb.w.data()))
    });
    order
}

fn objective_refs(z: &Tensor, frames: &[FrameRef<'_>], lambda: f64) -> Result<f64> {
    let (d, c) = check_frames(frames)?;
    check_filter(z, d, c)?;
    let mut total = 0.0;
    for t in canonical_order(frames) {
        let f = &frames[t];
        let r = conv2d(f.x, z)?.sub(f.e)?.mul(f.w)?;
        total += r.sum_squares();
    }
    Ok(total / frames.len() as f64 + lambda * z.sum_squares())
}

/// `(2/T) Σ_t κ(x_t, w_t² ⊙ (x_t ∗ v − shift_t)) + 2λv`, where κ is the
/// kernel adjoint of the convolution.
fn normal_apply(v: &Tensor, frames: &[FrameRef<'_>], lambda: f64, with_rhs: bool) -> Result<Tensor> {
    let (d, c) = check_frames(frames)?;
    let k = check_filter(v, d, c)?;
    let mut acc = Tensor::zeros(v.shape());
    for t in canonical_order(frames) {
        let f = &frames[t];
        let mut r = conv2d(f.x, v)?;
        if with_rhs {
            r = r.sub(f.e)?;
        }
        let r = r.mul(f.w)?.mul(f.w)?;
        acc.axpy(1.0, &conv2d_kernel_grad(f.x, &r, k)?)?;
    }
    let mut out = acc.scale(2.0 / frames.len() as f64);
    out.axpy(2.0 * lambda, v)?;
    Ok(out)
}

pub fn objective(z: &FilterZ, frames: &[FrameObservation], lambda: f64) -> Result<f64> {
    objective_refs(&z.kernel, &refs(frames), lambda)
}

/// Exact gradient of [`objective`] with respect to `z`.
pub fn gradient(z: &FilterZ, frames: &[FrameObservation], lambda: f64) -> Result<Tensor> {
    normal_apply(&z.kernel, &refs(frames), lambda, true)
}

/// The objective's (constant) Hessian applied to a filter-shaped `u`.
pub fn hessian_apply(u: &Tensor, frames: &[FrameObservation], lambda: f64) -> Result<Tensor> {
    normal_apply(u, &refs(frames), lambda, false)
}

/// One steepest-descent step with exact line search. Returns the new filter
/// and the step length; the step is skipped (`α = 0`) when the curvature
/// along the gradient is not resolvable.
pub fn sd_step(z: &FilterZ, frames: &[FrameObservation], lambda: f64, step_guard_eps: f64) -> Result<(FilterZ, f64)> {
    let g = gradient(z, frames, lambda)?;
    let hg = hessian_apply(&g, frames, lambda)?;
    let gg = g.sum_squares();
    let ghg = g.dot(&hg)?;
    if ghg <= step_guard_eps * gg {
        return Ok((z.clone(), 0.0));
    }
    let alpha = gg / ghg;
    let mut next = z.kernel.clone();
    next.axpy(-alpha, &g)?;
    Ok((FilterZ::new(next)?, alpha))
}

/// Output of the aggregation layer for one frame: `x ∗ z`.
pub fn apply_filter(x: &Tensor, z: &FilterZ) -> Result<Tensor> {
    conv2d(x, &z.kernel)
}

/// Frame triple recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FrameVars<'t> {
    pub x: Var<'t>,
    pub e: Var<'t>,
    pub w: Var<'t>,
}

/// Unrolled solve on the tape. `lambda` is the (positive) regularization
/// weight var; the caller derives it from the raw parameter.
pub fn solve_taped<'t>(
    frames: &[FrameVars<'t>],
    lambda: Var<'t>,
    k: usize,
    num_iterations: usize,
    step_guard_eps: f64,
) -> Result<(Var<'t>, SolverTrace)> {
    let values: Vec<_> = frames.iter().map(|f| (f.x.value(), f.e.value(), f.w.value())).collect();
    let frame_refs: Vec<FrameRef<'_>> = values
        .iter()
        .map(|(x, e, w)| FrameRef { x, e, w })
        .collect();
    let (d, c) = check_frames(&frame_refs)?;
    if k % 2 == 0 {
        return Err(invalid!("kernel size must be odd, got {k}"));
    }
    let lambda_value = lambda.item();
    if !(lambda_value > 0.0) {
        return Err(invalid!("regularization weight must be positive, got {lambda_value}"));
    }
    let order = canonical_order(&frame_refs);
    let tape: &'t Tape = lambda.tape();
    let scale = 2.0 / frames.len() as f64;

    let w2: Vec<Var<'t>> = frames.iter().map(|f| f.w.mul(f.w)).collect::<Result<_>>()?;
    let two_lambda = lambda.scale(2.0)?;

    // Residuals r_t = x_t ∗ z − e_t are updated alongside z by linearity:
    // z ← z − αg gives r_t ← r_t − α(x_t ∗ g).
    let mut z = tape.constant(Tensor::zeros(&[k, k, d, c]));
    let mut r: Vec<Var<'t>> = frames.iter().map(|f| f.e.neg()).collect::<Result<_>>()?;
    let data_term = |r: &[Var<'t>]| -> Result<f64> {
        let mut total = 0.0;
        for &t in &order {
            let rv = r[t].value();
            total += rv.mul(&w2[t].value())?.dot(&rv)?;
        }
        Ok(total / frames.len() as f64)
    };
    let mut trace = SolverTrace::default();
    trace.objectives.push(data_term(&r)?);

    for _ in 0..num_iterations {
        let mut acc: Option<Var<'t>> = None;
        for &t in &order {
            let term = frames[t].x.conv2d_kernel_grad(r[t].mul(w2[t])?, k)?;
            acc = Some(match acc {
                Some(a) => a.add(term)?,
                None => term,
            });
        }
        let g = acc.expect("nonempty").scale(scale)?.add(z.scale_by(two_lambda)?)?;

        // ⟨g, Hg⟩ = (2/T) Σ_t ‖w_t ⊙ (x_t ∗ g)‖² + 2λ‖g‖².
        let q: Vec<Var<'t>> = frames.iter().map(|f| f.x.conv2d(g)).collect::<Result<_>>()?;
        let mut curv: Option<Var<'t>> = None;
        for &t in &order {
            let term = q[t].mul(w2[t])?.dot(q[t])?;
            curv = Some(match curv {
                Some(a) => a.add(term)?,
                None => term,
            });
        }
        let gg = g.dot(g)?;
        let ghg = curv.expect("nonempty").scale(scale)?.add(gg.scale_by(two_lambda)?)?;
        let (ggv, ghgv) = (gg.item(), ghg.item());
        trace.grad_norms.push(ggv.sqrt());
        if ghgv <= step_guard_eps * ggv {
            trace.alphas.push(0.0);
            trace.predicted_decrease.push(0.0);
            trace.objectives.push(*trace.objectives.last().expect("initial objective"));
            continue;
        }
        let alpha = gg.div(ghg)?;
        trace.alphas.push(alpha.item());
        trace.predicted_decrease.push(ggv * ggv / (2.0 * ghgv));
        z = z.sub(g.scale_by(alpha)?)?;
        for t in 0..frames.len() {
            r[t] = r[t].sub(q[t].scale_by(alpha)?)?;
        }
        trace.objectives.push(data_term(&r)? + lambda_value * z.value().sum_squares());
    }

    SOLVES.fetch_add(1, AtomicOrdering::Relaxed);
    if !trace.is_monotone() || !trace.is_strictly_decreasing(STRICT_GRAD_FLOOR) {
        NON_MONOTONE.fetch_add(1, AtomicOrdering::Relaxed);
    }
    Ok((z, trace))
}

/// Value-only solve: zero initialization followed by
/// `params.num_iterations` steps.
pub fn solve(frames: &[FrameObservation], params: &SolverParams, k: usize) -> Result<(FilterZ, SolverTrace)> {
    let tape = Tape::new();
    let vars: Vec<FrameVars<'_>> = frames
        .iter()
        .map(|f| FrameVars {
            x: tape.constant(f.x.clone()),
            e: tape.constant(f.e.clone()),
            w: tape.constant(f.w.clone()),
        })
        .collect();
    let lambda = tape.scalar(params.lambda_raw).softplus()?;
    let (z, trace) = solve_taped(&vars, lambda, k, params.num_iterations, params.step_guard_eps)?;
    let kernel = (*z.value()).clone();
    Ok((FilterZ::new(kernel)?, trace))
}
