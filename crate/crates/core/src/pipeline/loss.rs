//! Per-frame loss `ℓ = BCE + (1 − soft-Jaccard)` and the window loss
//! `L = mean_t ℓ(y_t) + mean_t ℓ(ŷ_t)`.

use serde::Serialize;

use super::forward::WindowOutput;
use super::SegmentationResult;
use crate::autodiff::Var;
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Smoothing constant of the soft-Jaccard term.
pub const JACCARD_EPS: f64 = 1.0;

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` inside the
/// logarithms of the probability-space BCE.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SequenceLoss {
    pub value: f64,
    pub initial: Vec<f64>,
    pub refined: Vec<f64>,
}

fn soft_jaccard(inter: f64, sum_p: f64, sum_g: f64) -> f64 {
    (inter + JACCARD_EPS) / (sum_p + sum_g - inter + JACCARD_EPS)
}

/// `ℓ(p, g)` on probabilities.
pub fn frame_loss(probs: &Tensor, gt: &Tensor) -> Result<f64> {
    probs.ensure_same_shape(gt, "frame loss")?;
    let n = probs.len() as f64;
    let mut bce = 0.0;
    let (mut inter, mut sum_p, mut sum_g) = (0.0, 0.0, 0.0);
    for (&p, &g) in probs.data().iter().zip(gt.data()) {
        let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        bce -= g * pc.ln() + (1.0 - g) * (1.0 - pc).ln();
        inter += p * g;
        sum_p += p;
        sum_g += g;
    }
    Ok(bce / n + 1.0 - soft_jaccard(inter, sum_p, sum_g))
}

/// `ℓ` on logits, recorded on the tape. The BCE uses the fused form
/// `softplus(l) − g·l`.
pub fn frame_loss_logits<'t>(logits: Var<'t>, gt: &Tensor) -> Result<Var<'t>> {
    let value = logits.value();
    value.ensure_same_shape(gt, "frame loss")?;
    let tape = logits.tape();
    let n = gt.len() as f64;
    let g = tape.constant(gt.clone());
    let bce = logits.softplus()?.mean()?.sub(logits.dot(g)?.scale(1.0 / n)?)?;
    let p = logits.sigmoid()?;
    let inter = p.dot(g)?;
    let num = inter.add_const(JACCARD_EPS)?;
    let den = p.sum()?.sub(inter)?.add_const(gt.sum() + JACCARD_EPS)?;
    bce.sub(num.div(den)?)?.add_const(1.0)
}

fn mean<'t>(terms: &[Var<'t>]) -> Result<Var<'t>> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = acc.add(t)?;
    }
    acc.scale(1.0 / terms.len() as f64)
}

/// Window loss on the tape; `gts` is indexed by window position. Variants
/// without a refinement pass count their single prediction twice so every
/// variant shares the two-term form.
pub fn window_loss<'t>(out: &WindowOutput<'t>, gts: &[Tensor]) -> Result<Var<'t>> {
    if out.frames.is_empty() {
        return Err(invalid!("window produced no predictions"));
    }
    let gt = |i: usize| gts.get(i).ok_or_else(|| invalid!("missing ground truth for window position {i}"));
    let mut initial = Vec::with_capacity(out.frames.len());
    let mut refined = Vec::with_capacity(out.frames.len());
    for (k, &i) in out.frames.iter().enumerate() {
        initial.push(frame_loss_logits(out.initial[k], gt(i)?)?);
        refined.push(frame_loss_logits(out.final_logits()[k], gt(i)?)?);
    }
    mean(&initial)?.add(mean(&refined)?)
}

pub fn sequence_loss(result: &SegmentationResult, gts: &[Tensor]) -> Result<SequenceLoss> {
    if result.y.is_empty() {
        return Err(invalid!("empty segmentation result"));
    }
    if gts.len() != result.y.len() || result.y_hat.len() != result.y.len() {
        return Err(invalid!("{} ground-truth masks for {} predictions", gts.len(), result.y.len()));
    }
    let initial: Vec<f64> = result.y.iter().zip(gts).map(|(p, g)| frame_loss(p, g)).collect::<Result<_>>()?;
    let refined: Vec<f64> = result.y_hat.iter().zip(gts).map(|(p, g)| frame_loss(p, g)).collect::<Result<_>>()?;
    let t = gts.len() as f64;
    let value = initial.iter().sum::<f64>() / t + refined.iter().sum::<f64>() / t;
    Ok(SequenceLoss { value, initial, refined })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::testutil::{rand_tensor, rng};

    #[test]
    fn half_probability_example() {
        let p = Tensor::full(&[2, 2, 1], 0.5);
        let g = Tensor::new(&[2, 2, 1], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let l = frame_loss(&p, &g).unwrap();
        assert!((l - (std::f64::consts::LN_2 + 0.5)).abs() < 1e-12, "{l}");
        let tape = Tape::new();
        let lt = frame_loss_logits(tape.constant(Tensor::zeros(&[2, 2, 1])), &g).unwrap();
        assert!((lt.item() - l).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let g = Tensor::new(&[2, 3, 1], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(frame_loss(&g, &g).unwrap() < 1e-10);
        let tape = Tape::new();
        let logits = tape.constant(g.map(|v| if v > 0.5 { 40.0 } else { -40.0 }));
        assert!(frame_loss_logits(logits, &g).unwrap().item() < 1e-10);
    }

    #[test]
    fn logit_and_probability_forms_agree() {
        let mut r = rng(5);
        for _ in 0..10 {
            let l = rand_tensor(&mut r, &[5, 4, 1]).scale(3.0);
            let g = rand_tensor(&mut r, &[5, 4, 1]).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let p = l.map(crate::autodiff::sigmoid);
            let tape = Tape::new();
            let lt = frame_loss_logits(tape.constant(l), &g).unwrap().item();
            assert!((lt - frame_loss(&p, &g).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn sequence_loss_is_a_mean_over_frames() {
        let mut r = rng(6);
        let probs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut r, &[4, 4, 1]).map(crate::autodiff::sigmoid)).collect();
        let gts: Vec<Tensor> = (0..3)
            .map(|_| rand_tensor(&mut r, &[4, 4, 1]).map(|v| if v > 0.3 { 1.0 } else { 0.0 }))
            .collect();
        let result = SegmentationResult { y: probs.clone(), y_hat: probs.clone(), traces: Default::default() };
        let a = sequence_loss(&result, &gts).unwrap();
        assert!(a.value >= 0.0);
        let order = [2, 0, 1];
        let permuted = SegmentationResult {
            y: order.iter().map(|&i| probs[i].clone()).collect(),
            y_hat: order.iter().map(|&i| probs[i].clone()).collect(),
            traces: Default::default(),
        };
        let pg: Vec<Tensor> = order.iter().map(|&i| gts[i].clone()).collect();
        let b = sequence_loss(&permuted, &pg).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
        assert!(sequence_loss(&result, &gts[..2]).is_err());
    }
}
