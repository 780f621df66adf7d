//! Dense normal-equation solve of the aggregation problem, used to verify
//! the unrolled solver.

use nalgebra::{DMatrix, DVector};

use super::{check_frames, refs, FilterZ, FrameObservation};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const MAX_ORACLE_UNKNOWNS: usize = 4096;

/// Assembles `A = (1/T) Σ M_tᵀ W_t² M_t + λI` and
/// `b = (1/T) Σ M_tᵀ W_t² vec(e_t)`, where `M_t` is the matrix of
/// `z ↦ x_t ∗ z`, and returns `A⁻¹b` reshaped to a `K×K×D×C` filter.
///
/// `M_t` is built entry by entry from its definition and never touches the
/// convolution routines.
pub fn dense_oracle_solve(frames: &[FrameObservation], lambda: f64, k: usize) -> Result<FilterZ> {
    let (d, c) = check_frames(&refs(frames))?;
    if k % 2 == 0 {
        return Err(invalid!("kernel size must be odd, got {k}"));
    }
    let n = k * k * d * c;
    if n > MAX_ORACLE_UNKNOWNS {
        return Err(Error::TooLarge(format!(
            "{n} unknowns exceeds the dense limit of {MAX_ORACLE_UNKNOWNS}"
        )));
    }
    let p = (k - 1) as isize / 2;
    let inv_t = 1.0 / frames.len() as f64;
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut b = DVector::<f64>::zeros(n);
    let mut row_idx: Vec<usize> = Vec::with_capacity(k * k * d);
    let mut row_val: Vec<f64> = Vec::with_capacity(k * k * d);

    for f in frames {
        let (h, w, _) = f.x.hwc()?;
        let x = f.x.data();
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    // Nonzeros of row (i, j, ch) of M_t.
                    row_idx.clear();
                    row_val.clear();
                    for u in 0..k {
                        for v in 0..k {
                            let ii = i as isize + u as isize - p;
                            let jj = j as isize + v as isize - p;
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            for dd in 0..d {
                                row_idx.push(((u * k + v) * d + dd) * c + ch);
                                row_val.push(x[(ii as usize * w + jj as usize) * d + dd]);
                            }
                        }
                    }
                    let pix = (i * w + j) * c + ch;
                    let wt = f.w.data()[pix];
                    let w2 = wt * wt * inv_t;
                    let target = f.e.data()[pix];
                    for (&ra, &va) in row_idx.iter().zip(&row_val) {
                        b[ra] += w2 * va * target;
                        for (&rb, &vb) in row_idx.iter().zip(&row_val) {
                            a[(ra, rb)] += w2 * va * vb;
                        }
                    }
                }
            }
        }
    }
    for i in 0..n {
        a[(i, i)] += lambda;
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("normal matrix not positive definite (λ = {lambda})")))?;
    let z = chol.solve(&b);
    FilterZ::new(Tensor::new(&[k, k, d, c], z.iter().copied().collect())?)
}
