//! Pooling, 2× upsampling and general bilinear resampling on `H×W×C` tensors.

use super::Tensor;
use crate::error::{invalid, shape_err, Result};

/// 2×2 max-pool with stride 2. Returns the pooled tensor and, per output
/// element, the flat index of the input element it came from (first
/// maximum in row-major window order).
pub fn max_pool2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, c) = input.hwc()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("max_pool2 needs even extents, got {h}×{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut arg = Vec::with_capacity(oh * ow * c);
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                let mut best_idx = ((2 * i) * w + 2 * j) * c + ch;
                let mut best = x[best_idx];
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * i + di) * w + 2 * j + dj) * c + ch;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::new(&[oh, ow, c], out)?, arg))
}

pub fn max_pool2_backward(grad: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    if grad.len() != argmax.len() {
        return Err(shape_err!("max_pool2 backward: gradient/argmax length"));
    }
    let mut out = Tensor::zeros(input_shape);
    let o = out.data_mut();
    for (&g, &idx) in grad.data().iter().zip(argmax) {
        o[idx] += g;
    }
    Ok(out)
}

/// Non-overlapping `f×f` average pooling.
pub fn avg_pool(input: &Tensor, f: usize) -> Result<Tensor> {
    let (h, w, c) = input.hwc()?;
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(shape_err!("avg_pool factor {f} does not divide {h}×{w}"));
    }
    let (oh, ow) = (h / f, w / f);
    let norm = 1.0 / (f * f) as f64;
    let x = input.data();
    let mut out = vec![0.0; oh * ow * c];
    for i in 0..h {
        for j in 0..w {
            let dst = ((i / f) * ow + j / f) * c;
            let src = (i * w + j) * c;
            for ch in 0..c {
                out[dst + ch] += x[src + ch] * norm;
            }
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

pub fn avg_pool_backward(grad: &Tensor, f: usize) -> Result<Tensor> {
    let (oh, ow, c) = grad.hwc()?;
    let (h, w) = (oh * f, ow * f);
    let norm = 1.0 / (f * f) as f64;
    let g = grad.data();
    let mut out = vec![0.0; h * w * c];
    for i in 0..h {
        for j in 0..w {
            let src = ((i / f) * ow + j / f) * c;
            let dst = (i * w + j) * c;
            for ch in 0..c {
                out[dst + ch] = g[src + ch] * norm;
            }
        }
    }
    Tensor::new(&[h, w, c], out)
}

/// Interpolation taps `(i0, i1, w0, w1)` along one axis for half-pixel
/// aligned resampling of `n_in` samples to `n_out` samples.
fn axis_taps(n_in: usize, n_out: usize, scale: f64, offset: f64) -> Vec<(usize, usize, f64, f64)> {
    (0..n_out)
        .map(|o| {
            let src = offset + (o as f64 + 0.5) * scale - 0.5;
            let src = src.clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let t = src - i0 as f64;
            (i0, i1, 1.0 - t, t)
        })
        .collect()
}

fn apply_taps(input: &Tensor, rows: &[(usize, usize, f64, f64)], cols: &[(usize, usize, f64, f64)]) -> Result<Tensor> {
    let (_, w, c) = input.hwc()?;
    let x = input.data();
    let mut out = Vec::with_capacity(rows.len() * cols.len() * c);
    for &(r0, r1, a0, a1) in rows {
        for &(c0, c1, b0, b1) in cols {
            for ch in 0..c {
                let v = a0 * (b0 * x[(r0 * w + c0) * c + ch] + b1 * x[(r0 * w + c1) * c + ch])
                    + a1 * (b0 * x[(r1 * w + c0) * c + ch] + b1 * x[(r1 * w + c1) * c + ch]);
                out.push(v);
            }
        }
    }
    Tensor::new(&[rows.len(), cols.len(), c], out)
}

fn apply_taps_adjoint(
    grad: &Tensor,
    rows: &[(usize, usize, f64, f64)],
    cols: &[(usize, usize, f64, f64)],
    h: usize,
    w: usize,
) -> Result<Tensor> {
    let (_, _, c) = grad.hwc()?;
    let g = grad.data();
    let mut out = vec![0.0; h * w * c];
    let mut idx = 0;
    for &(r0, r1, a0, a1) in rows {
        for &(c0, c1, b0, b1) in cols {
            for ch in 0..c {
                let v = g[idx];
                idx += 1;
                out[(r0 * w + c0) * c + ch] += a0 * b0 * v;
                out[(r0 * w + c1) * c + ch] += a0 * b1 * v;
                out[(r1 * w + c0) * c + ch] += a1 * b0 * v;
                out[(r1 * w + c1) * c + ch] += a1 * b1 * v;
            }
        }
    }
    Tensor::new(&[h, w, c], out)
}

/// Bilinear 2× upsampling with half-pixel centers and edge clamping.
pub fn upsample2(input: &Tensor) -> Result<Tensor> {
    let (h, w, _) = input.hwc()?;
    let rows = axis_taps(h, 2 * h, 0.5, 0.0);
    let cols = axis_taps(w, 2 * w, 0.5, 0.0);
    apply_taps(input, &rows, &cols)
}

pub fn upsample2_backward(grad: &Tensor) -> Result<Tensor> {
    let (gh, gw, _) = grad.hwc()?;
    if gh % 2 != 0 || gw % 2 != 0 {
        return Err(shape_err!("upsample2 gradient must have even extents"));
    }
    let (h, w) = (gh / 2, gw / 2);
    let rows = axis_taps(h, gh, 0.5, 0.0);
    let cols = axis_taps(w, gw, 0.5, 0.0);
    apply_taps_adjoint(grad, &rows, &cols, h, w)
}

/// Axis-aligned region of an image in continuous pixel coordinates; pixel
/// `(i, j)` covers `[j, j+1) × [i, i+1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
}

/// Bilinearly samples `region` of `input` onto an `out_h × out_w` grid.
pub fn resample_region(input: &Tensor, region: Region, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, _) = input.hwc()?;
    if region.width <= 0.0 || region.height <= 0.0 || out_h == 0 || out_w == 0 {
        return Err(invalid!("degenerate resample region {region:?} -> {out_h}×{out_w}"));
    }
    let rows = axis_taps(h, out_h, region.height / out_h as f64, region.y0);
    let cols = axis_taps(w, out_w, region.width / out_w as f64, region.x0);
    apply_taps(input, &rows, &cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{rand_tensor, rng};

    #[test]
    fn max_pool_picks_window_max() {
        let x = Tensor::new(&[2, 2, 1], vec![1.0, 4.0, -2.0, 3.0]).unwrap();
        let (y, arg) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![1]);
        assert!(max_pool2(&Tensor::zeros(&[3, 2, 1])).is_err());
    }

    #[test]
    fn avg_pool_of_constant_is_constant() {
        let x = Tensor::full(&[8, 4, 2], 0.25);
        let y = avg_pool(&x, 4).unwrap();
        assert_eq!(y.shape(), &[2, 1, 2]);
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn upsample_preserves_constants_and_shape() {
        let x = Tensor::full(&[3, 5, 2], 1.5);
        let y = upsample2(&x).unwrap();
        assert_eq!(y.shape(), &[6, 10, 2]);
        assert!(y.data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
    }

    #[test]
    fn upsample_adjoint_identity() {
        let mut r = rng(11);
        for (h, w) in [(1, 1), (2, 3), (4, 4), (5, 2)] {
            let x = rand_tensor(&mut r, &[h, w, 3]);
            let g = rand_tensor(&mut r, &[2 * h, 2 * w, 3]);
            let lhs = upsample2(&x).unwrap().dot(&g).unwrap();
            let rhs = x.dot(&upsample2_backward(&g).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn resample_identity_region() {
        let mut r = rng(12);
        let x = rand_tensor(&mut r, &[5, 7, 3]);
        let region = Region { x0: 0.0, y0: 0.0, width: 7.0, height: 5.0 };
        let y = resample_region(&x, region, 5, 7).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
