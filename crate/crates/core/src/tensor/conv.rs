//! "Same"-padded stride-1 2-D convolution and its two adjoints.
//!
//! `out[i,j,c] = Σ_{u,v,d} input[i+u-p, j+v-p, d] · kernel[u,v,d,c]` with
//! `p = (K-1)/2` and out-of-range input read as zero. All three routines
//! lower to a patch matrix (`H·W × K·K·D`) and one GEMM.

use std::borrow::Cow;

use super::Tensor;
use crate::error::{invalid, shape_err, Result};

/// Extents `(K, D, C)` of a `K×K×D×C` kernel.
pub fn kernel_dims(kernel: &Tensor) -> Result<(usize, usize, usize)> {
    match kernel.shape()[..] {
        [k1, k2, d, c] if k1 == k2 => {
            if k1 % 2 == 0 {
                return Err(invalid!("kernel size must be odd, got {k1}"));
            }
            Ok((k1, d, c))
        }
        _ => Err(shape_err!(
            "expected K×K×D×C kernel, got {:?}",
            kernel.shape()
        )),
    }
}

fn im2col(data: &[f64], h: usize, w: usize, d: usize, k: usize) -> Vec<f64> {
    let p = (k - 1) / 2;
    let cols = k * k * d;
    let mut out = vec![0.0; h * w * cols];
    for i in 0..h {
        for j in 0..w {
            let row = &mut out[(i * w + j) * cols..(i * w + j + 1) * cols];
            for u in 0..k {
                let ii = i as isize + u as isize - p as isize;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for v in 0..k {
                    let jj = j as isize + v as isize - p as isize;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let src = (ii as usize * w + jj as usize) * d;
                    let dst = (u * k + v) * d;
                    row[dst..dst + d].copy_from_slice(&data[src..src + d]);
                }
            }
        }
    }
    out
}

fn col2im(cols: &[f64], h: usize, w: usize, d: usize, k: usize) -> Vec<f64> {
    let p = (k - 1) / 2;
    let width = k * k * d;
    let mut out = vec![0.0; h * w * d];
    for i in 0..h {
        for j in 0..w {
            let row = &cols[(i * w + j) * width..(i * w + j + 1) * width];
            for u in 0..k {
                let ii = i as isize + u as isize - p as isize;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for v in 0..k {
                    let jj = j as isize + v as isize - p as isize;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let dst = (ii as usize * w + jj as usize) * d;
                    let src = (u * k + v) * d;
                    for (o, &g) in out[dst..dst + d].iter_mut().zip(&row[src..src + d]) {
                        *o += g;
                    }
                }
            }
        }
    }
    out
}

fn patches(input: &[f64], h: usize, w: usize, d: usize, k: usize) -> Cow<'_, [f64]> {
    if k == 1 {
        Cow::Borrowed(input)
    } else {
        Cow::Owned(im2col(input, h, w, d, k))
    }
}

/// Row-major `c = a·b` where `a` is `m×k` (or `k×m` if `trans_a`) and `b` is
/// `k×n` (or `n×k` if `trans_b`).
fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    // SAFETY: the slices hold exactly m·k, k·n and m·n elements and the
    // strides describe dense row-major (or transposed) layouts inside them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Forward convolution: `H×W×D` input, `K×K×D×C` kernel, `H×W×C` output.
pub fn conv2d(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (h, w, d) = input.hwc()?;
    let (k, kd, c) = kernel_dims(kernel)?;
    if kd != d {
        return Err(shape_err!(
            "conv2d: input has {d} channels, kernel expects {kd}"
        ));
    }
    let cols = patches(input.data(), h, w, d, k);
    let out = gemm(h * w, k * k * d, c, &cols, false, kernel.data(), false);
    Tensor::new(&[h, w, c], out)
}

/// Adjoint of [`conv2d`] in its input argument.
pub fn conv2d_transpose(grad_out: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (h, w, c) = grad_out.hwc()?;
    let (k, d, kc) = kernel_dims(kernel)?;
    if kc != c {
        return Err(shape_err!(
            "conv2d_transpose: gradient has {c} channels, kernel produces {kc}"
        ));
    }
    let gcols = gemm(h * w, c, k * k * d, grad_out.data(), false, kernel.data(), true);
    let data = if k == 1 {
        gcols
    } else {
        col2im(&gcols, h, w, d, k)
    };
    Tensor::new(&[h, w, d], data)
}

/// Adjoint of [`conv2d`] in its kernel argument; returns a `K×K×D×C` tensor.
pub fn conv2d_kernel_grad(input: &Tensor, grad_out: &Tensor, k: usize) -> Result<Tensor> {
    let (h, w, d) = input.hwc()?;
    let (gh, gw, c) = grad_out.hwc()?;
    if (gh, gw) != (h, w) {
        return Err(shape_err!(
            "conv2d_kernel_grad: input {:?} vs gradient {:?}",
            input.shape(),
            grad_out.shape()
        ));
    }
    if k % 2 == 0 {
        return Err(invalid!("kernel size must be odd, got {k}"));
    }
    let cols = patches(input.data(), h, w, d, k);
    let out = gemm(k * k * d, h * w, c, &cols, true, grad_out.data(), false);
    Tensor::new(&[k, k, d, c], out)
}

#[cfg(test)]
pub(crate) mod reference {
    use super::*;

    /// Direct loop nest; the oracle for the GEMM lowering.
    pub fn conv2d_loops(input: &Tensor, kernel: &Tensor) -> Tensor {
        let (h, w, d) = input.hwc().unwrap();
        let (k, _, c) = kernel_dims(kernel).unwrap();
        let p = (k - 1) as isize / 2;
        let x = input.data();
        let z = kernel.data();
        let mut out = Tensor::zeros(&[h, w, c]);
        let o = out.data_mut();
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for u in 0..k {
                        for v in 0..k {
                            let ii = i as isize + u as isize - p;
                            let jj = j as isize + v as isize - p;
                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                continue;
                            }
                            for dd in 0..d {
                                acc += x[(ii as usize * w + jj as usize) * d + dd]
                                    * z[((u * k + v) * d + dd) * c + ch];
                            }
                        }
                    }
                    o[(i * w + j) * c + ch] = acc;
                }
            }
        }
        out
    }
}
