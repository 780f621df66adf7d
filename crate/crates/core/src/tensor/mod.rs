//! Dense row-major `f64` tensors.
//!
//! Image-like tensors use the `H×W×C` layout throughout the crate; a
//! convolution kernel is `K×K×D×C`. Scalars are rank-0 tensors holding one
//! element.

pub mod conv;
pub mod sampling;

use std::io::{Read, Write};

use crate::error::{invalid, shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&e| e == 1)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(shape_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    /// Extents of an `H×W×C` tensor.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(shape_err!("expected H×W×C tensor, got {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "{what}: {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.ensure_same_shape(other, "elementwise op")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        self.ensure_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.ensure_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_squares().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Concatenates `H×W×C_i` tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| invalid!("concat of zero tensors"))?;
        let (h, w, _) = first.hwc()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (ph, pw, pc) = p.hwc()?;
            if (ph, pw) != (h, w) {
                return Err(shape_err!(
                    "channel concat of {:?} with {:?}",
                    first.shape,
                    p.shape
                ));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(h * w * total);
        for pix in 0..h * w {
            for (p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[pix * c..(pix + 1) * c]);
            }
        }
        Tensor::new(&[h, w, total], data)
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, widths: &[usize]) -> Result<Vec<Tensor>> {
        let (h, w, c) = self.hwc()?;
        if widths.iter().sum::<usize>() != c {
            return Err(shape_err!("split {:?} of {} channels", widths, c));
        }
        let mut out: Vec<Vec<f64>> = widths
            .iter()
            .map(|&wc| Vec::with_capacity(h * w * wc))
            .collect();
        for pix in 0..h * w {
            let mut off = pix * c;
            for (o, &wc) in out.iter_mut().zip(widths) {
                o.extend_from_slice(&self.data[off..off + wc]);
                off += wc;
            }
        }
        out.into_iter()
            .zip(widths)
            .map(|(d, &wc)| Tensor::new(&[h, w, wc], d))
            .collect()
    }

    /// Horizontal mirror of an `H×W×C` tensor.
    pub fn flip_horizontal(&self) -> Result<Tensor> {
        let (h, w, c) = self.hwc()?;
        let mut data = vec![0.0; self.data.len()];
        for i in 0..h {
            for j in 0..w {
                let src = (i * w + (w - 1 - j)) * c;
                let dst = (i * w + j) * c;
                data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        Tensor::new(&self.shape, data)
    }

    /// Writes the flat binary form: rank and extents as little-endian `u64`,
    /// then the row-major data as little-endian `f64`.
    pub fn write_binary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(&(self.shape.len() as u64).to_le_bytes())?;
        for &e in &self.shape {
            out.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Tensor> {
        let mut word = [0u8; 8];
        input.read_exact(&mut word)?;
        let rank = u64::from_le_bytes(word) as usize;
        if rank > 16 {
            return Err(Error::Data(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            input.read_exact(&mut word)?;
            shape.push(u64::from_le_bytes(word) as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        input.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Tensor::new(&shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[], vec![1.0]).is_ok());
    }

    #[test]
    fn concat_then_split() {
        let a = Tensor::from_fn(&[2, 2, 1], |i| i as f64);
        let b = Tensor::from_fn(&[2, 2, 2], |i| 10.0 + i as f64);
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 2, 3]);
        assert_eq!(&cat.data()[..3], &[0.0, 10.0, 11.0]);
        let parts = cat.split_channels(&[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::zeros(&[2, 2, 1]);
        let b = Tensor::zeros(&[2, 3, 1]);
        assert!(Tensor::concat_channels(&[&a, &b]).is_err());
    }

    #[test]
    fn flip_is_involution() {
        let a = Tensor::from_fn(&[3, 4, 2], |i| i as f64);
        let f = a.flip_horizontal().unwrap();
        assert_eq!(f.data()[0], a.data()[(3) * 2]);
        assert_eq!(f.flip_horizontal().unwrap(), a);
    }

    #[test]
    fn binary_header_layout() {
        let t = Tensor::new(&[1, 2], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 * (1 + 2 + 2));
        assert_eq!(&buf[..8], &2u64.to_le_bytes());
        assert_eq!(&buf[8..16], &1u64.to_le_bytes());
        assert_eq!(&buf[24..32], &1.5f64.to_le_bytes());
    }

    #[test]
    fn truncated_binary_is_an_error() {
        let t = Tensor::ones(&[4]);
        let mut buf = Vec::new();
        t.write_binary(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Tensor::read_binary(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn binary_roundtrip(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let t = Tensor::from_fn(&shape, |i| (i as f64 + seed as f64 * 1e-3).sin() * 1e3);
            let mut buf = Vec::new();
            t.write_binary(&mut buf).unwrap();
            let back = Tensor::read_binary(&buf[..]).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
