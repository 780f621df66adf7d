//! Box-centered crops resized to the network's working resolution.

use crate::error::{invalid, Result};
use crate::geometry::BoundingBox;
use crate::tensor::Tensor;

/// Maps between source-image and patch coordinates. Both use continuous
/// pixel coordinates where pixel `(i, j)` covers `[j, j+1) × [i, i+1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
    /// Patch pixels per source pixel.
    pub factor: f64,
    pub src_h: usize,
    pub src_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

#[derive(Clone, Debug)]
pub struct CropResult {
    pub patch: Tensor,
    pub patch_box: BoundingBox,
    pub patch_mask: Option<Tensor>,
    pub transform: CropTransform,
}

/// Crops `scale` times the box extent around the box center, clipped to
/// the image, and resizes it bilinearly into the top-left corner of an
/// `out_h × out_w` patch; the remainder is zero padding. The mask is
/// resampled the same way and re-binarized at 0.5.
pub fn crop_resample(
    frame: &Tensor,
    mask: Option<&Tensor>,
    b: &BoundingBox,
    scale: f64,
    out_h: usize,
    out_w: usize,
) -> Result<CropResult> {
    let (src_h, src_w, _) = frame.hwc()?;
    if !(scale >= 1.0 && scale.is_finite()) {
        return Err(invalid!("crop scale must be at least 1, got {scale}"));
    }
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("empty crop size {out_h}×{out_w}"));
    }
    b.validate(src_h, src_w)?;
    if let Some(m) = mask {
        let (mh, mw, mc) = m.hwc()?;
        if (mh, mw, mc) != (src_h, src_w, 1) {
            return Err(invalid!("mask {:?} does not match frame {:?}", m.shape(), frame.shape()));
        }
    }
    let span = |start: i64, len: i64, limit: usize| {
        let center = start as f64 + len as f64 / 2.0;
        let half = scale * len as f64 / 2.0;
        let lo = (center - half).max(0.0);
        let hi = (center + half).min(limit as f64);
        (lo, hi - lo)
    };
    let (x0, width) = span(b.x_min, b.width, src_w);
    let (y0, height) = span(b.y_min, b.height, src_h);
    let factor = (out_w as f64 / width).min(out_h as f64 / height);
    let transform = CropTransform { x0, y0, width, height, factor, src_h, src_w, out_h, out_w };

    let patch = transform.sample_patch(frame);
    let patch_mask = mask.map(|m| transform.sample_patch(m).map(|v| if v > 0.5 { 1.0 } else { 0.0 }));
    let patch_box = transform.box_to_patch(b);
    Ok(CropResult { patch, patch_box, patch_mask, transform })
}

impl CropTransform {
    /// Rows and columns of the patch that carry image content.
    pub fn content_extent(&self) -> (usize, usize) {
        let extent = |len: f64, out: usize| ((len * self.factor - 0.5).ceil().max(1.0) as usize).min(out);
        (extent(self.height, self.out_h), extent(self.width, self.out_w))
    }

    fn sample_patch(&self, src: &Tensor) -> Tensor {
        let c = src.shape()[2];
        let (ch, cw) = self.content_extent();
        let mut out = Tensor::zeros(&[self.out_h, self.out_w, c]);
        let data = out.data_mut();
        for i in 0..ch {
            let sy = self.y0 + (i as f64 + 0.5) / self.factor - 0.5;
            for j in 0..cw {
                let sx = self.x0 + (j as f64 + 0.5) / self.factor - 0.5;
                let at = (i * self.out_w + j) * c;
                bilinear(src, sy, sx, (0, 0, self.src_h, self.src_w), &mut data[at..at + c]);
            }
        }
        out
    }

    pub fn box_to_patch(&self, b: &BoundingBox) -> BoundingBox {
        let (ch, cw) = self.content_extent();
        let map = |start: i64, len: i64, origin: f64, content: usize| {
            let lo = ((start as f64 - origin) * self.factor).round().clamp(0.0, content as f64 - 1.0) as i64;
            let hi = (((start + len) as f64 - origin) * self.factor).round().clamp(0.0, content as f64) as i64;
            (lo, (hi - lo).max(1))
        };
        let (x, w) = map(b.x_min, b.width, self.x0, cw);
        let (y, h) = map(b.y_min, b.height, self.y0, ch);
        BoundingBox::new(x, y, w, h)
    }

    pub fn box_to_source(&self, b: &BoundingBox) -> BoundingBox {
        let map = |start: i64, len: i64, origin: f64| {
            let lo = (origin + start as f64 / self.factor).round() as i64;
            let hi = (origin + (start + len) as f64 / self.factor).round() as i64;
            (lo, (hi - lo).max(1))
        };
        let (x, w) = map(b.x_min, b.width, self.x0);
        let (y, h) = map(b.y_min, b.height, self.y0);
        BoundingBox::new(x, y, w, h)
    }

    /// Resamples a patch-space map back onto the source grid. Source pixels
    /// outside the crop region read zero.
    pub fn paste_back(&self, patch: &Tensor) -> Result<Tensor> {
        let (ph, pw, c) = patch.hwc()?;
        if (ph, pw) != (self.out_h, self.out_w) {
            return Err(invalid!("patch {:?} does not match crop size {}×{}", patch.shape(), self.out_h, self.out_w));
        }
        let (ch, cw) = self.content_extent();
        let mut out = Tensor::zeros(&[self.src_h, self.src_w, c]);
        let rows = self.y0.floor() as usize..((self.y0 + self.height).ceil() as usize).min(self.src_h);
        let cols = self.x0.floor() as usize..((self.x0 + self.width).ceil() as usize).min(self.src_w);
        let data = out.data_mut();
        for i in rows {
            let cy = i as f64 + 0.5;
            if cy < self.y0 || cy > self.y0 + self.height {
                continue;
            }
            let py = (cy - self.y0) * self.factor - 0.5;
            for j in cols.clone() {
                let cx = j as f64 + 0.5;
                if cx < self.x0 || cx > self.x0 + self.width {
                    continue;
                }
                let px = (cx - self.x0) * self.factor - 0.5;
                let at = (i * self.src_w + j) * c;
                bilinear(patch, py, px, (0, 0, ch, cw), &mut data[at..at + c]);
            }
        }
        Ok(out)
    }
}

/// Bilinear lookup at index-space position `(y, x)`, clamped to the
/// `[r0, r1) × [c0, c1)` window of `img`.
fn bilinear(img: &Tensor, y: f64, x: f64, (r0, c0, r1, c1): (usize, usize, usize, usize), out: &mut [f64]) {
    let (_, w, c) = img.hwc().expect("rank-3 image");
    let clamp = |v: f64, lo: usize, hi: usize| v.clamp(lo as f64, (hi - 1) as f64);
    let (y, x) = (clamp(y, r0, r1), clamp(x, c0, c1));
    let (ya, xa) = (y.floor() as usize, x.floor() as usize);
    let (yb, xb) = ((ya + 1).min(r1 - 1), (xa + 1).min(c1 - 1));
    let (fy, fx) = (y - ya as f64, x - xa as f64);
    let d = img.data();
    for k in 0..c {
        let v = |r: usize, q: usize| d[(r * w + q) * c + k];
        out[k] = (1.0 - fy) * ((1.0 - fx) * v(ya, xa) + fx * v(ya, xb)) + fy * ((1.0 - fx) * v(yb, xa) + fx * v(yb, xb));
    }
}
