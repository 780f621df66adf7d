//! Bounding boxes and their mask representations.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Axis-aligned box in pixel units. Covers columns
/// `x_min ..= x_min + width - 1` and rows `y_min ..= y_min + height - 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i64; 4]", into = "[i64; 4]")]
pub struct BoundingBox {
    pub x_min: i64,
    pub y_min: i64,
    pub width: i64,
    pub height: i64,
}

impl From<[i64; 4]> for BoundingBox {
    fn from([x_min, y_min, width, height]: [i64; 4]) -> Self {
        Self { x_min, y_min, width, height }
    }
}

impl From<BoundingBox> for [i64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x_min, b.y_min, b.width, b.height]
    }
}

impl BoundingBox {
    pub fn new(x_min: i64, y_min: i64, width: i64, height: i64) -> Self {
        Self { x_min, y_min, width, height }
    }

    pub fn x_max(&self) -> i64 {
        self.x_min + self.width - 1
    }

    pub fn y_max(&self) -> i64 {
        self.y_min + self.height - 1
    }

    pub fn area(&self) -> i64 {
        self.width * self.height
    }

    /// Checks the extent invariants and that the box touches the image.
    pub fn validate(&self, image_h: usize, image_w: usize) -> Result<()> {
        if self.width < 1 || self.height < 1 {
            return Err(invalid!("degenerate box {self:?}"));
        }
        if self.x_max() < 0 || self.y_max() < 0 || self.x_min >= image_w as i64 || self.y_min >= image_h as i64 {
            return Err(invalid!("box {self:?} lies outside the {image_h}×{image_w} image"));
        }
        Ok(())
    }

    pub fn contains(&self, row: i64, col: i64) -> bool {
        (self.y_min..=self.y_max()).contains(&row) && (self.x_min..=self.x_max()).contains(&col)
    }

    pub fn intersects(&self, other: &BoundingBox) -> bool {
        self.x_min <= other.x_max()
            && other.x_min <= self.x_max()
            && self.y_min <= other.y_max()
            && other.y_min <= self.y_max()
    }

    pub fn dilate(&self, px: i64) -> BoundingBox {
        BoundingBox::new(self.x_min - px, self.y_min - px, self.width + 2 * px, self.height + 2 * px)
    }

    /// Mirror image of the box in an image `image_w` pixels wide.
    pub fn flip_horizontal(&self, image_w: usize) -> BoundingBox {
        BoundingBox::new(image_w as i64 - self.x_min - self.width, self.y_min, self.width, self.height)
    }

    pub fn translate(&self, dx: i64, dy: i64) -> BoundingBox {
        BoundingBox::new(self.x_min + dx, self.y_min + dy, self.width, self.height)
    }
}

/// `image_h × image_w × 1` mask with ones inside the box.
pub fn rasterize_box(b: &BoundingBox, image_h: usize, image_w: usize) -> Result<Tensor> {
    b.validate(image_h, image_w)?;
    let mut out = Tensor::zeros(&[image_h, image_w, 1]);
    let rows = b.y_min.max(0) as usize..=(b.y_max().min(image_h as i64 - 1)) as usize;
    let cols = b.x_min.max(0) as usize..=(b.x_max().min(image_w as i64 - 1)) as usize;
    let data = out.data_mut();
    for i in rows {
        for j in cols.clone() {
            data[i * image_w + j] = 1.0;
        }
    }
    Ok(out)
}

/// Tightest box around the foreground (`> 0.5`) pixels of an `H×W×1` mask.
pub fn box_from_mask(mask: &Tensor) -> Result<BoundingBox> {
    let (h, w, c) = mask.hwc()?;
    if c != 1 {
        return Err(invalid!("mask must have one channel, got {c}"));
    }
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for i in 0..h {
        for j in 0..w {
            if mask.data()[i * w + j] > 0.5 {
                r0 = r0.min(i);
                r1 = r1.max(i);
                c0 = c0.min(j);
                c1 = c1.max(j);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(invalid!("box_from_mask on an empty mask"));
    }
    Ok(BoundingBox::new(c0 as i64, r0 as i64, (c1 - c0 + 1) as i64, (r1 - r0 + 1) as i64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_with(h: usize, w: usize, pixels: &[(usize, usize)]) -> Tensor {
        let mut m = Tensor::zeros(&[h, w, 1]);
        for &(i, j) in pixels {
            m.data_mut()[i * w + j] = 1.0;
        }
        m
    }

    #[test]
    fn raster_examples() {
        let full = rasterize_box(&BoundingBox::new(0, 0, 5, 4), 4, 5).unwrap();
        assert!(full.data().iter().all(|&v| v == 1.0));
        let one = rasterize_box(&BoundingBox::new(0, 0, 1, 1), 3, 3).unwrap();
        assert_eq!(one.sum(), 1.0);
        assert_eq!(one.data()[0], 1.0);
        assert!(rasterize_box(&BoundingBox::new(10, 0, 2, 2), 4, 4).is_err());
        assert!(rasterize_box(&BoundingBox::new(0, 0, 0, 2), 4, 4).is_err());
    }

    #[test]
    fn box_from_mask_examples() {
        let m = mask_with(8, 8, &[(3, 5)]);
        assert_eq!(box_from_mask(&m).unwrap(), BoundingBox::new(5, 3, 1, 1));
        let m = mask_with(6, 6, &[(1, 1), (4, 3), (2, 2)]);
        assert_eq!(box_from_mask(&m).unwrap(), BoundingBox::new(1, 1, 3, 4));
        let m = Tensor::ones(&[4, 7, 1]);
        assert_eq!(box_from_mask(&m).unwrap(), BoundingBox::new(0, 0, 7, 4));
        assert!(box_from_mask(&Tensor::zeros(&[3, 3, 1])).is_err());
    }

    #[test]
    fn box_serializes_as_array() {
        let b = BoundingBox::new(1, 2, 3, 4);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1,2,3,4]");
        assert_eq!(serde_json::from_str::<BoundingBox>("[1,2,3,4]").unwrap(), b);
    }

    proptest! {
        #[test]
        fn raster_area_matches(x in 0i64..10, y in 0i64..10, w in 1i64..6, h in 1i64..6) {
            let b = BoundingBox::new(x, y, w, h);
            let m = rasterize_box(&b, 16, 16).unwrap();
            prop_assert_eq!(m.sum() as i64, b.area());
            prop_assert_eq!(box_from_mask(&m).unwrap(), b);
        }

        #[test]
        fn raster_is_translation_exact(x in 0i64..8, y in 0i64..8, w in 1i64..5, h in 1i64..5, dx in 0i64..4, dy in 0i64..4) {
            let b = BoundingBox::new(x, y, w, h);
            let a = rasterize_box(&b, 16, 16).unwrap();
            let s = rasterize_box(&b.translate(dx, dy), 16, 16).unwrap();
            for i in 0..16usize {
                for j in 0..16usize {
                    let shifted = if i as i64 >= dy && j as i64 >= dx {
                        a.data()[(i - dy as usize) * 16 + (j - dx as usize)]
                    } else {
                        0.0
                    };
                    prop_assert_eq!(s.data()[i * 16 + j], shifted);
                }
            }
        }

        #[test]
        fn derived_box_is_tight(pixels in prop::collection::vec((0usize..10, 0usize..12), 1..20)) {
            let m = mask_with(10, 12, &pixels);
            let b = box_from_mask(&m).unwrap();
            for &(i, j) in &pixels {
                prop_assert!(b.contains(i as i64, j as i64));
            }
            let on_edge = |f: &dyn Fn(usize, usize) -> bool| pixels.iter().any(|&(i, j)| f(i, j));
            prop_assert!(on_edge(&|i, _| i as i64 == b.y_min));
            prop_assert!(on_edge(&|i, _| i as i64 == b.y_max()));
            prop_assert!(on_edge(&|_, j| j as i64 == b.x_min));
            prop_assert!(on_edge(&|_, j| j as i64 == b.x_max()));
        }

        #[test]
        fn flip_commutes_with_box_from_mask(pixels in prop::collection::vec((0usize..10, 0usize..12), 1..20)) {
            let m = mask_with(10, 12, &pixels);
            let b = box_from_mask(&m).unwrap();
            let flipped = box_from_mask(&m.flip_horizontal().unwrap()).unwrap();
            prop_assert_eq!(flipped, b.flip_horizontal(12));
        }
    }
}
