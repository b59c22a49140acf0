//! Bounding-box crop, resize, random shift crop and per-image mean
//! subtraction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned box in pixel units; `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    /// Smallest box containing every box in `boxes`.
    pub fn union(boxes: &[BBox]) -> Option<BBox> {
        let first = boxes.first()?;
        let (mut x0, mut y0) = (first.x, first.y);
        let (mut x1, mut y1) = (first.x + first.w, first.y + first.h);
        for b in &boxes[1..] {
            x0 = x0.min(b.x);
            y0 = y0.min(b.y);
            x1 = x1.max(b.x + b.w);
            y1 = y1.max(b.y + b.h);
        }
        Some(BBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0 })
    }

    /// Grows the box by `fraction` of its size along each axis, keeping the
    /// centre fixed (half the growth on each side).
    pub fn expand(&self, fraction: f64) -> BBox {
        let (dw, dh) = (self.w * fraction, self.h * fraction);
        BBox { x: self.x - dw / 2.0, y: self.y - dh / 2.0, w: self.w + dw, h: self.h + dh }
    }
}

/// Sizes used by the input pipeline: crop to the expanded character-box
/// union, resize to `resize`, then take a `crop`-sized window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// `[H, W]` after crop-and-resize.
    pub resize: [usize; 2],
    /// `[H, W]` of the network input window.
    pub crop: [usize; 2],
    /// Fractional growth of the box union along each axis.
    pub expansion: f64,
}

impl PreprocessConfig {
    /// 64×64 resize, 54×54 crops, 30% expansion.
    pub fn svhn() -> Self {
        Self { resize: [64, 64], crop: [54, 54], expansion: 0.3 }
    }

    /// 36×72 resize, 32×64 crops, 30% expansion.
    pub fn desk() -> Self {
        Self { resize: [36, 72], crop: [32, 64], expansion: 0.3 }
    }

    /// Largest top-left offset of the crop window, per axis.
    pub fn max_offset(&self) -> [usize; 2] {
        [self.resize[0] - self.crop[0], self.resize[1] - self.crop[1]]
    }

    /// Offset of the deterministic centre crop.
    pub fn center_offset(&self) -> [usize; 2] {
        let [oy, ox] = self.max_offset();
        [oy / 2, ox / 2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.crop[0] == 0 || self.crop[1] == 0 || self.crop[0] > self.resize[0] || self.crop[1] > self.resize[1] {
            return Err(Error::InvalidArgument(format!(
                "crop {:?} must be non-empty and fit inside resize {:?}",
                self.crop, self.resize
            )));
        }
        if !(self.expansion >= 0.0 && self.expansion.is_finite()) {
            return Err(Error::InvalidArgument(format!("expansion {} must be >= 0", self.expansion)));
        }
        Ok(())
    }
}

/// Bilinear sample with zero outside the image.
fn sample_bilinear(img: &Tensor, y: f64, x: f64, c: usize) -> f64 {
    let (h, w, _) = img.hwc().expect("rank-3 image");
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let px = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            img.at3(yy as usize, xx as usize, c)
        }
    };
    let mut v = 0.0;
    // skip zero-weight taps so integer coordinates never read past the edge
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        if wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            if wx == 0.0 {
                continue;
            }
            v += wy * wx * px(y0 + dy, x0 + dx);
        }
    }
    v
}

/// Resamples the region `region` of `image` onto an `out_h × out_w` grid
/// with bilinear interpolation (pixel-centre aligned). Area outside the image
/// reads as zero.
pub fn resize_region(image: &Tensor, region: BBox, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, c) = image.hwc()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize target must be non-empty".into()));
    }
    if !(region.w > 0.0 && region.h > 0.0) {
        return Err(Error::InvalidArgument(format!("degenerate crop region {region:?}")));
    }
    let (sy, sx) = (region.h / out_h as f64, region.w / out_w as f64);
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let y = region.y + (oy as f64 + 0.5) * sy - 0.5;
        for ox in 0..out_w {
            let x = region.x + (ox as f64 + 0.5) * sx - 0.5;
            for ch in 0..c {
                out.push(sample_bilinear(image, y, x, ch));
            }
        }
    }
    Tensor::from_hwc(out_h, out_w, c, out)
}

/// Crops to the union of the character boxes grown by `cfg.expansion`,
/// and resizes to `cfg.resize`.
pub fn crop_and_resize(image: &Tensor, boxes: &[BBox], cfg: &PreprocessConfig) -> Result<Tensor> {
    let union = BBox::union(boxes).ok_or(Error::Empty("crop_and_resize: no character boxes"))?;
    resize_region(image, union.expand(cfg.expansion), cfg.resize[0], cfg.resize[1])
}

/// Resizes the whole image, for inputs that come without character boxes.
pub fn resize_whole(image: &Tensor, cfg: &PreprocessConfig) -> Result<Tensor> {
    let (h, w, _) = image.hwc()?;
    resize_region(image, BBox::new(0.0, 0.0, w as f64, h as f64), cfg.resize[0], cfg.resize[1])
}

/// Copies the `crop`-sized window whose top-left corner is `offset`.
pub fn crop_at(image: &Tensor, cfg: &PreprocessConfig, offset: [usize; 2]) -> Result<Tensor> {
    let (h, w, c) = image.hwc()?;
    if [h, w] != cfg.resize {
        return Err(Error::shape("random_shift_crop", format!("{:?} input", cfg.resize), format!("{h}x{w}")));
    }
    let max = cfg.max_offset();
    if offset[0] > max[0] || offset[1] > max[1] {
        return Err(Error::InvalidArgument(format!("crop offset {offset:?} exceeds {max:?}")));
    }
    let [ch, cw] = cfg.crop;
    let mut out = Vec::with_capacity(ch * cw * c);
    for y in 0..ch {
        let s = ((offset[0] + y) * w + offset[1]) * c;
        out.extend_from_slice(&image.data()[s..s + cw * c]);
    }
    Tensor::from_hwc(ch, cw, c, out)
}

/// Crop window at a uniformly random offset in `[0, resize - crop]` per axis.
pub fn random_shift_crop<R: Rng + ?Sized>(image: &Tensor, cfg: &PreprocessConfig, rng: &mut R) -> Result<Tensor> {
    let [my, mx] = cfg.max_offset();
    let offset = [rng.random_range(0..=my), rng.random_range(0..=mx)];
    crop_at(image, cfg, offset)
}

/// Deterministic centre crop used at evaluation time.
pub fn center_crop(image: &Tensor, cfg: &PreprocessConfig) -> Result<Tensor> {
    crop_at(image, cfg, cfg.center_offset())
}

/// Subtracts the image's own mean. No whitening or contrast normalisation.
pub fn mean_subtract(image: &Tensor) -> Tensor {
    let m = image.mean();
    image.map(|v| v - m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_hwc(h, w, 1, (0..h * w).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn union_and_expansion_arithmetic() {
        let u = BBox::union(&[BBox::new(10.0, 10.0, 20.0, 10.0)]).unwrap();
        assert_eq!(u, BBox::new(10.0, 10.0, 20.0, 10.0));
        let e = u.expand(0.3);
        for (a, b) in [(e.x, 7.0), (e.y, 8.5), (e.w, 26.0), (e.h, 13.0)] {
            assert!((a - b).abs() < 1e-12);
        }
        let u = BBox::union(&[BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(20.0, 0.0, 10.0, 10.0)]).unwrap();
        assert_eq!(u, BBox::new(0.0, 0.0, 30.0, 10.0));
    }

    #[test]
    fn unit_scale_resize_is_a_pixel_crop() {
        let img = ramp(100, 90);
        let cfg = PreprocessConfig { resize: [64, 64], crop: [54, 54], expansion: 0.0 };
        let out = crop_and_resize(&img, &[BBox::new(12.0, 20.0, 64.0, 64.0)], &cfg).unwrap();
        assert_eq!(out.shape(), &[64, 64, 1]);
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(out.at3(y, x, 0), img.at3(20 + y, 12 + x, 0));
            }
        }
    }

    #[test]
    fn outside_area_is_zero_filled() {
        let img = Tensor::full(&[10, 10, 1], 1.0);
        let cfg = PreprocessConfig { resize: [20, 20], crop: [10, 10], expansion: 0.0 };
        let out = crop_and_resize(&img, &[BBox::new(-10.0, -10.0, 20.0, 20.0)], &cfg).unwrap();
        assert_eq!(out.at3(0, 0, 0), 0.0);
        assert_eq!(out.at3(19, 19, 0), 1.0);
    }

    #[test]
    fn crop_requires_boxes() {
        assert!(crop_and_resize(&ramp(8, 8), &[], &PreprocessConfig::svhn()).is_err());
    }

    #[test]
    fn shift_crop_offsets() {
        let img = ramp(64, 64);
        let cfg = PreprocessConfig::svhn();
        let tl = crop_at(&img, &cfg, [0, 0]).unwrap();
        assert_eq!(tl.shape(), &[54, 54, 1]);
        assert_eq!(tl.at3(0, 0, 0), 0.0);
        assert_eq!(tl.at3(53, 53, 0), img.at3(53, 53, 0));
        let c = center_crop(&img, &cfg).unwrap();
        assert_eq!(c.at3(0, 0, 0), img.at3(5, 5, 0));
        assert!(random_shift_crop(&ramp(60, 64), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn mean_subtraction() {
        assert!(mean_subtract(&Tensor::full(&[3, 3, 1], 7.0)).data().iter().all(|&v| v == 0.0));
        assert_eq!(mean_subtract(&Tensor::from_vec(vec![0.0, 2.0])).data(), &[-1.0, 1.0]);
    }
}
