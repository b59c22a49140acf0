//! Datasets: manifests, the built-in font, synthetic generation and the
//! input pipeline.

pub mod font;
pub mod manifest;
pub mod preprocess;
pub mod synth;

use rand::Rng;

use crate::error::{Error, Result};
use crate::sequence::SequenceLabel;
use crate::tensor::Tensor;

pub use manifest::{load_image, load_manifest, save_image, Alphabet, DatasetManifest, ImageSource, Sample};
pub use preprocess::{
    center_crop, crop_and_resize, crop_at, mean_subtract, random_shift_crop, resize_whole, BBox, PreprocessConfig,
};
pub use synth::{synth_generate, SynthConfig};

/// 64-bit FNV-1a hash.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// True when `id` falls in the held-out fraction. Depends only on the id,
/// so the split is stable across runs and sample orderings.
pub fn is_validation(id: &str, fraction: f64) -> bool {
    (fnv1a(id.as_bytes()) % 1_000_000) as f64 / 1_000_000.0 < fraction
}

/// Evaluation input for an image without character boxes: whole-image
/// resize, centre crop, mean subtraction.
pub fn prepare_unboxed(image: &Tensor, cfg: &PreprocessConfig) -> Result<Tensor> {
    Ok(mean_subtract(&center_crop(&resize_whole(image, cfg)?, cfg)?))
}

/// Samples after crop-and-resize, held in memory. The per-step shift crop
/// and mean subtraction happen in [`PreparedDataset::input`].
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub preprocess: PreprocessConfig,
    pub channels: usize,
    pub ids: Vec<String>,
    pub labels: Vec<SequenceLabel>,
    images: Vec<Tensor>,
}

impl PreparedDataset {
    pub fn from_manifest(manifest: &DatasetManifest, preprocess: PreprocessConfig, channels: usize) -> Result<Self> {
        preprocess.validate()?;
        let mut out = Self { preprocess, channels, ids: Vec::new(), labels: Vec::new(), images: Vec::new() };
        for s in &manifest.samples {
            let img = s.load_image(channels)?;
            let (_, _, c) = img.hwc()?;
            if c != channels {
                return Err(Error::shape("prepare", format!("{channels} channels"), format!("{c}")));
            }
            let resized = if s.boxes.is_empty() {
                resize_whole(&img, &preprocess)?
            } else {
                crop_and_resize(&img, &s.boxes, &preprocess)?
            };
            out.ids.push(s.id.clone());
            out.labels.push(s.label.clone());
            out.images.push(resized);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Network input for sample `i`: a random shift crop when `rng` is given,
    /// the centre crop otherwise, then mean subtraction.
    pub fn input<R: Rng + ?Sized>(&self, i: usize, rng: Option<&mut R>) -> Result<Tensor> {
        let img = &self.images[i];
        let crop = match rng {
            Some(rng) => random_shift_crop(img, &self.preprocess, rng)?,
            None => center_crop(img, &self.preprocess)?,
        };
        Ok(mean_subtract(&crop))
    }

    /// Deterministic evaluation input for sample `i` (centre crop).
    pub fn eval_input(&self, i: usize) -> Result<Tensor> {
        Ok(mean_subtract(&center_crop(&self.images[i], &self.preprocess)?))
    }

    /// Indices of the training and validation samples.
    pub fn split(&self, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
        (0..self.len()).partition(|&i| !is_validation(&self.ids[i], val_fraction))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn split_fraction_is_close() {
        let n = 20_000;
        let held = (0..n).filter(|i| is_validation(&format!("{i:06}"), 0.1)).count();
        assert!((held as f64 / n as f64 - 0.1).abs() < 0.01, "{held}");
    }
}
