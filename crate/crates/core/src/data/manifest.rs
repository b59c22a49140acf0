//! JSON-lines dataset manifest.
//!
//! The first line is a header `{"alphabet": "0123456789", "max_len": 5}`;
//! every following non-blank line is one sample:
//!
//! ```text
//! {"id": "000017", "image": "images/000017.png", "label": "175",
//!  "boxes": [[x, y, w, h], ...]}
//! ```
//!
//! `label` is written in alphabet characters. A label longer than `max_len`
//! marks an overflow sample; it is loaded as its first `max_len` characters
//! with the overflow flag set, and written back as those characters plus
//! `"overflow": true`. Image paths are relative to the manifest's directory.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequence::SequenceLabel;
use crate::tensor::Tensor;

use super::preprocess::BBox;

/// Ordered character set; a character's position is its class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet(Vec<char>);

impl Alphabet {
    pub fn new(chars: &str) -> Result<Self> {
        let v: Vec<char> = chars.chars().collect();
        if v.is_empty() {
            return Err(Error::InvalidArgument("alphabet must not be empty".into()));
        }
        for (i, c) in v.iter().enumerate() {
            if v[..i].contains(c) {
                return Err(Error::InvalidArgument(format!("alphabet repeats {c:?}")));
            }
        }
        Ok(Self(v))
    }

    pub fn digits() -> Self {
        Self::new("0123456789").expect("digit alphabet")
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.0
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|ch| self.0.iter().position(|&c| c == ch).ok_or(Error::UnknownChar { ch }))
            .collect()
    }

    pub fn decode(&self, indices: &[usize]) -> Result<String> {
        indices
            .iter()
            .map(|&i| {
                self.0.get(i).copied().ok_or(Error::LabelIndex { index: i, alphabet_size: self.0.len() })
            })
            .collect()
    }
}

impl std::fmt::Display for Alphabet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.iter().try_for_each(|c| write!(f, "{c}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    /// Absolute, or relative to the working directory.
    Path(PathBuf),
    Memory(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageSource,
    /// Per-character boxes; may be empty when unknown.
    pub boxes: Vec<BBox>,
    pub label: SequenceLabel,
}

impl Sample {
    /// Loads (or clones) the image as an `H × W × channels` tensor in `[0, 1]`.
    pub fn load_image(&self, channels: usize) -> Result<Tensor> {
        match &self.image {
            ImageSource::Memory(t) => Ok(t.clone()),
            ImageSource::Path(p) => {
                if !p.exists() {
                    return Err(Error::MissingImage { id: self.id.clone(), path: p.clone() });
                }
                load_image(p, channels)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub alphabet: Alphabet,
    pub max_len: usize,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderRecord {
    alphabet: String,
    max_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    image: String,
    label: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    overflow: bool,
    #[serde(default)]
    boxes: Vec<[f64; 4]>,
}

impl DatasetManifest {
    pub fn new(alphabet: Alphabet, max_len: usize) -> Self {
        Self { alphabet, max_len, samples: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks label indices, label lengths and box counts.
    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            s.label.validate(self.max_len, self.alphabet.len())?;
            let ok = s.boxes.is_empty()
                || if s.label.overflow { s.boxes.len() > self.max_len } else { s.boxes.len() == s.label.chars.len() };
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "sample {}: {} boxes for a {}-character label",
                    s.id,
                    s.boxes.len(),
                    s.label.chars.len()
                )));
            }
        }
        Ok(())
    }

    /// Writes the manifest. In-memory images are saved as PNGs under
    /// `images/` next to the manifest first.
    pub fn write(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut w = BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer(&mut w, &HeaderRecord { alphabet: self.alphabet.to_string(), max_len: self.max_len })?;
        writeln!(w)?;
        for s in &self.samples {
            let image = match &s.image {
                ImageSource::Path(p) => p
                    .strip_prefix(dir)
                    .unwrap_or(p)
                    .to_string_lossy()
                    .into_owned(),
                ImageSource::Memory(t) => {
                    let rel = format!("images/{}.png", s.id);
                    let abs = dir.join(&rel);
                    if let Some(parent) = abs.parent() {
                        fs::create_dir_all(parent)?;
                    }
                    save_image(&abs, t)?;
                    rel
                }
            };
            let rec = SampleRecord {
                id: s.id.clone(),
                image,
                label: self.alphabet.decode(&s.label.chars)?,
                overflow: s.label.overflow,
                boxes: s.boxes.iter().map(|b| [b.x, b.y, b.w, b.h]).collect(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the manifest and loads it back, so every sample is path-backed.
    pub fn persist(&self, path: &Path) -> Result<DatasetManifest> {
        self.write(path)?;
        load_manifest(path)
    }
}

/// Parses and validates a manifest. Image files must exist but are not read.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let shown = path.display().to_string();
    let parse_err = |line: usize, msg: String| Error::Parse { path: shown.clone(), line, msg };
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));

    let (n, header) = loop {
        match lines.next() {
            None => return Err(parse_err(1, "missing header record".into())),
            Some((n, l)) => {
                let l = l?;
                if !l.trim().is_empty() {
                    break (n, l);
                }
            }
        }
    };
    let header: HeaderRecord = serde_json::from_str(&header).map_err(|e| parse_err(n, e.to_string()))?;
    let alphabet = Alphabet::new(&header.alphabet).map_err(|e| parse_err(n, e.to_string()))?;
    if header.max_len == 0 {
        return Err(parse_err(n, "max_len must be >= 1".into()));
    }
    let mut manifest = DatasetManifest::new(alphabet, header.max_len);

    for (n, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| parse_err(n, e.to_string()))?;
        let chars = manifest.alphabet.encode(&rec.label).map_err(|e| match e {
            Error::UnknownChar { ch } => Error::LabelOutOfAlphabet { id: rec.id.clone(), line: n, ch },
            other => other,
        })?;
        let mut label = SequenceLabel::from_full(chars, manifest.max_len);
        label.overflow |= rec.overflow;
        let image_path = dir.join(&rec.image);
        if !image_path.exists() {
            return Err(Error::MissingImage { id: rec.id, path: image_path });
        }
        manifest.samples.push(Sample {
            id: rec.id,
            image: ImageSource::Path(image_path),
            boxes: rec.boxes.iter().map(|b| BBox::new(b[0], b[1], b[2], b[3])).collect(),
            label,
        });
    }
    manifest.validate()?;
    Ok(manifest)
}

/// Reads a PNG (or any format the `image` crate decodes) as `H × W × C`
/// in `[0, 1]`, converting to 1 or 3 channels.
pub fn load_image(path: &Path, channels: usize) -> Result<Tensor> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match channels {
        1 => img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        3 => img.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        c => return Err(Error::InvalidArgument(format!("unsupported channel count {c}"))),
    };
    Tensor::from_hwc(h, w, channels, data)
}

/// Quantises a `[0, 1]` image to 8 bits and writes it as PNG.
pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w, c) = image.hwc()?;
    let bytes: Vec<u8> = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let dynimg = match c {
        1 => DynamicImage::ImageLuma8(GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer size")),
        3 => DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer size")),
        _ => return Err(Error::InvalidArgument(format!("cannot save {c}-channel image"))),
    };
    dynimg.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Rounds an image to the values it will have after a PNG round trip.
pub fn quantize(image: &Tensor) -> Tensor {
    image.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}
