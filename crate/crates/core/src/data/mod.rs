//! Samples, manifests, image stores and the synthetic paired live/spoof
//! benchmark generator.

mod batch;
mod manifest;
mod store;
mod synth;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{sample_batch, Batch};
pub use manifest::{load_manifest, load_manifest_as, write_manifest, MANIFEST_HEADER};
pub use store::{AccessRecorder, DiskStore, InMemoryStore, SampleStore, StoredSample};
pub use synth::{
    generate_synthetic_benchmark, write_benchmark, EthnicityProfile, PatchGenerator,
    SpoofTypeSpec, SyntheticBenchmark, SyntheticDomainSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Live,
    Spoof,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Live => "live",
            Label::Spoof => "spoof",
        }
    }

    pub fn is_spoof(self) -> bool {
        self == Label::Spoof
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Label::Live),
            "spoof" => Ok(Label::Spoof),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpoofMacro {
    None,
    Print,
    Replay,
    Mask3d,
    Makeup,
    Partial,
}

impl SpoofMacro {
    pub fn as_str(self) -> &'static str {
        match self {
            SpoofMacro::None => "none",
            SpoofMacro::Print => "print",
            SpoofMacro::Replay => "replay",
            SpoofMacro::Mask3d => "mask3d",
            SpoofMacro::Makeup => "makeup",
            SpoofMacro::Partial => "partial",
        }
    }
}

impl FromStr for SpoofMacro {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "none" => SpoofMacro::None,
            "print" => SpoofMacro::Print,
            "replay" => SpoofMacro::Replay,
            "mask3d" => SpoofMacro::Mask3d,
            "makeup" => SpoofMacro::Makeup,
            "partial" => SpoofMacro::Partial,
            other => return Err(format!("unknown spoof_macro `{other}`")),
        })
    }
}

/// One manifest row: annotations plus the locations of pixels and mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub sample_id: String,
    pub path: PathBuf,
    pub label: Label,
    pub spoof_macro: SpoofMacro,
    pub spoof_micro: String,
    pub ethnicity: String,
    pub age: u32,
    pub illum_cluster: Option<u32>,
    pub domain_id: String,
    pub gt_mask_path: Option<PathBuf>,
}

impl ImageSample {
    /// Subject identifier: the sample id up to its last `_`.
    pub fn subject(&self) -> &str {
        subject_of(&self.sample_id)
    }

    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        match self.label {
            Label::Live if self.spoof_macro != SpoofMacro::None => Err(format!(
                "live sample carries spoof_macro `{}`",
                self.spoof_macro.as_str()
            )),
            Label::Spoof if self.spoof_macro == SpoofMacro::None => {
                Err("spoof sample has spoof_macro `none`".into())
            }
            _ => Ok(()),
        }
    }
}

pub fn subject_of(sample_id: &str) -> &str {
    sample_id.rsplit_once('_').map_or(sample_id, |(s, _)| s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<ImageSample>,
    pub split: Split,
    pub subset_id: String,
}

impl DatasetManifest {
    pub fn new(subset_id: impl Into<String>, split: Split, samples: Vec<ImageSample>) -> Result<Self> {
        let m = Self {
            samples,
            split,
            subset_id: subset_id.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn empty(subset_id: impl Into<String>, split: Split) -> Self {
        Self {
            samples: Vec::new(),
            split,
            subset_id: subset_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn lives(&self) -> impl Iterator<Item = &ImageSample> {
        self.samples.iter().filter(|s| s.label == Label::Live)
    }

    pub fn spoofs(&self) -> impl Iterator<Item = &ImageSample> {
        self.samples.iter().filter(|s| s.label == Label::Spoof)
    }

    /// Unique ids and per-row label invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, s) in self.samples.iter().enumerate() {
            if !seen.insert(s.sample_id.as_str()) {
                return Err(Error::Schema {
                    row: i + 1,
                    message: format!("duplicate sample_id `{}`", s.sample_id),
                });
            }
            s.check_invariants().map_err(|message| Error::Schema {
                row: i + 1,
                message: format!("{}: {message}", s.sample_id),
            })?;
        }
        Ok(())
    }

    /// Concatenation of two manifests (ids must stay unique).
    pub fn union(&self, other: &DatasetManifest, subset_id: &str) -> Result<Self> {
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        Self::new(subset_id, self.split, samples)
    }

    pub fn subjects(&self) -> std::collections::BTreeSet<&str> {
        self.samples.iter().map(|s| s.subject()).collect()
    }
}

/// RGB image `3 × H × W`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub data: Array3<f64>,
}

impl Image {
    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let (_, h, w) = self.data.dim();
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            for c in 0..3 {
                px.0[c] = to_u8(self.data[[c, y as usize, x as usize]]);
            }
        }
        encode_png(image::DynamicImage::ImageRgb8(buf))
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
        });
        Ok(Self { data })
    }
}

/// Hard `H × W` mask with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub data: Array2<u8>,
}

impl BinaryMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            data: Array2::zeros((h, w)),
        }
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(|v| v as f64)
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let (h, w) = self.data.dim();
        let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([if self.data[[y as usize, x as usize]] != 0 { 255 } else { 0 }])
        });
        encode_png(image::DynamicImage::ImageLuma8(buf))
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_luma8();
        let (w, h) = img.dimensions();
        let data = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            u8::from(img.get_pixel(x as u32, y as u32).0[0] >= 128)
        });
        Ok(Self { data })
    }
}

impl fmt::Display for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in self.data.rows() {
            let line: String = row.iter().map(|&v| if v != 0 { '#' } else { '.' }).collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// Grayscale PNG of a soft map in `[0, 1]`.
pub fn soft_map_png(map: &Array2<f64>) -> Result<Vec<u8>> {
    let (h, w) = map.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_u8(map[[y as usize, x as usize]])])
    });
    encode_png(image::DynamicImage::ImageLuma8(buf))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png(img: image::DynamicImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}
