//! Procedural paired live/spoof data. Base faces are smooth blob images;
//! spoofs perturb the base inside an exact footprint, so every spoof has a
//! pixel-exact ground-truth mask and a known live counterpart.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::write_manifest;
use super::store::{DiskStore, InMemoryStore, StoredSample};
use super::{BinaryMask, DatasetManifest, Image, ImageSample, Label, SpoofMacro, Split};
use crate::error::{Error, Result};

/// Shape family used to render a spoof perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchGenerator {
    /// Full-frame tint with a fine sinusoidal moiré.
    Print,
    /// Full-frame tint with a coarser two-tone moiré.
    Replay,
    Rect,
    Ellipse,
    Eyes,
    Mouth,
    Strokes,
}

impl PatchGenerator {
    pub fn default_for(spoof_macro: SpoofMacro) -> Self {
        match spoof_macro {
            SpoofMacro::Print | SpoofMacro::None => PatchGenerator::Print,
            SpoofMacro::Replay => PatchGenerator::Replay,
            SpoofMacro::Mask3d => PatchGenerator::Ellipse,
            SpoofMacro::Makeup => PatchGenerator::Strokes,
            SpoofMacro::Partial => PatchGenerator::Eyes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpoofTypeSpec {
    #[serde(rename = "macro")]
    pub macro_type: SpoofMacro,
    pub micro: String,
    pub generator: PatchGenerator,
}

impl SpoofTypeSpec {
    pub fn new(macro_type: SpoofMacro, micro: &str, generator: PatchGenerator) -> Self {
        Self {
            macro_type,
            micro: micro.to_string(),
            generator,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EthnicityProfile {
    pub label: String,
    pub weight: f64,
    /// RGB offset applied to skin.
    pub tint: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDomainSpec {
    pub n_live: usize,
    pub n_spoof: usize,
    pub spoof_types: Vec<SpoofTypeSpec>,
    /// Global RGB offset.
    pub tint: [f64; 3],
    /// Gaussian blur in pixels.
    pub blur_sigma: f64,
    /// Global brightness offset.
    pub brightness: f64,
    /// `(H0, W0)`.
    pub image_size: (usize, usize),
    pub seed: u64,
    pub domain_id: Option<String>,
    pub ethnicities: Vec<EthnicityProfile>,
    /// Inclusive age range in years.
    pub age_range: (u32, u32),
    pub samples_per_subject: usize,
    pub test_fraction: f64,
    pub brightness_jitter: f64,
}

impl Default for SyntheticDomainSpec {
    fn default() -> Self {
        Self {
            n_live: 40,
            n_spoof: 40,
            spoof_types: vec![
                SpoofTypeSpec::new(SpoofMacro::Print, "print", PatchGenerator::Print),
                SpoofTypeSpec::new(SpoofMacro::Replay, "replay", PatchGenerator::Replay),
            ],
            tint: [0.0; 3],
            blur_sigma: 0.0,
            brightness: 0.0,
            image_size: (32, 32),
            seed: 0,
            domain_id: None,
            ethnicities: vec![EthnicityProfile {
                label: "eth_a".into(),
                weight: 1.0,
                tint: [0.0; 3],
            }],
            age_range: (20, 45),
            samples_per_subject: 4,
            test_fraction: 0.3,
            brightness_jitter: 0.03,
        }
    }
}

impl SyntheticDomainSpec {
    fn validate(&self, subset: &str) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 8 || w < 8 {
            return Err(Error::Config(format!(
                "subset {subset}: image size {h}x{w} is below the 8x8 minimum"
            )));
        }
        if self.n_spoof > 0 && self.spoof_types.is_empty() {
            return Err(Error::Config(format!("subset {subset}: n_spoof > 0 but no spoof types")));
        }
        if let Some(t) = self.spoof_types.iter().find(|t| t.macro_type == SpoofMacro::None) {
            return Err(Error::Config(format!(
                "subset {subset}: spoof type `{}` has macro `none`",
                t.micro
            )));
        }
        if self.ethnicities.is_empty() || self.ethnicities.iter().any(|e| !(e.weight >= 0.0)) {
            return Err(Error::Config(format!("subset {subset}: invalid ethnicity weights")));
        }
        if self.age_range.0 > self.age_range.1 {
            return Err(Error::Config(format!("subset {subset}: empty age range")));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!("subset {subset}: test_fraction must be in [0, 1)")));
        }
        if self.samples_per_subject == 0 {
            return Err(Error::Config(format!("subset {subset}: samples_per_subject must be positive")));
        }
        Ok(())
    }

    fn micro_types(&self) -> BTreeSet<&str> {
        self.spoof_types.iter().map(|t| t.micro.as_str()).collect()
    }
}

/// Generated manifests per subset plus the pixels behind them.
#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub subsets: BTreeMap<String, (DatasetManifest, DatasetManifest)>,
    pub store: InMemoryStore,
}

impl SyntheticBenchmark {
    pub fn train(&self, subset: &str) -> Option<&DatasetManifest> {
        self.subsets.get(subset).map(|(t, _)| t)
    }

    pub fn test(&self, subset: &str) -> Option<&DatasetManifest> {
        self.subsets.get(subset).map(|(_, t)| t)
    }
}

pub fn generate_synthetic_benchmark(
    specs: &BTreeMap<String, SyntheticDomainSpec>,
) -> Result<SyntheticBenchmark> {
    let a = specs
        .get("A")
        .ok_or_else(|| Error::ProtocolViolation("source subset A is required".into()))?;
    if let Some(b) = specs.get("B") {
        let a_types = a.micro_types();
        let overlap: Vec<&str> = b.micro_types().intersection(&a_types).copied().collect();
        if !overlap.is_empty() {
            return Err(Error::ProtocolViolation(format!(
                "subset B reuses source spoof types {overlap:?}"
            )));
        }
    }
    let mut subsets = BTreeMap::new();
    let mut store = InMemoryStore::new();
    for (subset, spec) in specs {
        spec.validate(subset)?;
        let (train, test) = generate_domain(subset, spec, &mut store)?;
        subsets.insert(subset.clone(), (train, test));
    }
    Ok(SyntheticBenchmark { subsets, store })
}

/// Writes images, masks, base images and `<subset>_<split>.csv` manifests.
pub fn write_benchmark(bench: &SyntheticBenchmark, dir: &Path) -> Result<()> {
    for (train, test) in bench.subsets.values() {
        for manifest in [train, test] {
            for s in &manifest.samples {
                let entry = bench.store.get(&s.sample_id).ok_or_else(|| {
                    Error::Data(format!("no pixels stored for `{}`", s.sample_id))
                })?;
                write_file(&dir.join(&s.path), &entry.image.to_png()?)?;
                if let (Some(p), Some(m)) = (&s.gt_mask_path, &entry.gt_mask) {
                    write_file(&dir.join(p), &m.to_png()?)?;
                }
                if let Some(base) = &entry.base_live {
                    write_file(&dir.join(DiskStore::base_path(&s.sample_id)), &base.to_png()?)?;
                }
            }
            let name = format!("{}_{}.csv", manifest.subset_id, manifest.split.as_str());
            write_manifest(manifest, &dir.join(name))?;
        }
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// splitmix64 finaliser over a running hash.
fn mix(state: u64, value: u64) -> u64 {
    let mut z = state ^ value.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(state << 6);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

struct Subject {
    face_center: (f64, f64),
    face_radii: (f64, f64),
    skin: [f64; 3],
    background: [f64; 3],
    ethnicity: String,
    age: u32,
}

#[derive(Clone, Copy)]
struct Geometry {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Geometry {
    fn eyes(&self) -> [(f64, f64); 2] {
        let dy = self.cy - 0.3 * self.ry;
        [(self.cx - 0.4 * self.rx, dy), (self.cx + 0.4 * self.rx, dy)]
    }

    fn mouth(&self) -> (f64, f64) {
        (self.cx, self.cy + 0.5 * self.ry)
    }
}

fn generate_domain(
    subset: &str,
    spec: &SyntheticDomainSpec,
    store: &mut InMemoryStore,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let domain = spec.domain_id.clone().unwrap_or_else(|| subset.to_string());
    let total = spec.n_live + spec.n_spoof;
    let n_subjects = total.div_ceil(spec.samples_per_subject).max(2);
    let root = mix(mix(spec.seed, hash_str(subset)), hash_str(&domain));

    let weight_sum: f64 = spec.ethnicities.iter().map(|e| e.weight).sum();
    let subjects: Vec<Subject> = (0..n_subjects)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(root, s as u64));
            make_subject(&mut rng, spec, weight_sum)
        })
        .collect();

    let mut order: Vec<usize> = (0..n_subjects).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(root, 0x5EED)));
    let n_test = ((n_subjects as f64 * spec.test_fraction).round() as usize)
        .clamp(usize::from(spec.test_fraction > 0.0), n_subjects - 1);
    let test_subjects: BTreeSet<usize> = order[..n_test].iter().copied().collect();

    let (h, w) = spec.image_size;
    let mut counters = vec![0usize; n_subjects];
    let mut train = Vec::new();
    let mut test = Vec::new();
    for i in 0..total {
        let (label, type_idx, subject_idx) = if i < spec.n_live {
            (Label::Live, None, i % n_subjects)
        } else {
            let j = i - spec.n_live;
            (Label::Spoof, Some((j + j / n_subjects) % spec.spoof_types.len()), j % n_subjects)
        };
        let k = counters[subject_idx];
        counters[subject_idx] += 1;
        let subject = &subjects[subject_idx];
        let sample_id = format!("{domain}-s{subject_idx:04}_{k:03}");
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(root, subject_idx as u64 + 1_000_000), k as u64));
        let (base, geom) = render_face(&mut rng, subject, spec);

        let (image, mask, base_live, spoof_macro, spoof_micro) = match type_idx {
            None => (base, BinaryMask::zeros(h, w), None, SpoofMacro::None, String::new()),
            Some(t) => {
                let st = &spec.spoof_types[t];
                let (img, mask) = apply_spoof(&mut rng, &base, geom, st);
                (img, mask, Some(base), st.macro_type, st.micro.clone())
            }
        };
        let sample = ImageSample {
            path: PathBuf::from(format!("images/{subset}/{sample_id}.png")),
            gt_mask_path: Some(PathBuf::from(format!("masks/{subset}/{sample_id}.png"))),
            sample_id: sample_id.clone(),
            label,
            spoof_macro,
            spoof_micro,
            ethnicity: subject.ethnicity.clone(),
            age: subject.age,
            illum_cluster: None,
            domain_id: domain.clone(),
        };
        store.insert(
            sample_id,
            StoredSample {
                image,
                gt_mask: Some(mask),
                base_live,
            },
        );
        if test_subjects.contains(&subject_idx) {
            test.push(sample);
        } else {
            train.push(sample);
        }
    }
    Ok((
        DatasetManifest::new(subset, Split::Train, train)?,
        DatasetManifest::new(subset, Split::Test, test)?,
    ))
}

fn make_subject(rng: &mut ChaCha8Rng, spec: &SyntheticDomainSpec, weight_sum: f64) -> Subject {
    let mut pick = rng.random_range(0.0..weight_sum.max(f64::MIN_POSITIVE));
    let mut eth = &spec.ethnicities[0];
    for e in &spec.ethnicities {
        if pick < e.weight {
            eth = e;
            break;
        }
        pick -= e.weight;
    }
    let mut skin = [0.62, 0.48, 0.40];
    for (c, v) in skin.iter_mut().enumerate() {
        *v += rng.random_range(-0.04..0.04) + eth.tint[c];
    }
    let background = [
        rng.random_range(0.2..0.5),
        rng.random_range(0.2..0.5),
        rng.random_range(0.25..0.55),
    ];
    Subject {
        face_center: (0.5 + rng.random_range(-0.04..0.04), 0.52 + rng.random_range(-0.04..0.04)),
        face_radii: (rng.random_range(0.30..0.35), rng.random_range(0.38..0.43)),
        skin,
        background,
        ethnicity: eth.label.clone(),
        age: rng.random_range(spec.age_range.0..=spec.age_range.1),
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn render_face(rng: &mut ChaCha8Rng, subject: &Subject, spec: &SyntheticDomainSpec) -> (Image, Geometry) {
    let (h, w) = spec.image_size;
    let geom = Geometry {
        cx: subject.face_center.0 + rng.random_range(-0.02..0.02),
        cy: subject.face_center.1 + rng.random_range(-0.02..0.02),
        rx: subject.face_radii.0,
        ry: subject.face_radii.1,
    };
    let brightness = spec.brightness
        + if spec.brightness_jitter > 0.0 {
            rng.random_range(-spec.brightness_jitter..spec.brightness_jitter)
        } else {
            0.0
        };
    let eyes = geom.eyes();
    let mouth = geom.mouth();
    let mut data = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let v = (y as f64 + 0.5) / h as f64;
            let d = ((u - geom.cx) / geom.rx).powi(2) + ((v - geom.cy) / geom.ry).powi(2);
            let alpha = ((1.0 - d) / 0.15).clamp(0.0, 1.0);
            let shade = (1.0 - 0.3 * d).clamp(0.6, 1.0);
            let eye_dark: f64 = eyes
                .iter()
                .map(|&(ex, ey)| 0.5 * (-((u - ex).powi(2) + (v - ey).powi(2)) / (2.0 * 0.035f64.powi(2))).exp())
                .sum();
            let lip = 0.35
                * (-((u - mouth.0).powi(2) / (2.0 * 0.08f64.powi(2)) + (v - mouth.1).powi(2) / (2.0 * 0.025f64.powi(2))))
                    .exp();
            for c in 0..3 {
                let mut face = subject.skin[c] * shade * (1.0 - eye_dark.min(0.8));
                if c > 0 {
                    face *= 1.0 - lip;
                }
                let bg = subject.background[c] * (0.9 + 0.2 * v);
                data[[c, y, x]] = bg * (1.0 - alpha) + face * alpha;
            }
        }
    }
    if spec.blur_sigma > 0.0 {
        gaussian_blur(&mut data, spec.blur_sigma);
    }
    for c in 0..3 {
        let offset = brightness + spec.tint[c];
        data.index_axis_mut(ndarray::Axis(0), c)
            .mapv_inplace(|p| quantize((p + offset).clamp(0.05, 0.95)));
    }
    (Image { data }, geom)
}

fn gaussian_blur(data: &mut Array3<f64>, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let (c, h, w) = data.dim();
    let mut tmp = data.clone();
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                tmp[[ci, y, x]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * data[[ci, y, clampi(x as isize + k as isize - radius, w)]])
                    .sum::<f64>()
                    / norm;
            }
        }
        for y in 0..h {
            for x in 0..w {
                data[[ci, y, x]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[[ci, clampi(y as isize + k as isize - radius, h), x]])
                    .sum::<f64>()
                    / norm;
            }
        }
    }
}

/// Renders a spoof from `base`; the returned mask is exactly the set of
/// pixels whose value changed.
/// Covering-material colours, outside the skin and background ranges.
const MATERIALS: [[f64; 3]; 4] = [
    [0.25, 0.75, 0.35],
    [0.30, 0.40, 0.85],
    [0.85, 0.25, 0.70],
    [0.90, 0.90, 0.90],
];
const MATERIAL_ALPHA: f64 = 0.7;

fn apply_spoof(
    rng: &mut ChaCha8Rng,
    base: &Image,
    geom: Geometry,
    spoof: &SpoofTypeSpec,
) -> (Image, BinaryMask) {
    let (_, h, w) = base.data.dim();
    let micro_hash = hash_str(&spoof.micro);
    // Texture periods in pixels, fixed per micro type.
    let period_u = 2.5 + (micro_hash % 4) as f64 * 0.5;
    let period_v = 3.0 + ((micro_hash >> 8) % 4) as f64 * 0.5;
    let phase = ((micro_hash >> 16) % 628) as f64 / 100.0;
    let material = MATERIALS[((micro_hash >> 24) % MATERIALS.len() as u64) as usize];

    let footprint = footprint(rng, h, w, geom, spoof.generator);
    let mut data = base.data.clone();
    let mut mask = BinaryMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            if !footprint[[y, x]] {
                continue;
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let delta: [f64; 3] = match spoof.generator {
                PatchGenerator::Print => {
                    let s = (2.0 * PI * (px / 4.0 + py / 8.0) + phase).sin();
                    [0.08 + 0.03 * s, 0.04 + 0.03 * s, -0.08 + 0.03 * s]
                }
                PatchGenerator::Replay => {
                    let s = (2.0 * PI * (px / 7.0 + py / 3.5)).sin();
                    let s2 = (2.0 * PI * py / 2.2).sin();
                    [-0.07 + 0.02 * s, 0.05 + 0.02 * s2, 0.09 + 0.02 * s]
                }
                _ => {
                    let t = 0.05 * (2.0 * PI * (px / period_u + py / period_v) + phase).sin();
                    let mut d = [0.0; 3];
                    for (c, dc) in d.iter_mut().enumerate() {
                        *dc = MATERIAL_ALPHA * (material[c] - base.data[[c, y, x]]) + t;
                    }
                    d
                }
            };
            let mut changed = false;
            for (c, dc) in delta.iter().enumerate() {
                let old = base.data[[c, y, x]];
                let new = quantize(old + dc);
                changed |= new != old;
                data[[c, y, x]] = new;
            }
            if changed {
                mask.data[[y, x]] = 1;
            }
        }
    }
    (Image { data }, mask)
}

fn footprint(rng: &mut ChaCha8Rng, h: usize, w: usize, g: Geometry, generator: PatchGenerator) -> Array2<bool> {
    type Shape = Box<dyn Fn(f64, f64) -> bool>;
    let ellipse = |cx: f64, cy: f64, rx: f64, ry: f64| -> Shape {
        Box::new(move |u, v| ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2) <= 1.0)
    };
    let rect = |cx: f64, cy: f64, hx: f64, hy: f64| -> Shape {
        Box::new(move |u, v| (u - cx).abs() <= hx && (v - cy).abs() <= hy)
    };
    let shapes: Vec<Shape> = match generator {
        PatchGenerator::Print | PatchGenerator::Replay => vec![Box::new(|_, _| true)],
        PatchGenerator::Rect => vec![rect(
            g.cx + rng.random_range(-0.06..0.06),
            g.cy + rng.random_range(-0.12..0.12),
            rng.random_range(0.14..0.22),
            rng.random_range(0.10..0.16),
        )],
        PatchGenerator::Ellipse => vec![ellipse(
            g.cx,
            g.cy + rng.random_range(-0.03..0.03),
            g.rx * rng.random_range(0.7..0.85),
            g.ry * rng.random_range(0.7..0.85),
        )],
        PatchGenerator::Eyes => {
            let r = rng.random_range(0.09..0.12);
            g.eyes().iter().map(|&(ex, ey)| ellipse(ex, ey, r, r * 0.8)).collect()
        }
        PatchGenerator::Mouth => {
            let (mx, my) = g.mouth();
            vec![ellipse(mx, my, rng.random_range(0.14..0.18), rng.random_range(0.07..0.09))]
        }
        PatchGenerator::Strokes => {
            let thickness = rng.random_range(0.05..0.07);
            let mut v: Vec<Shape> = g
                .eyes()
                .iter()
                .map(|&(ex, ey)| rect(ex, ey - 0.1, 0.1, thickness))
                .collect();
            let (mx, my) = g.mouth();
            v.push(ellipse(mx, my, 0.13, 0.06));
            v
        }
    };
    let mut fp = Array2::from_shape_fn((h, w), |(y, x)| {
        let u = (x as f64 + 0.5) / w as f64;
        let v = (y as f64 + 0.5) / h as f64;
        shapes.iter().any(|s| s(u, v))
    });
    if !fp.iter().any(|&b| b) {
        let y = ((g.cy * h as f64) as usize).min(h - 1);
        let x = ((g.cx * w as f64) as usize).min(w - 1);
        fp[[y, x]] = true;
    }
    fp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SampleStore;

    fn spec(seed: u64) -> SyntheticDomainSpec {
        SyntheticDomainSpec {
            n_live: 12,
            n_spoof: 12,
            seed,
            ..Default::default()
        }
    }

    fn target_spec(seed: u64) -> SyntheticDomainSpec {
        SyntheticDomainSpec {
            spoof_types: vec![
                SpoofTypeSpec::new(SpoofMacro::Mask3d, "mannequin", PatchGenerator::Ellipse),
                SpoofTypeSpec::new(SpoofMacro::Makeup, "cosmetic", PatchGenerator::Strokes),
                SpoofTypeSpec::new(SpoofMacro::Partial, "funny_eyes", PatchGenerator::Eyes),
            ],
            ..spec(seed)
        }
    }

    fn specs(a: SyntheticDomainSpec, b: Option<SyntheticDomainSpec>) -> BTreeMap<String, SyntheticDomainSpec> {
        let mut m = BTreeMap::new();
        m.insert("A".to_string(), a);
        if let Some(b) = b {
            m.insert("B".to_string(), b);
        }
        m
    }

    #[test]
    fn zero_spoof_gives_only_live_with_empty_masks() {
        let b = generate_synthetic_benchmark(&specs(SyntheticDomainSpec { n_spoof: 0, ..spec(1) }, None)).unwrap();
        let (train, test) = &b.subsets["A"];
        for s in train.samples.iter().chain(&test.samples) {
            assert_eq!(s.label, Label::Live);
            assert_eq!(b.store.gt_mask(s).unwrap().unwrap().count_ones(), 0);
        }
    }

    #[test]
    fn identical_seeds_are_identical() {
        let x = generate_synthetic_benchmark(&specs(spec(5), Some(target_spec(6)))).unwrap();
        let y = generate_synthetic_benchmark(&specs(spec(5), Some(target_spec(6)))).unwrap();
        assert_eq!(x.subsets, y.subsets);
        for (train, test) in x.subsets.values() {
            for s in train.samples.iter().chain(&test.samples) {
                let a = x.store.get(&s.sample_id).unwrap();
                let b = y.store.get(&s.sample_id).unwrap();
                assert_eq!(a.image.to_png().unwrap(), b.image.to_png().unwrap());
                assert_eq!(a.gt_mask, b.gt_mask);
            }
        }
    }

    #[test]
    fn holdout_types_are_disjoint_from_source() {
        let b = generate_synthetic_benchmark(&specs(spec(1), Some(SyntheticDomainSpec { n_spoof: 36, ..target_spec(2) }))).unwrap();
        let micro = |m: &DatasetManifest| -> BTreeSet<String> {
            m.spoofs().map(|s| s.spoof_micro.clone()).collect()
        };
        let a_types: BTreeSet<String> = micro(&b.subsets["A"].0).union(&micro(&b.subsets["A"].1)).cloned().collect();
        let b_test = micro(&b.subsets["B"].1);
        assert_eq!(
            b_test,
            ["cosmetic", "funny_eyes", "mannequin"].iter().map(|s| s.to_string()).collect()
        );
        assert!(a_types.is_disjoint(&b_test));
    }

    #[test]
    fn overlapping_types_violate_protocol() {
        let err = generate_synthetic_benchmark(&specs(spec(1), Some(spec(2)))).unwrap_err();
        assert!(matches!(err, Error::ProtocolViolation(_)));
    }

    #[test]
    fn missing_source_or_tiny_images_rejected() {
        let mut m = BTreeMap::new();
        m.insert("B".to_string(), spec(1));
        assert!(matches!(generate_synthetic_benchmark(&m), Err(Error::ProtocolViolation(_))));
        let tiny = SyntheticDomainSpec { image_size: (4, 32), ..spec(1) };
        assert!(matches!(generate_synthetic_benchmark(&specs(tiny, None)), Err(Error::Config(_))));
    }

    #[test]
    fn spoof_difference_matches_mask_support_exactly() {
        let b = generate_synthetic_benchmark(&specs(spec(3), Some(target_spec(4)))).unwrap();
        for (train, test) in b.subsets.values() {
            for s in train.samples.iter().chain(&test.samples) {
                let entry = b.store.get(&s.sample_id).unwrap();
                assert!(entry.image.in_unit_range());
                let mask = entry.gt_mask.as_ref().unwrap();
                match s.label {
                    Label::Live => assert_eq!(mask.count_ones(), 0),
                    Label::Spoof => {
                        assert!(mask.count_ones() > 0);
                        let base = entry.base_live.as_ref().unwrap();
                        let (_, h, w) = base.data.dim();
                        for y in 0..h {
                            for x in 0..w {
                                let differs = (0..3).any(|c| entry.image.data[[c, y, x]] != base.data[[c, y, x]]);
                                assert_eq!(differs, mask.data[[y, x]] == 1, "{} at ({y},{x})", s.sample_id);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn splits_are_subject_disjoint() {
        let b = generate_synthetic_benchmark(&specs(spec(9), Some(target_spec(10)))).unwrap();
        for (train, test) in b.subsets.values() {
            assert!(train.subjects().is_disjoint(&test.subjects()));
            assert!(!train.is_empty() && !test.is_empty());
        }
    }
}
