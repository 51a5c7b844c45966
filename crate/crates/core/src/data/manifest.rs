use std::fs;
use std::path::{Path, PathBuf};

use super::{DatasetManifest, ImageSample, Label, SpoofMacro, Split};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 10] = [
    "sample_id",
    "path",
    "label",
    "spoof_macro",
    "spoof_micro",
    "ethnicity",
    "age",
    "illum_cluster",
    "domain_id",
    "gt_mask_path",
];

/// Loads a manifest, inferring subset and split from a `<subset>_<split>.csv`
/// file name (falls back to the file stem and `train`).
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("custom")
        .to_string();
    let (subset, split) = match stem.rsplit_once('_') {
        Some((subset, "train")) => (subset.to_string(), Split::Train),
        Some((subset, "test")) => (subset.to_string(), Split::Test),
        _ => (stem, Split::Train),
    };
    load_manifest_as(path, &subset, split)
}

pub fn load_manifest_as(path: &Path, subset_id: &str, split: Split) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, subset_id, split)
}

pub(crate) fn parse_manifest(text: &str, subset_id: &str, split: Split) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let mut columns = [0usize; MANIFEST_HEADER.len()];
    for (slot, name) in columns.iter_mut().zip(MANIFEST_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema {
                row: 0,
                message: format!("missing column `{name}`"),
            })?;
    }

    let mut samples = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let field = |k: usize| record.get(columns[k]).unwrap_or("").trim();
        let schema = |message: String| Error::Schema { row, message };

        let sample_id = field(0).to_string();
        if sample_id.is_empty() {
            return Err(schema("empty sample_id".into()));
        }
        if !seen.insert(sample_id.clone()) {
            return Err(schema(format!("duplicate sample_id `{sample_id}`")));
        }
        let label: Label = field(2).parse().map_err(|e| schema(format!("{sample_id}: {e}")))?;
        let spoof_macro: SpoofMacro = field(3).parse().map_err(|e| schema(format!("{sample_id}: {e}")))?;
        let age = field(6)
            .parse::<u32>()
            .map_err(|e| schema(format!("{sample_id}: bad age `{}`: {e}", field(6))))?;
        let illum_cluster = match field(7) {
            "" => None,
            v => Some(
                v.parse::<u32>()
                    .map_err(|e| schema(format!("{sample_id}: bad illum_cluster `{v}`: {e}")))?,
            ),
        };
        let gt_mask_path = match field(9) {
            "" => None,
            v => Some(PathBuf::from(v)),
        };
        let sample = ImageSample {
            sample_id,
            path: PathBuf::from(field(1)),
            label,
            spoof_macro,
            spoof_micro: field(4).to_string(),
            ethnicity: field(5).to_string(),
            age,
            illum_cluster,
            domain_id: field(8).to_string(),
            gt_mask_path,
        };
        sample
            .check_invariants()
            .map_err(|e| schema(format!("{}: {e}", sample.sample_id)))?;
        samples.push(sample);
    }
    Ok(DatasetManifest {
        samples,
        split,
        subset_id: subset_id.to_string(),
    })
}

pub(crate) fn manifest_to_csv(manifest: &DatasetManifest) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(MANIFEST_HEADER)?;
    for s in &manifest.samples {
        w.write_record([
            s.sample_id.as_str(),
            &path_str(&s.path),
            s.label.as_str(),
            s.spoof_macro.as_str(),
            &s.spoof_micro,
            &s.ethnicity,
            &s.age.to_string(),
            &s.illum_cluster.map(|c| c.to_string()).unwrap_or_default(),
            &s.domain_id,
            &s.gt_mask_path.as_deref().map(path_str).unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let text = manifest_to_csv(manifest)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
