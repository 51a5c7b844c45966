//! `report.json`: versioned evaluation summary of one run.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use fasw_core::metrics::{MetricsReport, RoundedMetrics};
use fasw_core::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub manifest: String,
    pub metrics: MetricsReport,
    pub rounded: RoundedMetrics,
}

impl Evaluation {
    pub fn new(manifest: &Path, metrics: MetricsReport) -> Self {
        Self {
            manifest: manifest.display().to_string(),
            rounded: metrics.rounded(),
            metrics,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub run_id: Option<String>,
    pub command: String,
    pub seed: Option<u64>,
    /// Keyed by evaluation name, normally the manifest file stem.
    pub evaluations: BTreeMap<String, Evaluation>,
    /// Command-specific scalars, e.g. mean spoof-mask IoU.
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Report {
    pub fn new(command: &str, run_id: Option<String>, seed: Option<u64>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            run_id,
            command: command.to_string(),
            seed,
            evaluations: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let version = value.get("schema_version").and_then(|v| v.as_u64());
        if version != Some(REPORT_SCHEMA_VERSION as u64) {
            return Err(Error::Input(format!(
                "`{}`: unsupported report schema version {version:?}",
                path.display()
            )));
        }
        Ok(serde_json::from_value(value)?)
    }

    /// Metric values keyed by evaluation name, without file locations, for
    /// run-to-run comparison.
    pub fn metrics_json(&self) -> Result<String> {
        let values: BTreeMap<&str, (&MetricsReport, &RoundedMetrics)> = self
            .evaluations
            .iter()
            .map(|(k, e)| (k.as_str(), (&e.metrics, &e.rounded)))
            .collect();
        Ok(serde_json::to_string(&values)?)
    }
}

/// Unique evaluation name for `path` given the names already taken.
pub fn evaluation_name(path: &Path, taken: &BTreeMap<String, Evaluation>) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "eval".into());
    let mut name = stem.clone();
    let mut k = 2;
    while taken.contains_key(&name) {
        name = format!("{stem}_{k}");
        k += 1;
    }
    name
}
