//! Files written by commands: metrics, tuning reports, run manifests.

use std::collections::BTreeMap;
use std::path::Path;

use hybrid_inference::training::TuneReport;
use hybrid_inference::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Mode};

/// Test MSE of one estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub mode: Mode,
    pub seed: u64,
    pub train_size: usize,
    pub test_mse: f64,
    /// Estimate CSV, relative to the metrics file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimates: Option<String>,
}

impl Metrics {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("metrics: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// Tuning result as written to disk; all vectors run over the grid points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneFile {
    pub sigma_star: f64,
    pub lambda_star: f64,
    pub grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    /// `null` where the smoother failed.
    pub val_mse_per_point: Vec<Option<f64>>,
}

impl From<&TuneReport> for TuneFile {
    fn from(r: &TuneReport) -> Self {
        TuneFile {
            sigma_star: r.sigma_star,
            lambda_star: r.lambda_star,
            grid: r.points.iter().map(|p| p.sigma).collect(),
            lambda_grid: r.points.iter().map(|p| p.lambda).collect(),
            val_mse_per_point: r.points.iter().map(|p| p.val_mse).collect(),
        }
    }
}

impl TuneFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let t: TuneFile = serde_json::from_str(text).map_err(|e| Error::Data(format!("tune report: {e}")))?;
        let n = t.grid.len();
        if t.lambda_grid.len() != n || t.val_mse_per_point.len() != n {
            return Err(Error::Data("tune report vectors differ in length".into()));
        }
        Ok(t)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tune report serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: Option<ExperimentConfig>,
    pub duration_secs: f64,
    pub metrics: BTreeMap<String, f64>,
    pub outputs: Vec<String>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: Option<ExperimentConfig>) -> Self {
        RunManifest {
            command: command.to_owned(),
            version: version_string(),
            config,
            duration_secs: 0.0,
            metrics: BTreeMap::new(),
            outputs: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data(format!("manifest: {e}")))
    }
}

/// `v<crate version>`, with the commit appended when built from a git
/// checkout that exported `HINF_GIT_DESCRIBE`.
pub fn version_string() -> String {
    match option_env!("HINF_GIT_DESCRIBE") {
        Some(d) if !d.is_empty() => d.to_owned(),
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

/// Write through a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}
