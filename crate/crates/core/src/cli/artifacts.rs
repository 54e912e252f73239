//! Persisted artifacts: schema tags, content hashes and atomic writes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::CliError;
use crate::attribution::AttributionReport;
use crate::calibration::{GridEvaluation, TestEvaluation};
use crate::prediction_set::{StopReason, ThresholdTuple};

pub const CALIBRATION_SCHEMA: &str = "corap.calibration/v1";
pub const PREDICTIONS_SCHEMA: &str = "corap.predictions/v1";
pub const SIMULATION_SCHEMA: &str = "corap.simulation/v1";
pub const ATTRIBUTION_SCHEMA: &str = "corap.attribution/v1";
pub const REPORT_SCHEMA: &str = "corap.report/v1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// Serializes `value` as pretty JSON and returns the content hash.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<String, CliError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(sha256_hex(text.as_bytes()))
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Other(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Other(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Reads an artifact, checking its schema tag. Returns it with its hash.
pub fn read_artifact<T: for<'de> Deserialize<'de>>(
    path: &Path,
    schema: &str,
) -> Result<(T, String), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?;
    let found = value
        .get("schema")
        .and_then(|s| s.as_str())
        .unwrap_or("<none>");
    if found != schema {
        return Err(CliError::Artifact(format!(
            "{}: expected schema {schema}, found {found}",
            path.display()
        )));
    }
    let parsed = serde_json::from_value(value)
        .map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?;
    Ok((parsed, sha256_hex(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRef {
    pub path: String,
    pub sha256: String,
}

impl InputRef {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: file_sha256(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub schema: String,
    pub config: RunConfig,
    pub model_tag: String,
    pub calibration_data: InputRef,
    pub test_data: Option<InputRef>,
    pub abstained: bool,
    pub chosen: Option<ThresholdTuple>,
    pub valid_set: Vec<ThresholdTuple>,
    pub evaluations: GridEvaluation,
    pub test: Option<TestEvaluation>,
    pub stream: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub sample_index: usize,
    pub steps: Vec<String>,
    pub answer: String,
    pub sequence_quality: f64,
    pub answer_quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub members: Vec<MemberRecord>,
    pub stopped_at: usize,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionsArtifact {
    pub schema: String,
    pub config: RunConfig,
    pub calibration_sha256: String,
    pub lambda: ThresholdTuple,
    pub input_data: InputRef,
    pub records: Vec<PredictionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub seed: u64,
    pub abstained: bool,
    pub lambda: Option<ThresholdTuple>,
    pub failures: Option<usize>,
    pub true_risk: Option<f64>,
    pub test_loss: Option<f64>,
    pub test_mean_set_size: Option<f64>,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationArtifact {
    pub schema: String,
    pub config: RunConfig,
    pub model_tag: String,
    pub trials: Vec<TrialRow>,
    pub valid_fraction: f64,
    pub abstention_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionArtifact {
    pub schema: String,
    pub config: RunConfig,
    pub target_id: String,
    pub training_data: InputRef,
    pub calibration_data: InputRef,
    pub calibration_sha256: Option<String>,
    pub examples_report_sha256: Option<String>,
    pub report: AttributionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportInput {
    pub path: String,
    pub schema: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub schema: String,
    pub inputs: Vec<ReportInput>,
    pub outputs: Vec<String>,
}
