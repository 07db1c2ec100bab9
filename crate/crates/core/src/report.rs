//! Structured experiment results, serialized as JSON and CSV.

use serde::{Deserialize, Serialize};

use crate::corruptions::CorruptionGrid;
use crate::error::{Error, Result};
use crate::labelnoise::LabelNoiseCurve;
use crate::ooddetect::DetectionReport;
use crate::training::EpochLog;

pub const SCHEMA_VERSION: u32 = 1;

/// Accuracy under one attack setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustPoint {
    /// Exact ε used, on the `[0, 1]` pixel scale.
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: u32,
    pub experiment: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub robust: Vec<RobustPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<CorruptionGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_noise: Option<LabelNoiseCurve>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub training: Vec<EpochLog>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn new(experiment: impl Into<String>) -> Self {
        EvalReport {
            schema: SCHEMA_VERSION,
            experiment: experiment.into(),
            clean_accuracy: None,
            robust: Vec::new(),
            corruption: None,
            label_noise: None,
            detection: None,
            training: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(text)?;
        if r.schema != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported report schema {} (expected {SCHEMA_VERSION})",
                r.schema
            )));
        }
        Ok(r)
    }
}

/// Render rows as CSV text with a header line.
pub fn csv_table(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
