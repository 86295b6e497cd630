use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::GeometryConfig;
use crate::error::{Error, Result};
use crate::model::{HyperConfig, ModelParams, UpdateMode};
use crate::saem::{StepSchedule, TruncationConfig};

pub const FORMAT_VERSION: u32 = 1;

/// `theta` in plain arrays; `gamma_g` is stored row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaRecord {
    pub alpha: Vec<f64>,
    pub sigma_sq: f64,
    pub gamma_g: Vec<Vec<f64>>,
}

impl From<&ModelParams> for ThetaRecord {
    fn from(t: &ModelParams) -> Self {
        Self {
            alpha: t.alpha.iter().copied().collect(),
            sigma_sq: t.sigma_sq,
            gamma_g: t.gamma_g.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }
}

impl ThetaRecord {
    pub fn to_params(&self) -> Result<ModelParams> {
        let m = self.gamma_g.len();
        if let Some(row) = self.gamma_g.iter().find(|r| r.len() != m) {
            return Err(Error::Schema(format!(
                "theta.gamma_g must be square: {m} rows but a row of length {}",
                row.len()
            )));
        }
        Ok(ModelParams {
            alpha: DVector::from_column_slice(&self.alpha),
            sigma_sq: self.sigma_sq,
            gamma_g: DMatrix::from_fn(m, m, |i, j| self.gamma_g[i][j]),
        })
    }
}

/// Everything needed to reuse a fitted model. Stored as pretty JSON with
/// shortest round-trip numerals, so save/load is exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArchive {
    pub format_version: u32,
    pub geometry: GeometryConfig,
    pub hyper: HyperConfig,
    pub schedule: StepSchedule,
    pub truncation: TruncationConfig,
    pub mode: UpdateMode,
    pub seed: u64,
    pub iterations: usize,
    pub theta: ThetaRecord,
}

impl ModelArchive {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("archive serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        let found = value
            .get("format_version")
            .ok_or_else(|| Error::Schema("missing field `format_version`".into()))?
            .as_u64()
            .ok_or_else(|| Error::Schema("`format_version` must be an unsigned integer".into()))?;
        if found != FORMAT_VERSION as u64 {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION,
                found: u32::try_from(found).unwrap_or(u32::MAX),
            });
        }
        serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))
    }
}

pub fn save_model(archive: &ModelArchive, path: &Path) -> Result<()> {
    std::fs::write(path, archive.to_json()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelArchive> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ModelArchive::from_json(&text).map_err(|e| match e {
        Error::Schema(reason) => Error::Schema(format!("{}: {reason}", path.display())),
        other => other,
    })
}
