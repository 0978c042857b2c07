use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Variant;
use crate::error::{QfaError, Result};
use crate::supernet::SubnetConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    /// The full-precision source model.
    Float,
    /// Uniform round-to-nearest weights with no adapters.
    Rtn,
    /// Best subnet found by the search under a constraint.
    Searched,
    /// A configuration named on the command line.
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub provenance: Provenance,
    pub variant: Option<Variant>,
    /// Search budget for searched rows; `null` otherwise or when unconstrained.
    pub constraint: Option<f64>,
    pub config: Option<SubnetConfig>,
    pub avg_bit: f64,
    pub loss: f64,
    pub perplexity: f64,
    pub accuracy: f64,
    /// Stored block weight size: packed codes plus f32 factors, or f32 weights.
    pub weight_bytes: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub examples: usize,
    pub rows: Vec<EvalRow>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    provenance: &'a str,
    variant: &'a str,
    constraint: String,
    config: String,
    avg_bit: f64,
    loss: f64,
    perplexity: f64,
    accuracy: f64,
    weight_bytes: f64,
}

fn provenance_name(p: Provenance) -> &'static str {
    match p {
        Provenance::Float => "float",
        Provenance::Rtn => "rtn",
        Provenance::Searched => "searched",
        Provenance::Explicit => "explicit",
    }
}

pub(crate) fn constraint_cell(c: Option<f64>) -> String {
    c.map(|c| c.to_string()).unwrap_or_else(|| "none".to_string())
}

impl EvalReport {
    pub fn float(&self) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.provenance == Provenance::Float)
    }

    pub fn rtn(&self, bit: u8) -> Option<&EvalRow> {
        self.rows.iter().find(|r| {
            r.provenance == Provenance::Rtn
                && r.config.as_ref().is_some_and(|c| c.bits.iter().all(|&b| b == bit))
        })
    }

    pub fn searched(&self, variant: Variant, constraint: Option<f64>) -> Option<&EvalRow> {
        self.rows.iter().find(|r| {
            r.provenance == Provenance::Searched
                && r.variant == Some(variant)
                && r.constraint == constraint
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let json = dir.join("eval_report.json");
        let mut text = serde_json::to_string_pretty(self).map_err(|e| QfaError::json(&json, e))?;
        text.push('\n');
        std::fs::write(&json, text).map_err(|e| QfaError::io(&json, e))?;
        let csv_path = dir.join("eval_report.csv");
        let mut w = csv_writer(&csv_path)?;
        for r in &self.rows {
            w.serialize(CsvRow {
                provenance: provenance_name(r.provenance),
                variant: r.variant.map(|v| v.name()).unwrap_or(""),
                constraint: if r.provenance == Provenance::Searched {
                    constraint_cell(r.constraint)
                } else {
                    String::new()
                },
                config: r.config.as_ref().map(|c| c.to_string()).unwrap_or_default(),
                avg_bit: r.avg_bit,
                loss: r.loss,
                perplexity: r.perplexity,
                accuracy: r.accuracy,
                weight_bytes: r.weight_bytes,
            })
            .map_err(|e| csv_error(&csv_path, e))?;
        }
        finish_csv(w, &csv_path)
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        let text = std::fs::read_to_string(path).map_err(|e| QfaError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| QfaError::json(path, e))
    }
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> QfaError {
    QfaError::format(path, e.to_string())
}

pub(crate) fn finish_csv(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| QfaError::io(path, e))
}
