//! Experiment pipeline: configuration, on-disk layout and the stages the
//! command-line tool runs.

mod config;
mod report;
mod stages;

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{
    AnalysisSection, EvalSection, ExperimentConfig, Paths, SearchSection, SupernetSection, Variant,
    SEED_ENV,
};
pub use report::{EvalReport, EvalRow, Provenance};
pub use stages::{
    analyze_sampler, eval, gen_corpus, pipeline, pretrain, quantize, report, search, train_supernet,
    SamplerAnalysis,
};

use crate::error::QfaError;
use crate::supernet::AdapterMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenCorpus,
    Pretrain,
    Quantize,
    TrainSupernet,
    AnalyzeSampler,
    Search,
    Eval,
    Report,
}

impl Stage {
    pub const PIPELINE: [Stage; 8] = [
        Stage::GenCorpus,
        Stage::Pretrain,
        Stage::Quantize,
        Stage::TrainSupernet,
        Stage::AnalyzeSampler,
        Stage::Search,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::Pretrain => "pretrain",
            Stage::Quantize => "quantize",
            Stage::TrainSupernet => "train-supernet",
            Stage::AnalyzeSampler => "analyze-sampler",
            Stage::Search => "search",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A failure tagged with the stage that raised it.
#[derive(Debug, thiserror::Error)]
#[error("{stage} failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: QfaError,
}

pub type StageResult<T> = std::result::Result<T, StageError>;

pub(crate) trait StageContext<T> {
    fn stage(self, stage: Stage) -> StageResult<T>;
}

impl<T> StageContext<T> for crate::Result<T> {
    fn stage(self, stage: Stage) -> StageResult<T> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// Where each artifact lives.
#[derive(Clone, Debug)]
pub struct Layout {
    paths: Paths,
}

impl Layout {
    pub fn new(paths: &Paths) -> Self {
        Layout {
            paths: paths.clone(),
        }
    }

    pub fn corpus(&self) -> &Path {
        &self.paths.corpus
    }

    pub fn float(&self) -> PathBuf {
        self.paths.checkpoints.join("float")
    }

    pub fn quantized(&self, mode: AdapterMode) -> PathBuf {
        let name = match mode {
            AdapterMode::PerBit => "per-bit",
            AdapterMode::Shared => "shared",
        };
        self.paths.checkpoints.join("quantized").join(name)
    }

    pub fn rtn(&self, bit: u8) -> PathBuf {
        self.paths.checkpoints.join("rtn").join(format!("bit{bit}"))
    }

    pub fn supernet(&self, variant: Variant) -> PathBuf {
        self.paths.checkpoints.join("supernet").join(variant.name())
    }

    pub fn train_log(&self, variant: Variant) -> PathBuf {
        self.supernet(variant).join("train_log.jsonl")
    }

    pub fn reports(&self) -> &Path {
        &self.paths.reports
    }

    pub fn sampler(&self) -> PathBuf {
        self.paths.reports.join("sampler")
    }

    pub fn search(&self, variant: Variant, constraint: Option<f64>) -> PathBuf {
        self.paths
            .reports
            .join("search")
            .join(variant.name())
            .join(constraint_label(constraint))
    }

    pub fn eval_report(&self) -> PathBuf {
        self.paths.reports.join("eval_report.json")
    }
}

/// Directory-safe name of a constraint, e.g. `c2.50` or `none`.
pub fn constraint_label(constraint: Option<f64>) -> String {
    match constraint {
        Some(c) => format!("c{c:.2}"),
        None => "none".to_string(),
    }
}
