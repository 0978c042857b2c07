use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{DEFAULT_INIT_STD, DEFAULT_RANK};
use crate::error::{QfaError, Result};
use crate::sampler::{ScheduleOrder, SamplerMode, DEFAULT_BIN_WIDTH, DEFAULT_CLAMP};
use crate::search::{SearchBudget, DEFAULT_SHRINK_FRACTION};
use crate::supernet::{AdapterMode, BitSet, Dims, SupernetOptions};
use crate::train::{CorpusSpec, PretrainConfig, TrainConfig};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "QFA_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupernetSection {
    pub bits: BitSet,
    pub group_size: usize,
    pub rank: usize,
    pub init_std: f32,
}

impl Default for SupernetSection {
    fn default() -> Self {
        SupernetSection {
            bits: BitSet::default(),
            group_size: 16,
            rank: DEFAULT_RANK,
            init_std: DEFAULT_INIT_STD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub phase1_n: usize,
    pub phase2_n: usize,
    pub max_rejection_tries: usize,
    pub shrink_fraction: f64,
    pub clamp: f64,
    /// Average bit-width budgets to search; `null` searches without one.
    pub constraints: Vec<Option<f64>>,
    /// Validation examples scoring each candidate.
    pub eval_examples: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            phase1_n: 100,
            phase2_n: 50,
            max_rejection_tries: 10_000,
            shrink_fraction: DEFAULT_SHRINK_FRACTION,
            clamp: DEFAULT_CLAMP,
            constraints: vec![Some(2.0), Some(2.5), Some(3.0), Some(3.5), Some(4.0)],
            eval_examples: 4096,
        }
    }
}

impl SearchSection {
    pub fn budget(&self, constraint: Option<f64>) -> SearchBudget {
        SearchBudget {
            phase1_n: self.phase1_n,
            phase2_n: self.phase2_n,
            constraint,
            max_rejection_tries: self.max_rejection_tries,
            shrink_fraction: self.shrink_fraction,
            clamp: self.clamp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub samples: usize,
    pub bin_width: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            samples: 100_000,
            bin_width: DEFAULT_BIN_WIDTH,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Validation examples for report rows; 0 uses the whole split.
    pub examples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { examples: 0 }
    }
}

/// Training variants compared in the ablation table. `Main` trains with the
/// configured settings; the others change one or two of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Main,
    Uniform,
    Shared,
    SharedUniform,
    SlShort,
    SlLong,
    LowFirst,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Main,
        Variant::Uniform,
        Variant::Shared,
        Variant::SharedUniform,
        Variant::SlShort,
        Variant::SlLong,
        Variant::LowFirst,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Main => "main",
            Variant::Uniform => "uniform",
            Variant::Shared => "shared",
            Variant::SharedUniform => "shared-uniform",
            Variant::SlShort => "sl-short",
            Variant::SlLong => "sl-long",
            Variant::LowFirst => "low-first",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths::under(Path::new("run"))
    }
}

impl Paths {
    pub fn under(root: &Path) -> Self {
        Paths {
            corpus: root.join("corpus"),
            checkpoints: root.join("checkpoints"),
            reports: root.join("reports"),
        }
    }
}

/// Every setting of one experiment. `train.seed` and `train.schedule.bits`
/// are derived from `seed` and `supernet.bits` by [`ExperimentConfig::normalize`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dims: Dims,
    pub corpus: CorpusSpec,
    pub pretrain: PretrainConfig,
    pub supernet: SupernetSection,
    pub train: TrainConfig,
    /// Ablation variants trained besides `main`.
    pub ablations: Vec<Variant>,
    pub schedule_short: u64,
    pub schedule_long: u64,
    /// Training steps between resumable checkpoints; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub search: SearchSection,
    pub analysis: AnalysisSection,
    pub eval: EvalSection,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            dims: Dims::default(),
            corpus: CorpusSpec::default(),
            pretrain: PretrainConfig::default(),
            supernet: SupernetSection::default(),
            train: TrainConfig::default(),
            ablations: Variant::ALL[1..].to_vec(),
            schedule_short: 1000,
            schedule_long: 16_000,
            checkpoint_every: 2000,
            search: SearchSection::default(),
            analysis: AnalysisSection::default(),
            eval: EvalSection::default(),
            paths: Paths::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a JSON document; missing keys take their defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| QfaError::config(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| QfaError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                self.seed = v
                    .trim()
                    .parse()
                    .map_err(|_| QfaError::config(format!("{SEED_ENV}={v:?} is not a u64")))?;
                Ok(())
            }
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(e) => Err(QfaError::config(format!("{SEED_ENV}: {e}"))),
        }
    }

    /// Fills derived fields and checks every section.
    pub fn normalize(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.train.schedule.bits = self.supernet.bits.clone();
        self.dims.validate()?;
        if self.corpus.vocab != self.dims.vocab {
            return Err(QfaError::config(format!(
                "corpus vocabulary {} differs from model vocabulary {}",
                self.corpus.vocab, self.dims.vocab
            )));
        }
        if self.dims.vocab > 256 {
            return Err(QfaError::config("token files store u8 symbols; vocabulary must be at most 256"));
        }
        self.corpus.validate(self.dims.context)?;
        if self.pretrain.steps == 0 || self.pretrain.batch_size == 0 || !(self.pretrain.lr > 0.0) {
            return Err(QfaError::config("pretraining needs positive steps, batch size and lr"));
        }
        let g = self.supernet.group_size;
        if g == 0 || self.dims.hidden % g != 0 {
            return Err(QfaError::config(format!(
                "hidden size {} not divisible by group size {g}",
                self.dims.hidden
            )));
        }
        if self.supernet.rank == 0 || !(self.supernet.init_std >= 0.0) {
            return Err(QfaError::config("adapter rank must be positive and init_std non-negative"));
        }
        self.train.validate()?;
        if self.schedule_short == 0 || self.schedule_long == 0 {
            return Err(QfaError::config("schedule lengths must be positive"));
        }
        let mut seen = std::collections::BTreeSet::new();
        self.ablations.retain(|v| *v != Variant::Main && seen.insert(*v));
        for &c in &self.search.constraints {
            self.search.budget(c).validate(&self.supernet.bits)?;
        }
        if self.search.eval_examples == 0 {
            return Err(QfaError::config("search.eval_examples must be at least 1"));
        }
        if self.analysis.samples == 0 || !(self.analysis.bin_width > 0.0) {
            return Err(QfaError::config("analysis needs samples and a positive bin width"));
        }
        Ok(self)
    }

    /// `main` followed by the ablations, each once.
    pub fn variants(&self) -> Vec<Variant> {
        let mut v = vec![Variant::Main];
        v.extend(self.ablations.iter().copied().filter(|&x| x != Variant::Main));
        v
    }

    pub fn supernet_options(&self, mode: AdapterMode) -> SupernetOptions {
        SupernetOptions {
            bits: self.supernet.bits.clone(),
            group_size: self.supernet.group_size,
            rank: self.supernet.rank,
            init_std: self.supernet.init_std,
            adapter_mode: mode,
            head_trainable: self.train.head_trainable,
        }
    }

    pub fn train_config(&self, variant: Variant) -> TrainConfig {
        let mut t = self.train.clone();
        match variant {
            Variant::Uniform => t.sampler_mode = SamplerMode::Uniform,
            Variant::Shared => t.adapter_mode = AdapterMode::Shared,
            Variant::SharedUniform => {
                t.adapter_mode = AdapterMode::Shared;
                t.sampler_mode = SamplerMode::Uniform;
            }
            Variant::SlShort => t.schedule.schedule_len = self.schedule_short,
            Variant::SlLong => t.schedule.schedule_len = self.schedule_long,
            Variant::LowFirst => t.schedule.order = ScheduleOrder::LowToHighFirst,
            Variant::Main => {}
        }
        t
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
