//! `qfa`: command-line driver for the quantized supernet pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use qfa_core::harness::{self, ExperimentConfig, Paths, StageError, Variant};
use qfa_core::sampler::{SamplerMode, ScheduleOrder};
use qfa_core::supernet::{AdapterMode, SubnetConfig};
use qfa_core::QfaError;

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;

#[derive(Parser)]
#[command(name = "qfa", version, about = "Once-for-all mixed-precision quantized supernet")]
struct Cli {
    /// JSON experiment configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Place corpus, checkpoints and reports under this directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Random seed (overrides the file and QFA_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the effective configuration to stdout before running.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/validation token files.
    GenCorpus {
        #[arg(long)]
        train_tokens: Option<usize>,
        #[arg(long)]
        val_tokens: Option<usize>,
    },
    /// Train the full-precision model.
    Pretrain {
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
    },
    /// Quantize the float model into supernets and round-to-nearest baselines.
    Quantize,
    /// Train supernet adapters for the main run and its ablations.
    TrainSupernet {
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        select: VariantFlags,
        /// Continue from the last saved step.
        #[arg(long)]
        resume: bool,
    },
    /// Sample statistics of average bit-width under both samplers.
    AnalyzeSampler {
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        bin_width: Option<f64>,
    },
    /// Search subnets on trained supernets.
    Search {
        #[command(flatten)]
        select: VariantFlags,
        #[command(flatten)]
        budget: SearchFlags,
    },
    /// Evaluate baselines, searched subnets and explicit configurations.
    Eval {
        #[command(flatten)]
        select: VariantFlags,
        /// Constraints whose searched subnets to score (defaults to the config list).
        #[arg(long = "constraint", value_parser = parse_constraint)]
        constraints: Vec<Constraint>,
        /// Explicit configuration on the main supernet, e.g. `2,3,4,4,3,2,2,4`.
        #[arg(long = "subnet", value_parser = parse_subnet)]
        subnets: Vec<SubnetConfig>,
        /// Validation examples to score; 0 uses the whole split.
        #[arg(long)]
        examples: Option<usize>,
    },
    /// Emit frontier, ablation, histogram and training-curve CSVs.
    Report {
        #[command(flatten)]
        select: VariantFlags,
    },
    /// Run every stage in order.
    Pipeline {
        /// Skip completed stages and continue interrupted training.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        budget: SearchFlags,
    },
}

#[derive(Args, Default)]
struct TrainFlags {
    #[arg(long)]
    train_steps: Option<u64>,
    #[arg(long)]
    train_batch_size: Option<usize>,
    #[arg(long)]
    train_lr: Option<f32>,
    #[arg(long, value_enum)]
    sampler_mode: Option<SamplerArg>,
    #[arg(long, value_enum)]
    adapter_mode: Option<AdapterArg>,
    #[arg(long)]
    schedule_len: Option<u64>,
    #[arg(long, value_enum)]
    order: Option<OrderArg>,
    #[arg(long)]
    clamp: Option<f64>,
    #[arg(long)]
    paths_per_step: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f32>,
    #[arg(long)]
    beta1: Option<f32>,
    #[arg(long)]
    beta2: Option<f32>,
    #[arg(long)]
    eps: Option<f32>,
    /// Final learning rate as a fraction of the initial one.
    #[arg(long)]
    final_lr_fraction: Option<f32>,
    #[arg(long)]
    head_trainable: Option<bool>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    eval_examples: Option<usize>,
}

#[derive(Args, Default)]
struct SearchFlags {
    /// Average bit-width budget, or `none`; repeatable.
    #[arg(long = "constraint", value_parser = parse_constraint)]
    constraints: Vec<Constraint>,
    /// Random constrained samples before shrinking.
    #[arg(long)]
    phase1_n: Option<usize>,
    /// Samples drawn from the shrunk space.
    #[arg(long)]
    phase2_n: Option<usize>,
    /// Validation examples used to score each candidate.
    #[arg(long)]
    search_examples: Option<usize>,
}

#[derive(Args, Default)]
struct VariantFlags {
    /// Restrict to these variants (default: main and the configured ablations).
    #[arg(long = "variant", value_parser = parse_variant)]
    variants: Vec<Variant>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Uniform,
    ResourceBalanced,
}

#[derive(Clone, Copy, ValueEnum)]
enum AdapterArg {
    PerBit,
    Shared,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    HighToLowFirst,
    LowToHighFirst,
}

#[derive(Clone, Copy)]
struct Constraint(Option<f64>);

fn parse_constraint(s: &str) -> Result<Constraint, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(Constraint(None));
    }
    s.parse::<f64>()
        .map(|c| Constraint(Some(c)))
        .map_err(|_| format!("expected a number or `none`, got {s:?}"))
}

fn parse_subnet(s: &str) -> Result<SubnetConfig, String> {
    s.split(',')
        .map(|b| b.trim().parse::<u8>().map_err(|_| format!("bad bit-width {b:?}")))
        .collect::<Result<Vec<_>, _>>()
        .map(SubnetConfig::new)
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
        format!("unknown variant {s:?}; expected one of {}", names.join(", "))
    })
}

impl TrainFlags {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        let t = &mut cfg.train;
        set(&mut t.steps, self.train_steps);
        set(&mut t.batch_size, self.train_batch_size);
        set(&mut t.lr, self.train_lr);
        set(&mut t.paths_per_step, self.paths_per_step);
        set(&mut t.weight_decay, self.weight_decay);
        set(&mut t.beta1, self.beta1);
        set(&mut t.beta2, self.beta2);
        set(&mut t.eps, self.eps);
        set(&mut t.final_lr_fraction, self.final_lr_fraction);
        set(&mut t.head_trainable, self.head_trainable);
        set(&mut t.eval_every, self.eval_every);
        set(&mut t.eval_examples, self.eval_examples);
        set(&mut t.schedule.schedule_len, self.schedule_len);
        set(&mut t.schedule.clamp, self.clamp);
        if let Some(m) = self.sampler_mode {
            t.sampler_mode = match m {
                SamplerArg::Uniform => SamplerMode::Uniform,
                SamplerArg::ResourceBalanced => SamplerMode::ResourceBalanced,
            };
        }
        if let Some(m) = self.adapter_mode {
            t.adapter_mode = match m {
                AdapterArg::PerBit => AdapterMode::PerBit,
                AdapterArg::Shared => AdapterMode::Shared,
            };
        }
        if let Some(o) = self.order {
            t.schedule.order = match o {
                OrderArg::HighToLowFirst => ScheduleOrder::HighToLowFirst,
                OrderArg::LowToHighFirst => ScheduleOrder::LowToHighFirst,
            };
        }
    }
}

impl SearchFlags {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if !self.constraints.is_empty() {
            cfg.search.constraints = self.constraints.iter().map(|c| c.0).collect();
        }
        set(&mut cfg.search.phase1_n, self.phase1_n);
        set(&mut cfg.search.phase2_n, self.phase2_n);
        set(&mut cfg.search.eval_examples, self.search_examples);
    }
}

impl VariantFlags {
    fn resolve(&self, cfg: &ExperimentConfig) -> Vec<Variant> {
        if self.variants.is_empty() {
            cfg.variants()
        } else {
            let mut v = self.variants.clone();
            v.dedup();
            v
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Defaults, then the file, then `QFA_SEED`, then flags.
fn load_config(cli: &Cli) -> Result<ExperimentConfig, QfaError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(dir) = &cli.out {
        cfg.paths = Paths::under(dir);
    }
    match &cli.command {
        Command::GenCorpus {
            train_tokens,
            val_tokens,
        } => {
            set(&mut cfg.corpus.train_tokens, *train_tokens);
            set(&mut cfg.corpus.val_tokens, *val_tokens);
        }
        Command::Pretrain {
            steps,
            batch_size,
            lr,
        } => {
            set(&mut cfg.pretrain.steps, *steps);
            set(&mut cfg.pretrain.batch_size, *batch_size);
            set(&mut cfg.pretrain.lr, *lr);
        }
        Command::TrainSupernet { train, .. } => train.apply(&mut cfg),
        Command::AnalyzeSampler { samples, bin_width } => {
            set(&mut cfg.analysis.samples, *samples);
            set(&mut cfg.analysis.bin_width, *bin_width);
        }
        Command::Search { budget, .. } => budget.apply(&mut cfg),
        Command::Eval {
            constraints,
            examples,
            ..
        } => {
            if !constraints.is_empty() {
                cfg.search.constraints = constraints.iter().map(|c| c.0).collect();
            }
            set(&mut cfg.eval.examples, *examples);
        }
        Command::Pipeline { train, budget, .. } => {
            train.apply(&mut cfg);
            budget.apply(&mut cfg);
        }
        Command::Quantize | Command::Report { .. } => {}
    }
    cfg.normalize()
}

fn run(cli: &Cli, cfg: &ExperimentConfig) -> Result<(), StageError> {
    match &cli.command {
        Command::GenCorpus { .. } => harness::gen_corpus(cfg).map(drop),
        Command::Pretrain { .. } => harness::pretrain(cfg).map(drop),
        Command::Quantize => harness::quantize(cfg),
        Command::TrainSupernet { select, resume, .. } => {
            harness::train_supernet(cfg, &select.resolve(cfg), *resume)
        }
        Command::AnalyzeSampler { .. } => harness::analyze_sampler(cfg).map(drop),
        Command::Search { select, .. } => harness::search(cfg, &select.resolve(cfg)),
        Command::Eval {
            select, subnets, ..
        } => harness::eval(cfg, &select.resolve(cfg), subnets).map(drop),
        Command::Report { select } => harness::report(cfg, &select.resolve(cfg)),
        Command::Pipeline { resume, .. } => harness::pipeline(cfg, *resume).map(drop),
    }
}

fn exit_code(e: &QfaError) -> u8 {
    match e {
        QfaError::Config(_) => EXIT_CONFIG,
        QfaError::Infeasible(_) | QfaError::Budget { .. } => EXIT_INFEASIBLE,
        _ => EXIT_STAGE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(match exit_code(&e) {
                EXIT_INFEASIBLE => EXIT_INFEASIBLE,
                _ => EXIT_CONFIG,
            });
        }
    };
    if cli.print_config {
        print!("{}", cfg.to_json());
    }
    match run(&cli, &cfg).context("qfa") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            let code = e
                .downcast_ref::<StageError>()
                .map(|s| exit_code(&s.source))
                .unwrap_or(EXIT_STAGE);
            ExitCode::from(code)
        }
    }
}
