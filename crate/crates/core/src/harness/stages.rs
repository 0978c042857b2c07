use std::path::Path;

use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::report::{constraint_cell, csv_error, csv_writer, finish_csv};
use super::{
    EvalReport, EvalRow, ExperimentConfig, Layout, Provenance, Stage, StageContext, StageError,
    StageResult, Variant,
};
use crate::checkpoint::{
    checkpoint_digest, load_float, load_subnet, load_supernet, save_float, save_subnet,
    save_supernet, MANIFEST,
};
use crate::error::{QfaError, Result};
use crate::quant::{quantize as rtn_quantize, QuantSpec};
use crate::sampler::{collect_stats, draw_configs, uniform_variance, BitSchedule, SampleStats, SamplerMode};
use crate::search::{self as subnet_search, pareto_report, write_frontier_csv, MetricKind, SearchReport};
use crate::supernet::{build_supernet, extract_subnet, AdapterMode, QuantizedSubnet, SubnetConfig};
use crate::tensor::rng::streams;
use crate::tensor::Rng;
use crate::train::{
    evaluate, generate_corpus, pretrain_float, train_supernet_until, Corpus, Dataset, EvalMetrics,
    LogEntry, TrainLog, TrainState,
};

/// Pretraining losses are logged as means over windows of this many steps.
const PRETRAIN_LOG_WINDOW: usize = 100;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| QfaError::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| QfaError::json(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| QfaError::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| QfaError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| QfaError::json(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| QfaError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| QfaError::io(path, e))
}

/// Writes the effective configuration next to a stage's artifacts.
fn echo(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    write_text(&dir.join("config.json"), &cfg.to_json())
}

fn config_digest(cfg: &ExperimentConfig) -> String {
    Sha256::digest(cfg.to_json().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Serialize, Deserialize, PartialEq)]
struct StageMarker {
    stage: Stage,
    config_sha256: String,
}

fn marker_path(cfg: &ExperimentConfig, stage: Stage) -> std::path::PathBuf {
    cfg.paths
        .reports
        .join("stages")
        .join(format!("{}.json", stage.name()))
}

fn mark_done(cfg: &ExperimentConfig, stage: Stage) -> StageResult<()> {
    let marker = StageMarker {
        stage,
        config_sha256: config_digest(cfg),
    };
    write_json(&marker_path(cfg, stage), &marker).stage(stage)
}

fn is_done(cfg: &ExperimentConfig, stage: Stage) -> bool {
    read_json::<StageMarker>(&marker_path(cfg, stage)).is_ok_and(|m| {
        m == StageMarker {
            stage,
            config_sha256: config_digest(cfg),
        }
    })
}

fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let corpus = Corpus::load(Layout::new(&cfg.paths).corpus(), cfg.dims.vocab)?;
    Ok((
        Dataset::from_tokens(&corpus.train, cfg.dims.context)?,
        Dataset::from_tokens(&corpus.val, cfg.dims.context)?,
    ))
}

fn eval_set(cfg: &ExperimentConfig, val: &Dataset) -> Dataset {
    if cfg.eval.examples == 0 {
        val.clone()
    } else {
        val.strided_subset(cfg.eval.examples)
    }
}

#[derive(Serialize)]
struct CorpusSummary<'a> {
    seed: u64,
    spec: &'a crate::train::CorpusSpec,
    train_tokens: usize,
    val_tokens: usize,
    /// Occurrences of each symbol in the training split.
    train_symbol_counts: Vec<u64>,
}

pub fn gen_corpus(cfg: &ExperimentConfig) -> StageResult<Corpus> {
    let s = Stage::GenCorpus;
    let layout = Layout::new(&cfg.paths);
    info!("generating corpus in {}", layout.corpus().display());
    let corpus = generate_corpus(&cfg.corpus, cfg.seed);
    corpus.save(layout.corpus()).stage(s)?;
    let mut counts = vec![0u64; corpus.vocab];
    corpus.train.iter().for_each(|&t| counts[t as usize] += 1);
    let summary = CorpusSummary {
        seed: cfg.seed,
        spec: &cfg.corpus,
        train_tokens: corpus.train.len(),
        val_tokens: corpus.val.len(),
        train_symbol_counts: counts,
    };
    write_json(&layout.corpus().join("corpus.json"), &summary).stage(s)?;
    echo(layout.corpus(), cfg).stage(s)?;
    mark_done(cfg, s)?;
    Ok(corpus)
}

#[derive(Serialize)]
struct LossWindow {
    step: usize,
    loss: f64,
}

pub fn pretrain(cfg: &ExperimentConfig) -> StageResult<EvalMetrics> {
    let s = Stage::Pretrain;
    let layout = Layout::new(&cfg.paths);
    let (train, val) = load_data(cfg).stage(s)?;
    info!("pretraining float model for {} steps", cfg.pretrain.steps);
    let (model, losses) = pretrain_float(&train, cfg.dims, &cfg.pretrain, cfg.seed).stage(s)?;
    let dir = layout.float();
    save_float(&dir, &model).stage(s)?;
    let mut log = String::new();
    for (i, w) in losses.chunks(PRETRAIN_LOG_WINDOW).enumerate() {
        let entry = LossWindow {
            step: i * PRETRAIN_LOG_WINDOW + w.len(),
            loss: w.iter().sum::<f64>() / w.len() as f64,
        };
        log.push_str(&serde_json::to_string(&entry).expect("serializes"));
        log.push('\n');
    }
    write_text(&dir.join("pretrain_log.jsonl"), &log).stage(s)?;
    let metrics = evaluate(&eval_set(cfg, &val), |ctx| model.forward(ctx)).stage(s)?;
    info!("float validation loss {:.4}", metrics.loss);
    write_json(&dir.join("metrics.json"), &metrics).stage(s)?;
    echo(&dir, cfg).stage(s)?;
    mark_done(cfg, s)?;
    Ok(metrics)
}

fn needed_modes(cfg: &ExperimentConfig) -> Vec<AdapterMode> {
    let mut modes = Vec::new();
    for v in cfg.variants() {
        let mode = cfg.train_config(v).adapter_mode;
        if !modes.contains(&mode) {
            modes.push(mode);
        }
    }
    modes
}

/// Builds the untrained supernets and the round-to-nearest baselines.
pub fn quantize(cfg: &ExperimentConfig) -> StageResult<()> {
    let s = Stage::Quantize;
    let layout = Layout::new(&cfg.paths);
    let float = load_float(&layout.float()).stage(s)?;
    for mode in needed_modes(cfg) {
        let mut rng = Rng::new(cfg.seed).stream(streams::ADAPTER_INIT);
        let model = build_supernet(&float, &cfg.supernet_options(mode), &mut rng).stage(s)?;
        let dir = layout.quantized(mode);
        save_supernet(&dir, &model, None).stage(s)?;
        echo(&dir, cfg).stage(s)?;
    }
    for &bit in cfg.supernet.bits.as_slice() {
        let spec = QuantSpec::new(bit, cfg.supernet.group_size).stage(s)?;
        let layers = float
            .blocks
            .iter()
            .map(|w| rtn_quantize(w, spec))
            .collect::<Result<Vec<_>>>()
            .stage(s)?;
        let subnet = QuantizedSubnet {
            dims: cfg.dims,
            config: SubnetConfig::uniform(bit, cfg.dims.layers),
            embedding: float.embedding.clone(),
            layers,
            head: float.head.clone(),
        };
        save_subnet(&layout.rtn(bit), &subnet).stage(s)?;
    }
    mark_done(cfg, s)
}

fn truncate_log(log: TrainLog, next_step: u64) -> TrainLog {
    TrainLog {
        entries: log
            .entries
            .into_iter()
            .filter(|e| match e {
                LogEntry::Step(r) => r.step < next_step,
                LogEntry::Eval(r) => r.step <= next_step,
            })
            .collect(),
    }
}

fn read_train_log(path: &Path) -> Result<TrainLog> {
    let text = std::fs::read_to_string(path).map_err(|e| QfaError::io(path, e))?;
    TrainLog::from_jsonl(&text).map_err(|e| QfaError::json(path, e))
}

fn train_variant(
    cfg: &ExperimentConfig,
    variant: Variant,
    train: &Dataset,
    val: &Dataset,
    resume: bool,
) -> Result<TrainLog> {
    let layout = Layout::new(&cfg.paths);
    let tc = cfg.train_config(variant);
    let dir = layout.supernet(variant);
    let log_path = layout.train_log(variant);
    let resumed = if resume && dir.join(MANIFEST).exists() {
        let (model, state) = load_supernet(&dir)?;
        state.map(|st| (model, st))
    } else {
        None
    };
    let (mut model, mut state, mut log) = match resumed {
        Some((model, state)) => {
            info!("{variant}: resuming at step {}", state.next_step);
            let log = truncate_log(read_train_log(&log_path)?, state.next_step);
            (model, state, log)
        }
        None => {
            let (model, _) = load_supernet(&layout.quantized(tc.adapter_mode))?;
            (model, TrainState::default(), TrainLog::default())
        }
    };
    info!("{variant}: training to step {}", tc.steps);
    loop {
        let until = match cfg.checkpoint_every {
            0 => tc.steps,
            k => (state.next_step + k).min(tc.steps),
        };
        log.extend(train_supernet_until(&mut model, &tc, &mut state, train, val, until)?);
        save_supernet(&dir, &model, Some(&state))?;
        write_text(&log_path, &log.to_jsonl())?;
        if state.next_step >= tc.steps {
            break;
        }
    }
    echo(&dir, cfg)?;
    Ok(log)
}

/// Trains each variant's supernet, resuming from saved progress if asked.
pub fn train_supernet(cfg: &ExperimentConfig, variants: &[Variant], resume: bool) -> StageResult<()> {
    let s = Stage::TrainSupernet;
    let (train, val) = load_data(cfg).stage(s)?;
    for &v in variants {
        train_variant(cfg, v, &train, &val, resume).stage(s)?;
    }
    mark_done(cfg, s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerAnalysis {
    pub layers: usize,
    pub samples: usize,
    pub schedule: BitSchedule,
    /// `σ²/L` for the uniform sampler.
    pub uniform_variance_closed_form: f64,
    pub uniform: SampleStats,
    pub resource_balanced: SampleStats,
}

fn write_histogram(path: &Path, stats: &SampleStats) -> Result<()> {
    let mut w = csv_writer(path)?;
    for b in &stats.histogram {
        w.serialize(b).map_err(|e| csv_error(path, e))?;
    }
    finish_csv(w, path)
}

/// Distribution of average bit-width under both samplers.
pub fn analyze_sampler(cfg: &ExperimentConfig) -> StageResult<SamplerAnalysis> {
    let s = Stage::AnalyzeSampler;
    let layout = Layout::new(&cfg.paths);
    let schedule = cfg.train.schedule.clone();
    let layers = cfg.dims.layers;
    let n = cfg.analysis.samples;
    let stats = |mode: SamplerMode, index: u64| -> Result<SampleStats> {
        let mut rng = Rng::derive(cfg.seed, streams::ANALYSIS, index);
        let configs = draw_configs(&mut rng, mode, &schedule, layers, n)?;
        collect_stats(&configs, &schedule.bits, cfg.analysis.bin_width)
    };
    let analysis = SamplerAnalysis {
        layers,
        samples: n,
        uniform_variance_closed_form: uniform_variance(layers, &schedule.bits),
        uniform: stats(SamplerMode::Uniform, 0).stage(s)?,
        resource_balanced: stats(SamplerMode::ResourceBalanced, 1).stage(s)?,
        schedule,
    };
    let dir = layout.sampler();
    write_json(&dir.join("stats.json"), &analysis).stage(s)?;
    write_histogram(&dir.join("histogram_uniform.csv"), &analysis.uniform).stage(s)?;
    write_histogram(
        &dir.join("histogram_resource_balanced.csv"),
        &analysis.resource_balanced,
    )
    .stage(s)?;
    echo(&dir, cfg).stage(s)?;
    mark_done(cfg, s)?;
    Ok(analysis)
}

/// Search streams are keyed by the constraint value so that adding or
/// removing constraints leaves the others' results unchanged.
fn search_stream_index(constraint: Option<f64>) -> u64 {
    match constraint {
        Some(c) => (c * 1000.0).round() as u64,
        None => u64::MAX,
    }
}

#[derive(Serialize, Deserialize)]
struct SearchSummary {
    variant: Variant,
    checkpoint_sha256: String,
    constraints: Vec<SearchReport>,
}

/// Searches every constraint on each variant's trained supernet.
pub fn search(cfg: &ExperimentConfig, variants: &[Variant]) -> StageResult<()> {
    let s = Stage::Search;
    let layout = Layout::new(&cfg.paths);
    let (_, val) = load_data(cfg).stage(s)?;
    let subset = val.strided_subset(cfg.search.eval_examples);
    for &variant in variants {
        let ckpt = layout.supernet(variant);
        let before = checkpoint_digest(&ckpt).stage(s)?;
        let (model, _) = load_supernet(&ckpt).stage(s)?;
        let mut reports = Vec::new();
        for &c in &cfg.search.constraints {
            let mut rng = Rng::derive(cfg.seed, streams::SEARCH, search_stream_index(c));
            let eval_fn =
                |config: &SubnetConfig| Ok(evaluate(&subset, |ctx| model.forward(config, ctx))?.loss);
            let out = subnet_search::search(
                cfg.dims.layers,
                &model.bits,
                eval_fn,
                MetricKind::Loss,
                &cfg.search.budget(c),
                &mut rng,
            )
            .stage(s)?;
            info!(
                "{variant} {}: best {} loss {:.4}",
                constraint_cell(c),
                out.best.config,
                out.best.metric
            );
            let dir = layout.search(variant, c);
            std::fs::create_dir_all(&dir)
                .map_err(|e| QfaError::io(&dir, e))
                .stage(s)?;
            out.write_trace(&dir.join("trace.jsonl")).stage(s)?;
            let report = out.report();
            write_json(&dir.join("report.json"), &report).stage(s)?;
            let frontier = pareto_report(&out.trace, out.kind).stage(s)?;
            write_frontier_csv(&dir.join("frontier.csv"), &frontier).stage(s)?;
            reports.push(report);
        }
        let after = checkpoint_digest(&ckpt).stage(s)?;
        if after != before {
            return Err(StageError {
                stage: s,
                source: QfaError::domain(format!("checkpoint {} changed during search", ckpt.display())),
            });
        }
        let summary = SearchSummary {
            variant,
            checkpoint_sha256: before,
            constraints: reports,
        };
        let dir = layout.search(variant, None);
        let dir = dir.parent().expect("variant directory");
        write_json(&dir.join("summary.json"), &summary).stage(s)?;
    }
    echo(&layout.reports().join("search"), cfg).stage(s)?;
    mark_done(cfg, s)
}

fn row(
    provenance: Provenance,
    variant: Option<Variant>,
    constraint: Option<f64>,
    subnet: &QuantizedSubnet,
    data: &Dataset,
) -> Result<EvalRow> {
    let m = evaluate(data, |ctx| subnet.forward(ctx))?;
    Ok(EvalRow {
        provenance,
        variant,
        constraint,
        config: Some(subnet.config.clone()),
        avg_bit: subnet.avg_bit(),
        loss: m.loss,
        perplexity: m.perplexity,
        accuracy: m.accuracy,
        weight_bytes: subnet.weight_bytes(),
    })
}

/// Scores the float model, the round-to-nearest baselines, every searched
/// subnet and any explicit configurations on the validation split.
pub fn eval(cfg: &ExperimentConfig, variants: &[Variant], explicit: &[SubnetConfig]) -> StageResult<EvalReport> {
    let s = Stage::Eval;
    let layout = Layout::new(&cfg.paths);
    let (_, val) = load_data(cfg).stage(s)?;
    let data = eval_set(cfg, &val);
    let mut rows = Vec::new();

    let float = load_float(&layout.float()).stage(s)?;
    let m = evaluate(&data, |ctx| float.forward(ctx)).stage(s)?;
    let d = cfg.dims.hidden as f64;
    rows.push(EvalRow {
        provenance: Provenance::Float,
        variant: None,
        constraint: None,
        config: None,
        avg_bit: 32.0,
        loss: m.loss,
        perplexity: m.perplexity,
        accuracy: m.accuracy,
        weight_bytes: 4.0 * d * d * cfg.dims.layers as f64,
    });
    for &bit in cfg.supernet.bits.as_slice() {
        let subnet = load_subnet(&layout.rtn(bit)).stage(s)?;
        rows.push(row(Provenance::Rtn, None, None, &subnet, &data).stage(s)?);
    }
    for &variant in variants {
        let mut model = None;
        for &c in &cfg.search.constraints {
            let path = layout.search(variant, c).join("report.json");
            if !path.exists() {
                warn!("{variant} {}: no search report, skipped", constraint_cell(c));
                continue;
            }
            let report: SearchReport = read_json(&path).stage(s)?;
            if model.is_none() {
                model = Some(load_supernet(&layout.supernet(variant)).stage(s)?.0);
            }
            let subnet = extract_subnet(model.as_ref().expect("loaded"), &report.best_config).stage(s)?;
            rows.push(row(Provenance::Searched, Some(variant), c, &subnet, &data).stage(s)?);
        }
    }
    if !explicit.is_empty() {
        let (model, _) = load_supernet(&layout.supernet(Variant::Main)).stage(s)?;
        for config in explicit {
            let subnet = extract_subnet(&model, config).stage(s)?;
            rows.push(row(Provenance::Explicit, Some(Variant::Main), None, &subnet, &data).stage(s)?);
        }
    }
    let report = EvalReport {
        seed: cfg.seed,
        examples: data.len(),
        rows,
    };
    std::fs::create_dir_all(layout.reports())
        .map_err(|e| QfaError::io(layout.reports(), e))
        .stage(s)?;
    report.save(layout.reports()).stage(s)?;
    echo(layout.reports(), cfg).stage(s)?;
    mark_done(cfg, s)?;
    Ok(report)
}

#[derive(Serialize)]
struct FrontierRow {
    constraint: String,
    avg_bit: f64,
    loss: f64,
    perplexity: f64,
}

#[derive(Serialize)]
struct AblationRow {
    variant: &'static str,
    adapter_mode: &'static str,
    sampler_mode: &'static str,
    schedule_len: u64,
    order: &'static str,
    constraint: String,
    avg_bit: f64,
    loss: f64,
    perplexity: f64,
}

#[derive(Serialize)]
struct HistogramRow {
    sampler: &'static str,
    bin_low: f64,
    bin_high: f64,
    count: u64,
}

#[derive(Serialize)]
struct CurveRow {
    variant: &'static str,
    step: u64,
    bit: u8,
    loss: f64,
}

/// Figure data: the searched frontier, the ablation table, sampler
/// histograms and training curves.
pub fn report(cfg: &ExperimentConfig, variants: &[Variant]) -> StageResult<()> {
    let s = Stage::Report;
    let layout = Layout::new(&cfg.paths);
    let dir = layout.reports();
    let eval = EvalReport::load(&layout.eval_report()).stage(s)?;

    let path = dir.join("frontier.csv");
    let mut w = csv_writer(&path).stage(s)?;
    for &c in &cfg.search.constraints {
        if let Some(r) = eval.searched(Variant::Main, c) {
            w.serialize(FrontierRow {
                constraint: constraint_cell(c),
                avg_bit: r.avg_bit,
                loss: r.loss,
                perplexity: r.perplexity,
            })
            .map_err(|e| csv_error(&path, e))
            .stage(s)?;
        }
    }
    finish_csv(w, &path).stage(s)?;

    let path = dir.join("ablation.csv");
    let mut w = csv_writer(&path).stage(s)?;
    for &v in variants {
        let tc = cfg.train_config(v);
        for &c in &cfg.search.constraints {
            let Some(r) = eval.searched(v, c) else { continue };
            w.serialize(AblationRow {
                variant: v.name(),
                adapter_mode: match tc.adapter_mode {
                    AdapterMode::PerBit => "per-bit",
                    AdapterMode::Shared => "shared",
                },
                sampler_mode: match tc.sampler_mode {
                    SamplerMode::Uniform => "uniform",
                    SamplerMode::ResourceBalanced => "resource-balanced",
                },
                schedule_len: tc.schedule.schedule_len,
                order: match tc.schedule.order {
                    crate::sampler::ScheduleOrder::HighToLowFirst => "high-to-low-first",
                    crate::sampler::ScheduleOrder::LowToHighFirst => "low-to-high-first",
                },
                constraint: constraint_cell(c),
                avg_bit: r.avg_bit,
                loss: r.loss,
                perplexity: r.perplexity,
            })
            .map_err(|e| csv_error(&path, e))
            .stage(s)?;
        }
    }
    finish_csv(w, &path).stage(s)?;

    let stats_path = layout.sampler().join("stats.json");
    if stats_path.exists() {
        let analysis: SamplerAnalysis = read_json(&stats_path).stage(s)?;
        let path = dir.join("histograms.csv");
        let mut w = csv_writer(&path).stage(s)?;
        for (name, st) in [
            ("uniform", &analysis.uniform),
            ("resource-balanced", &analysis.resource_balanced),
        ] {
            for b in &st.histogram {
                w.serialize(HistogramRow {
                    sampler: name,
                    bin_low: b.bin_low,
                    bin_high: b.bin_high,
                    count: b.count,
                })
                .map_err(|e| csv_error(&path, e))
                .stage(s)?;
            }
        }
        finish_csv(w, &path).stage(s)?;
    }

    let path = dir.join("training_curves.csv");
    let mut w = csv_writer(&path).stage(s)?;
    for &v in variants {
        let log_path = layout.train_log(v);
        if !log_path.exists() {
            continue;
        }
        let log = read_train_log(&log_path).stage(s)?;
        for snap in log.evals() {
            for &(bit, loss) in &snap.uniform_losses {
                w.serialize(CurveRow {
                    variant: v.name(),
                    step: snap.step,
                    bit,
                    loss,
                })
                .map_err(|e| csv_error(&path, e))
                .stage(s)?;
            }
        }
    }
    finish_csv(w, &path).stage(s)?;
    mark_done(cfg, s)
}

/// Runs every stage in order. With `resume`, stages already completed under
/// the same configuration are skipped and interrupted training continues.
pub fn pipeline(cfg: &ExperimentConfig, resume: bool) -> StageResult<EvalReport> {
    let variants = cfg.variants();
    let skip = |stage: Stage| {
        let done = resume && is_done(cfg, stage);
        if done {
            info!("{stage}: already complete, skipped");
        }
        done
    };
    for stage in Stage::PIPELINE {
        if skip(stage) {
            continue;
        }
        info!("stage {stage}");
        match stage {
            Stage::GenCorpus => {
                gen_corpus(cfg)?;
            }
            Stage::Pretrain => {
                pretrain(cfg)?;
            }
            Stage::Quantize => quantize(cfg)?,
            Stage::TrainSupernet => train_supernet(cfg, &variants, resume)?,
            Stage::AnalyzeSampler => {
                analyze_sampler(cfg)?;
            }
            Stage::Search => search(cfg, &variants)?,
            Stage::Eval => {
                eval(cfg, &variants, &[])?;
            }
            Stage::Report => report(cfg, &variants)?,
        }
    }
    EvalReport::load(&Layout::new(&cfg.paths).eval_report()).stage(Stage::Report)
}
