//! Pretraining of the float model and one-shot supernet training.

pub mod corpus;
mod optim;

use serde::{Deserialize, Serialize};

pub use corpus::{generate_corpus, Corpus, CorpusSpec, Dataset};
pub use optim::{AdamParams, AdamState, OptState};

use crate::error::{QfaError, Result};
use crate::par;
use crate::sampler::{scheduled_sample, uniform_sample, BitSchedule, SamplerMode};
use crate::supernet::{
    mixed_backward, mixed_forward, AdapterKey, AdapterMode, Dims, FloatModel, SubnetConfig,
    SupernetModel,
};
use crate::tensor::rng::streams;
use crate::tensor::{Matrix, Rng};

/// Examples per evaluation chunk.
const EVAL_CHUNK: usize = 1024;

/// Mean cross-entropy over the batch and its gradient `(softmax - onehot) / n`.
pub fn cross_entropy(logits: &Matrix, targets: &[u16]) -> Result<(f64, Matrix)> {
    let (v, n) = logits.shape();
    if targets.len() != n {
        return Err(QfaError::shape(format!(
            "{} targets for {n} logit columns",
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(QfaError::domain(format!("target {t} outside vocabulary {v}")));
    }
    let mut grad = Matrix::zeros(v, n);
    let mut total = 0.0f64;
    let inv_n = 1.0 / n as f64;
    for (j, &t) in targets.iter().enumerate() {
        let max = (0..v).map(|i| logits.get(i, j)).fold(f32::NEG_INFINITY, f32::max) as f64;
        let sum: f64 = (0..v).map(|i| (logits.get(i, j) as f64 - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - logits.get(t as usize, j) as f64;
        for i in 0..v {
            let p = (logits.get(i, j) as f64 - lse).exp();
            let onehot = if i == t as usize { 1.0 } else { 0.0 };
            grad.set(i, j, ((p - onehot) * inv_n) as f32);
        }
    }
    Ok((total * inv_n, grad))
}

fn loss_and_hits(logits: &Matrix, targets: &[u16]) -> (f64, usize) {
    let v = logits.rows();
    let mut loss = 0.0;
    let mut hits = 0;
    for (j, &t) in targets.iter().enumerate() {
        let mut best = 0;
        let mut max = f32::NEG_INFINITY;
        for i in 0..v {
            let x = logits.get(i, j);
            if x > max {
                max = x;
                best = i;
            }
        }
        let sum: f64 = (0..v).map(|i| (logits.get(i, j) as f64 - max as f64).exp()).sum();
        loss += max as f64 + sum.ln() - logits.get(t as usize, j) as f64;
        hits += usize::from(best == t as usize);
    }
    (loss, hits)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub perplexity: f64,
    pub accuracy: f64,
}

/// Mean loss, perplexity and top-1 accuracy of `forward` over `data`.
///
/// Chunks are evaluated in parallel and reduced in order, so the result does
/// not depend on the thread count.
pub fn evaluate<F>(data: &Dataset, forward: F) -> Result<EvalMetrics>
where
    F: Fn(&[u16]) -> Result<Matrix> + Sync + Send,
{
    if data.is_empty() {
        return Err(QfaError::domain("empty evaluation set"));
    }
    let chunks = data.len().div_ceil(EVAL_CHUNK);
    let parts = par::map_range(chunks, |c| -> Result<(f64, usize)> {
        let start = c * EVAL_CHUNK;
        let end = (start + EVAL_CHUNK).min(data.len());
        let (ctx, tgt) = data.slice(start, end);
        Ok(loss_and_hits(&forward(ctx)?, tgt))
    });
    let mut loss = 0.0;
    let mut hits = 0;
    for p in parts {
        let (l, h) = p?;
        loss += l;
        hits += h;
    }
    let n = data.len() as f64;
    let loss = loss / n;
    Ok(EvalMetrics {
        loss,
        perplexity: loss.exp(),
        accuracy: hits as f64 / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Peak learning rate, decayed linearly to `final_lr_fraction * lr`.
    pub lr: f32,
    pub final_lr_fraction: f32,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 20_000,
            batch_size: 32,
            lr: 3e-3,
            final_lr_fraction: 0.05,
        }
    }
}

/// Trains the full-precision model with Adam on every parameter.
pub fn pretrain_float(
    train: &Dataset,
    dims: Dims,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(FloatModel, Vec<f64>)> {
    if train.is_empty() {
        return Err(QfaError::domain("empty training corpus"));
    }
    if train.context != dims.context {
        return Err(QfaError::config("dataset context differs from model context"));
    }
    let base = Rng::new(seed);
    let mut model = FloatModel::init(dims, &mut base.stream(streams::PRETRAIN_INIT))?;
    let mut hp = AdamParams::default();
    let mut emb_state = AdamState::new(model.embedding.rows(), model.embedding.cols());
    let mut block_states: Vec<AdamState> = model
        .blocks
        .iter()
        .map(|b| AdamState::new(b.rows(), b.cols()))
        .collect();
    let mut head_state = AdamState::new(model.head.rows(), model.head.cols());
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let progress = step as f32 / cfg.steps as f32;
        hp.lr = cfg.lr * (1.0 - (1.0 - cfg.final_lr_fraction) * progress);
        let mut rng = Rng::derive(seed, streams::PRETRAIN_BATCHES, step);
        let (ctx, tgt) = train.sample_batch(&mut rng, cfg.batch_size);
        let (logits, cache) = model.forward_cached(&ctx)?;
        let (loss, d_logits) = cross_entropy(&logits, &tgt)?;
        let grads = model.backward(&ctx, &cache, &d_logits)?;
        emb_state.update(&mut model.embedding, &grads.embedding, &hp)?;
        for ((w, st), g) in model.blocks.iter_mut().zip(&mut block_states).zip(&grads.blocks) {
            st.update(w, g, &hp)?;
        }
        head_state.update(&mut model.head, &grads.head, &hp)?;
        losses.push(loss);
    }
    Ok((model, losses))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f32,
    pub sampler_mode: SamplerMode,
    pub adapter_mode: AdapterMode,
    pub schedule: BitSchedule,
    pub paths_per_step: usize,
    pub seed: u64,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Linear decay target: the rate falls from `lr` toward
    /// `final_lr_fraction * lr`; 1.0 keeps it constant.
    pub final_lr_fraction: f32,
    pub head_trainable: bool,
    /// Steps between evaluation snapshots; 0 disables them.
    pub eval_every: u64,
    pub eval_examples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            // Two whole epochs of the default schedule: a partial epoch would
            // over-weight whichever end of the bit range it stops in.
            steps: 16_000,
            batch_size: 16,
            lr: 1e-3,
            sampler_mode: SamplerMode::ResourceBalanced,
            adapter_mode: AdapterMode::PerBit,
            schedule: BitSchedule::default(),
            paths_per_step: 1,
            seed: 0,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            final_lr_fraction: 1.0,
            head_trainable: false,
            eval_every: 2000,
            eval_examples: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.paths_per_step == 0 {
            return Err(QfaError::config(
                "steps, batch_size and paths_per_step must be at least 1",
            ));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(QfaError::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(QfaError::config("invalid adam hyper-parameters"));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(QfaError::config("final_lr_fraction must lie in (0, 1]"));
        }
        self.schedule.validate()
    }

    /// Learning rate in effect at step `t`.
    pub fn lr_at(&self, t: u64) -> f32 {
        let progress = t.min(self.steps) as f32 / self.steps as f32;
        self.lr * (1.0 - (1.0 - self.final_lr_fraction) * progress)
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub config: SubnetConfig,
    pub avg_bit: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub target_mean: Option<f64>,
    pub paths: Vec<PathRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub step: u64,
    /// `(uniform bit-width, validation loss)`
    pub uniform_losses: Vec<(u8, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Step(StepRecord),
    Eval(EvalSnapshot),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Step(s) => Some(s),
            LogEntry::Eval(_) => None,
        })
    }

    pub fn evals(&self) -> impl Iterator<Item = &EvalSnapshot> {
        self.entries.iter().filter_map(|e| match e {
            LogEntry::Eval(s) => Some(s),
            LogEntry::Step(_) => None,
        })
    }

    pub fn push(&mut self, entry: LogEntry) {
        self.entries.push(entry);
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.entries.extend(other.entries);
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("log entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> std::result::Result<TrainLog, serde_json::Error> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(TrainLog { entries })
    }

    /// How often each (layer, bit index) slot was on a sampled path.
    pub fn slot_counts(&self, bits: &[u8], layers: usize) -> Vec<Vec<u64>> {
        let mut counts = vec![vec![0u64; bits.len()]; layers];
        for s in self.steps() {
            for p in &s.paths {
                for (l, b) in p.config.bits.iter().enumerate() {
                    if let Some(bi) = bits.iter().position(|x| x == b) {
                        counts[l][bi] += 1;
                    }
                }
            }
        }
        counts
    }
}

/// Samples one configuration for step `t`.
pub fn sample_path(rng: &mut Rng, cfg: &TrainConfig, t: u64, layers: usize) -> Result<SubnetConfig> {
    match cfg.sampler_mode {
        SamplerMode::Uniform => Ok(uniform_sample(rng, layers, &cfg.schedule.bits)),
        SamplerMode::ResourceBalanced => scheduled_sample(rng, &cfg.schedule, t, layers),
    }
}

fn apply_grads(
    model: &mut SupernetModel,
    opt: &mut OptState,
    grads: crate::supernet::PathGrads,
    hp: &AdamParams,
) -> Result<()> {
    for (key, g) in grads.adapters {
        let adapter = model.adapter_mut(key);
        let (st_a, st_b) = opt.adapters.entry(key).or_insert_with(|| {
            (
                AdamState::new(adapter.rank(), adapter.n_groups()),
                AdamState::new(adapter.d_out(), adapter.rank()),
            )
        });
        let (a, b) = adapter.params_mut();
        st_a.update(a, &g.d_a_tilde, hp)?;
        st_b.update(b, &g.d_b, hp)?;
    }
    if let Some(gh) = grads.head {
        let st = opt
            .head
            .get_or_insert_with(|| AdamState::new(model.head.rows(), model.head.cols()));
        st.update(&mut model.head, &gh, hp)?;
    }
    Ok(())
}

/// One update along each of `paths`, in order, on a shared minibatch.
pub fn train_on_paths(
    model: &mut SupernetModel,
    opt: &mut OptState,
    hp: &AdamParams,
    paths: &[SubnetConfig],
    contexts: &[u16],
    targets: &[u16],
) -> Result<Vec<PathRecord>> {
    let mut records = Vec::with_capacity(paths.len());
    for config in paths {
        let (logits, cache) = mixed_forward(model, config, contexts)?;
        let (loss, d_logits) = cross_entropy(&logits, targets)?;
        let grads = mixed_backward(model, config, &cache, &d_logits)?;
        apply_grads(model, opt, grads, hp)?;
        records.push(PathRecord {
            config: config.clone(),
            avg_bit: config.avg_bit(),
            loss,
        });
    }
    Ok(records)
}

/// Training step `t`: draws the minibatch and paths from step-indexed streams
/// and updates only the adapters on those paths (and the head if trainable).
pub fn train_step(
    model: &mut SupernetModel,
    cfg: &TrainConfig,
    opt: &mut OptState,
    t: u64,
    train: &Dataset,
) -> Result<StepRecord> {
    let mut batch_rng = Rng::derive(cfg.seed, streams::TRAIN_BATCHES, t);
    let (ctx, tgt) = train.sample_batch(&mut batch_rng, cfg.batch_size);
    let mut path_rng = Rng::derive(cfg.seed, streams::TRAIN_SAMPLER, t);
    let paths = (0..cfg.paths_per_step)
        .map(|_| sample_path(&mut path_rng, cfg, t, model.dims.layers))
        .collect::<Result<Vec<_>>>()?;
    let hp = AdamParams {
        lr: cfg.lr_at(t),
        ..cfg.adam()
    };
    let records = train_on_paths(model, opt, &hp, &paths, &ctx, &tgt)?;
    Ok(StepRecord {
        step: t,
        target_mean: match cfg.sampler_mode {
            SamplerMode::Uniform => None,
            SamplerMode::ResourceBalanced => Some(crate::sampler::target_mean(&cfg.schedule, t)),
        },
        paths: records,
    })
}

/// Resumable position of a training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    pub next_step: u64,
    pub opt: OptState,
}

fn snapshot(model: &SupernetModel, step: u64, val: &Dataset) -> Result<EvalSnapshot> {
    let uniform_losses = model
        .bits
        .as_slice()
        .iter()
        .map(|&b| {
            let cfg = SubnetConfig::uniform(b, model.dims.layers);
            Ok((b, evaluate(val, |ctx| model.forward(&cfg, ctx))?.loss))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSnapshot {
        step,
        uniform_losses,
    })
}

/// Runs steps `state.next_step..until` (clamped to `cfg.steps`).
pub fn train_supernet_until(
    model: &mut SupernetModel,
    cfg: &TrainConfig,
    state: &mut TrainState,
    train: &Dataset,
    val: &Dataset,
    until: u64,
) -> Result<TrainLog> {
    cfg.validate()?;
    if model.adapter_mode != cfg.adapter_mode {
        return Err(QfaError::config(format!(
            "supernet built with {:?} adapters, training config asks for {:?}",
            model.adapter_mode, cfg.adapter_mode
        )));
    }
    if model.bits != cfg.schedule.bits {
        return Err(QfaError::config("schedule bit set differs from the supernet's"));
    }
    model.head_trainable = cfg.head_trainable;
    let eval_set = val.strided_subset(cfg.eval_examples);
    let mut log = TrainLog::default();
    let end = until.min(cfg.steps);
    while state.next_step < end {
        let t = state.next_step;
        log.push(LogEntry::Step(train_step(model, cfg, &mut state.opt, t, train)?));
        state.next_step += 1;
        if cfg.eval_every > 0 && state.next_step % cfg.eval_every == 0 && !eval_set.is_empty() {
            log.push(LogEntry::Eval(snapshot(model, state.next_step, &eval_set)?));
        }
    }
    Ok(log)
}

pub fn train_supernet(
    model: &mut SupernetModel,
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<TrainLog> {
    let mut state = TrainState::default();
    train_supernet_until(model, cfg, &mut state, train, val, cfg.steps)
}

/// Adapters of `model` keyed by `(layer, adapter index)`, for isolation checks.
pub fn adapter_keys(model: &SupernetModel) -> Vec<AdapterKey> {
    model
        .blocks
        .iter()
        .enumerate()
        .flat_map(|(layer, b)| (0..b.adapters().len()).map(move |adapter| AdapterKey { layer, adapter }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supernet::{build_supernet, SupernetOptions};

    #[test]
    fn uniform_logits_give_log_vocab() {
        let (loss, _) = cross_entropy(&Matrix::zeros(32, 4), &[0, 5, 9, 31]).unwrap();
        assert!((loss - 32f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logit_gives_zero_loss() {
        let mut logits = Matrix::zeros(8, 1);
        logits.set(3, 0, 100.0);
        let (loss, _) = cross_entropy(&logits, &[3]).unwrap();
        assert!(loss < 1e-30);
    }

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let mut rng = Rng::new(1);
        let logits = rng.normal_matrix(6, 3, 2.0);
        let targets = [1u16, 5, 0];
        let (_, grad) = cross_entropy(&logits, &targets).unwrap();
        let h = 1e-3f32;
        for i in 0..6 {
            for j in 0..3 {
                let mut p = logits.clone();
                let mut m = logits.clone();
                p.set(i, j, logits.get(i, j) + h);
                m.set(i, j, logits.get(i, j) - h);
                let fd = (cross_entropy(&p, &targets).unwrap().0 - cross_entropy(&m, &targets).unwrap().0)
                    / (2.0 * h as f64);
                assert!((fd - grad.get(i, j) as f64).abs() <= 1e-4, "{fd} vs {}", grad.get(i, j));
            }
        }
        assert!(cross_entropy(&logits, &[9, 0, 0]).is_err());
        assert!(cross_entropy(&logits, &[0, 0]).is_err());
    }

    #[test]
    fn evaluate_reports_perplexity_as_exp_loss() {
        let data = Dataset::from_tokens(&(0..50).map(|i| (i % 7) as u16).collect::<Vec<_>>(), 2).unwrap();
        let m = evaluate(&data, |ctx| Ok(Matrix::zeros(7, ctx.len() / 2))).unwrap();
        assert!((m.loss - 7f64.ln()).abs() < 1e-12);
        assert_eq!(m.perplexity, m.loss.exp());
    }

    fn tiny_setup(seed: u64) -> (Dataset, Dataset, FloatModel) {
        let dims = Dims {
            vocab: 8,
            context: 2,
            hidden: 8,
            layers: 2,
        };
        let spec = CorpusSpec {
            vocab: 8,
            train_tokens: 3000,
            val_tokens: 600,
            lags: vec![(1, 0.8), (2, 0.1)],
        };
        let c = generate_corpus(&spec, seed);
        let train = Dataset::from_tokens(&c.train, 2).unwrap();
        let val = Dataset::from_tokens(&c.val, 2).unwrap();
        let cfg = PretrainConfig {
            steps: 300,
            batch_size: 16,
            lr: 1e-2,
            ..Default::default()
        };
        let (float, _) = pretrain_float(&train, dims, &cfg, seed).unwrap();
        (train, val, float)
    }

    #[test]
    fn pretraining_is_deterministic_and_learns() {
        let (train, val, a) = tiny_setup(4);
        let (_, _, b) = tiny_setup(4);
        assert_eq!(a, b);
        let loss = evaluate(&val, |ctx| a.forward(ctx)).unwrap().loss;
        assert!(loss < 8f64.ln() * 0.6, "val loss {loss}");
        assert!(!train.is_empty());
    }

    #[test]
    fn single_token_corpus_is_trivial() {
        let tokens = vec![3u16; 500];
        let data = Dataset::from_tokens(&tokens, 2).unwrap();
        let dims = Dims {
            vocab: 8,
            context: 2,
            hidden: 4,
            layers: 1,
        };
        let cfg = PretrainConfig {
            steps: 400,
            batch_size: 8,
            lr: 3e-2,
            ..Default::default()
        };
        let (model, losses) = pretrain_float(&data, dims, &cfg, 1).unwrap();
        assert!(*losses.last().unwrap() < 0.01);
        assert!(evaluate(&data, |c| model.forward(c)).unwrap().loss < 0.01);
    }

    fn supernet(float: &FloatModel, mode: AdapterMode) -> SupernetModel {
        let opts = SupernetOptions {
            group_size: 4,
            rank: 2,
            adapter_mode: mode,
            ..Default::default()
        };
        build_supernet(float, &opts, &mut Rng::new(9)).unwrap()
    }

    #[test]
    fn training_reduces_path_loss() {
        let (train, val, float) = tiny_setup(5);
        let mut sn = supernet(&float, AdapterMode::PerBit);
        let cfg2 = SubnetConfig::uniform(2, 2);
        let before = evaluate(&val, |c| sn.forward(&cfg2, c)).unwrap().loss;
        let cfg = TrainConfig {
            steps: 200,
            lr: 1e-2,
            schedule: BitSchedule {
                schedule_len: 200,
                ..Default::default()
            },
            eval_every: 100,
            ..Default::default()
        };
        let log = train_supernet(&mut sn, &cfg, &train, &val).unwrap();
        let after = evaluate(&val, |c| sn.forward(&cfg2, c)).unwrap().loss;
        assert!(after < before, "{after} !< {before}");
        assert_eq!(log.steps().count(), 200);
        assert_eq!(log.evals().count(), 2);
        let steps: Vec<u64> = log.steps().map(|s| s.step).collect();
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
        let back = TrainLog::from_jsonl(&log.to_jsonl()).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn mismatched_modes_rejected() {
        let (train, val, float) = tiny_setup(6);
        let mut sn = supernet(&float, AdapterMode::Shared);
        let cfg = TrainConfig {
            steps: 1,
            ..Default::default()
        };
        assert!(train_supernet(&mut sn, &cfg, &train, &val).is_err());
        let bad = TrainConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
