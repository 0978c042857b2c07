//! Post-training subnet search.
//!
//! Phase 1 draws constrained random configurations and evaluates them. Each
//! layer's bit-width is rank-correlated against the metric, the most
//! sensitive layers lose one extreme bit option, and phase 2 samples again in
//! the narrowed space. The best record over both phases wins.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{QfaError, Result};
use crate::par;
use crate::sampler::{tilted_distribution, LayerDistribution, DEFAULT_CLAMP};
use crate::supernet::{BitSet, SubnetConfig};
use crate::tensor::Rng;

pub const DEFAULT_SHRINK_FRACTION: f64 = 0.25;
/// Fewer phase-1 records than this skip shrinking.
pub const MIN_CORRELATION_RECORDS: usize = 10;
/// Slack when comparing an average bit-width against a constraint.
const BIT_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    /// Lower is better.
    Loss,
    /// Higher is better.
    Accuracy,
}

impl MetricKind {
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            MetricKind::Loss => a < b,
            MetricKind::Accuracy => a > b,
        }
    }

    /// Metric mapped so that larger means better.
    fn goodness(self, m: f64) -> f64 {
        match self {
            MetricKind::Loss => -m,
            MetricKind::Accuracy => m,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchBudget {
    pub phase1_n: usize,
    pub phase2_n: usize,
    /// Maximum average bit-width; `None` searches the whole space.
    pub constraint: Option<f64>,
    pub max_rejection_tries: usize,
    pub shrink_fraction: f64,
    pub clamp: f64,
}

impl Default for SearchBudget {
    fn default() -> Self {
        SearchBudget {
            phase1_n: 100,
            phase2_n: 50,
            constraint: None,
            max_rejection_tries: 10_000,
            shrink_fraction: DEFAULT_SHRINK_FRACTION,
            clamp: DEFAULT_CLAMP,
        }
    }
}

impl SearchBudget {
    pub fn with_constraint(constraint: Option<f64>) -> Self {
        SearchBudget {
            constraint,
            ..Default::default()
        }
    }

    pub fn validate(&self, bits: &BitSet) -> Result<()> {
        if self.phase1_n == 0 || self.phase2_n == 0 {
            return Err(QfaError::config("search phase counts must be at least 1"));
        }
        if self.max_rejection_tries == 0 {
            return Err(QfaError::config("max_rejection_tries must be at least 1"));
        }
        if !(self.shrink_fraction > 0.0 && self.shrink_fraction <= 1.0) {
            return Err(QfaError::config("shrink_fraction must lie in (0, 1]"));
        }
        if !(0.0..0.5).contains(&self.clamp) {
            return Err(QfaError::config("clamp must lie in [0, 0.5)"));
        }
        check_constraint(self.constraint, bits)
    }
}

fn check_constraint(constraint: Option<f64>, bits: &BitSet) -> Result<()> {
    if let Some(c) = constraint {
        let (lo, hi) = (bits.min() as f64, bits.max() as f64);
        if !c.is_finite() || c < lo - BIT_EPS || c > hi + BIT_EPS {
            return Err(QfaError::Infeasible(format!(
                "{c} outside the bit range [{lo}, {hi}]"
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub config: SubnetConfig,
    pub avg_bit: f64,
    pub metric: f64,
    pub phase: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrunkSpace {
    /// Allowed bit-widths per layer, ascending.
    pub allowed: Vec<Vec<u8>>,
    pub correlations: Vec<f64>,
}

impl ShrunkSpace {
    pub fn full(bits: &BitSet, layers: usize) -> Self {
        ShrunkSpace {
            allowed: vec![bits.as_slice().to_vec(); layers],
            correlations: vec![0.0; layers],
        }
    }

    pub fn size(&self) -> u128 {
        self.allowed.iter().map(|a| a.len() as u128).product()
    }

    /// Lowest average bit-width reachable inside the space.
    pub fn min_avg_bit(&self) -> f64 {
        let n = self.allowed.len().max(1) as f64;
        self.allowed.iter().map(|a| a[0] as f64).sum::<f64>() / n
    }

    pub fn contains(&self, config: &SubnetConfig) -> bool {
        config.bits.len() == self.allowed.len()
            && config
                .bits
                .iter()
                .zip(&self.allowed)
                .all(|(b, a)| a.contains(b))
    }

    fn mask(&self, layer: usize, bits: &BitSet) -> Vec<bool> {
        bits.as_slice()
            .iter()
            .map(|b| self.allowed[layer].contains(b))
            .collect()
    }
}

/// Proposal distribution for one constraint: the tilt targeting the
/// constraint, or uniform without one.
fn proposal(bits: &BitSet, constraint: Option<f64>, clamp: f64) -> Result<LayerDistribution> {
    match constraint {
        None => Ok(LayerDistribution::uniform(bits.len())),
        Some(c) => tilted_distribution(bits, c, clamp),
    }
}

fn rejection_sample(
    rng: &mut Rng,
    dists: &[LayerDistribution],
    bits: &BitSet,
    constraint: Option<f64>,
    tries: usize,
) -> Result<SubnetConfig> {
    for _ in 0..tries {
        let config = SubnetConfig::new(dists.iter().map(|d| d.sample(rng, bits)).collect());
        match constraint {
            Some(c) if config.avg_bit() > c + BIT_EPS => continue,
            _ => return Ok(config),
        }
    }
    Err(QfaError::Budget {
        tries,
        constraint: constraint.unwrap_or(f64::NAN),
    })
}

/// Draws from the tilt targeting `constraint` (uniform if `None`) until a
/// configuration satisfies it.
pub fn constrained_sample(
    rng: &mut Rng,
    layers: usize,
    bits: &BitSet,
    constraint: Option<f64>,
    tries: usize,
) -> Result<SubnetConfig> {
    check_constraint(constraint, bits)?;
    let dist = proposal(bits, constraint, DEFAULT_CLAMP)?;
    rejection_sample(rng, &vec![dist; layers], bits, constraint, tries)
}

/// Ranks starting at 1, tied values sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation (Pearson on average ranks). `None` if either side
/// is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCorrelation {
    /// Per-layer ρ; positive means a higher bit-width helps.
    pub rho: Vec<f64>,
    /// Layers whose ρ fell back to 0 (a constant bit or constant metric).
    pub degenerate: Vec<bool>,
}

pub fn layer_correlation(records: &[SearchRecord], kind: MetricKind) -> Result<LayerCorrelation> {
    if records.len() < 2 {
        return Err(QfaError::domain("correlation needs at least two records"));
    }
    let layers = records[0].config.len();
    if records.iter().any(|r| r.config.len() != layers) {
        return Err(QfaError::domain("records disagree on the layer count"));
    }
    let metric: Vec<f64> = records.iter().map(|r| kind.goodness(r.metric)).collect();
    let mut rho = Vec::with_capacity(layers);
    let mut degenerate = Vec::with_capacity(layers);
    for l in 0..layers {
        let bits: Vec<f64> = records.iter().map(|r| r.config.bits[l] as f64).collect();
        match spearman(&bits, &metric) {
            Some(r) => {
                rho.push(r);
                degenerate.push(false);
            }
            None => {
                rho.push(0.0);
                degenerate.push(true);
            }
        }
    }
    Ok(LayerCorrelation { rho, degenerate })
}

/// Layers chosen for shrinking, most sensitive first.
fn shrink_order(correlations: &[f64], fraction: f64) -> Vec<usize> {
    let k = (fraction * correlations.len() as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..correlations.len()).collect();
    // Stable sort keeps lower indices first among equal |ρ|.
    order.sort_by(|&a, &b| correlations[b].abs().total_cmp(&correlations[a].abs()));
    order
        .into_iter()
        .take(k)
        .filter(|&l| correlations[l] != 0.0)
        .collect()
}

fn apply_shrink(allowed: &mut Vec<u8>, rho: f64) {
    if allowed.len() < 2 {
        return;
    }
    if rho > 0.0 {
        allowed.remove(0);
    } else if rho < 0.0 {
        allowed.pop();
    }
}

/// Removes the lowest bit from the top layers with ρ > 0 and the highest bit
/// from those with ρ < 0.
pub fn shrink_space(correlations: &[f64], bits: &BitSet, fraction: f64) -> Result<ShrunkSpace> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(QfaError::domain("shrink fraction must lie in (0, 1]"));
    }
    let mut space = ShrunkSpace::full(bits, correlations.len());
    space.correlations = correlations.to_vec();
    for l in shrink_order(correlations, fraction) {
        apply_shrink(&mut space.allowed[l], correlations[l]);
    }
    Ok(space)
}

/// Like [`shrink_space`], but skips any removal that would leave no
/// configuration under `constraint`.
fn feasible_shrink(
    correlations: &[f64],
    bits: &BitSet,
    fraction: f64,
    constraint: Option<f64>,
) -> ShrunkSpace {
    let mut space = ShrunkSpace::full(bits, correlations.len());
    space.correlations = correlations.to_vec();
    for l in shrink_order(correlations, fraction) {
        let before = space.allowed[l].clone();
        apply_shrink(&mut space.allowed[l], correlations[l]);
        if let Some(c) = constraint {
            if space.min_avg_bit() > c + BIT_EPS {
                space.allowed[l] = before;
            }
        }
    }
    space
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub constraint: Option<f64>,
    pub kind: MetricKind,
    pub best: SearchRecord,
    pub trace: Vec<SearchRecord>,
    pub correlation: LayerCorrelation,
    pub space: ShrunkSpace,
    /// Whether phase 1 produced enough records to shrink at all.
    pub shrunk: bool,
}

/// Evaluates configurations in parallel, each distinct one once, in order.
fn evaluate_all<F>(configs: &[SubnetConfig], eval: &F) -> Result<Vec<f64>>
where
    F: Fn(&SubnetConfig) -> Result<f64> + Sync + Send,
{
    let mut index: HashMap<&SubnetConfig, usize> = HashMap::new();
    let mut unique: Vec<&SubnetConfig> = Vec::new();
    let slots: Vec<usize> = configs
        .iter()
        .map(|c| {
            *index.entry(c).or_insert_with(|| {
                unique.push(c);
                unique.len() - 1
            })
        })
        .collect();
    let values = par::map_slice(&unique, |c| eval(c));
    let values: Vec<f64> = values.into_iter().collect::<Result<_>>()?;
    Ok(slots.into_iter().map(|i| values[i]).collect())
}

/// Two-phase search. `eval` only sees configurations, so it cannot change
/// the model it scores.
pub fn search<F>(
    layers: usize,
    bits: &BitSet,
    eval: F,
    kind: MetricKind,
    budget: &SearchBudget,
    rng: &mut Rng,
) -> Result<SearchOutcome>
where
    F: Fn(&SubnetConfig) -> Result<f64> + Sync + Send,
{
    budget.validate(bits)?;
    if layers == 0 {
        return Err(QfaError::domain("search needs at least one layer"));
    }
    let base = proposal(bits, budget.constraint, budget.clamp)?;
    let phase1_dists = vec![base.clone(); layers];
    let phase1: Vec<SubnetConfig> = (0..budget.phase1_n)
        .map(|_| {
            rejection_sample(
                rng,
                &phase1_dists,
                bits,
                budget.constraint,
                budget.max_rejection_tries,
            )
        })
        .collect::<Result<_>>()?;
    let mut trace = records(&phase1, &evaluate_all(&phase1, &eval)?, 1);

    let shrunk = trace.len() >= MIN_CORRELATION_RECORDS;
    let correlation = if shrunk {
        layer_correlation(&trace, kind)?
    } else {
        LayerCorrelation {
            rho: vec![0.0; layers],
            degenerate: vec![true; layers],
        }
    };
    let space = feasible_shrink(
        &correlation.rho,
        bits,
        budget.shrink_fraction,
        budget.constraint,
    );
    let phase2_dists: Vec<LayerDistribution> = (0..layers)
        .map(|l| base.restricted(&space.mask(l, bits)))
        .collect::<Result<_>>()?;
    let phase2: Vec<SubnetConfig> = (0..budget.phase2_n)
        .map(|_| {
            rejection_sample(
                rng,
                &phase2_dists,
                bits,
                budget.constraint,
                budget.max_rejection_tries,
            )
        })
        .collect::<Result<_>>()?;
    trace.extend(records(&phase2, &evaluate_all(&phase2, &eval)?, 2));

    let best = best_record(&trace, kind)?.clone();
    Ok(SearchOutcome {
        constraint: budget.constraint,
        kind,
        best,
        trace,
        correlation,
        space,
        shrunk,
    })
}

fn records(configs: &[SubnetConfig], metrics: &[f64], phase: u8) -> Vec<SearchRecord> {
    configs
        .iter()
        .zip(metrics)
        .map(|(c, &m)| SearchRecord {
            avg_bit: c.avg_bit(),
            config: c.clone(),
            metric: m,
            phase,
        })
        .collect()
}

/// The best record, earliest first among equals.
pub fn best_record(records: &[SearchRecord], kind: MetricKind) -> Result<&SearchRecord> {
    let mut it = records.iter();
    let mut best = it
        .next()
        .ok_or_else(|| QfaError::domain("no records to choose from"))?;
    for r in it {
        if kind.better(r.metric, best.metric) {
            best = r;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub avg_bit: f64,
    pub metric: f64,
    pub config: SubnetConfig,
}

/// Non-dominated records sorted by average bit-width; each point strictly
/// improves on every cheaper one.
pub fn pareto_report(records: &[SearchRecord], kind: MetricKind) -> Result<Vec<FrontierPoint>> {
    if records.is_empty() {
        return Err(QfaError::domain("frontier of an empty record set"));
    }
    let mut sorted: Vec<&SearchRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.avg_bit.total_cmp(&b.avg_bit).then_with(|| {
            if kind.better(a.metric, b.metric) {
                std::cmp::Ordering::Less
            } else if kind.better(b.metric, a.metric) {
                std::cmp::Ordering::Greater
            } else {
                std::cmp::Ordering::Equal
            }
        })
    });
    let mut frontier: Vec<FrontierPoint> = Vec::new();
    for r in sorted {
        let improves = frontier
            .last()
            .is_none_or(|p| kind.better(r.metric, p.metric));
        if improves {
            frontier.push(FrontierPoint {
                avg_bit: r.avg_bit,
                metric: r.metric,
                config: r.config.clone(),
            });
        }
    }
    Ok(frontier)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub constraint: Option<f64>,
    pub best_config: SubnetConfig,
    pub avg_bit: f64,
    pub metric: f64,
    pub correlations: Vec<f64>,
    pub allowed_sets: Vec<Vec<u8>>,
}

impl SearchOutcome {
    pub fn report(&self) -> SearchReport {
        SearchReport {
            constraint: self.constraint,
            best_config: self.best.config.clone(),
            avg_bit: self.best.avg_bit,
            metric: self.best.metric,
            correlations: self.correlation.rho.clone(),
            allowed_sets: self.space.allowed.clone(),
        }
    }

    pub fn write_trace(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.trace {
            serde_json::to_writer(&mut out, r).map_err(|e| QfaError::json(path, e))?;
            out.push(b'\n');
        }
        std::fs::write(path, out).map_err(|e| QfaError::io(path, e))
    }
}

pub fn read_trace(path: &Path) -> Result<Vec<SearchRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| QfaError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| QfaError::json(path, e)))
        .collect()
}

/// Frontier as CSV with columns `avg_bit,metric,config`.
pub fn write_frontier_csv(path: &Path, frontier: &[FrontierPoint]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "avg_bit,metric,config").expect("write to vec");
    for p in frontier {
        writeln!(out, "{},{},\"{}\"", p.avg_bit, p.metric, p.config).expect("write to vec");
    }
    std::fs::write(path, out).map_err(|e| QfaError::io(path, e))
}
