//! Bit-width configuration samplers.
//!
//! Uniform per-layer sampling concentrates the average bit-width of a subnet
//! around the middle of the range: its variance is `σ²/L`. The
//! resource-balanced sampler instead moves a target mean along a triangular
//! wave between the extreme bit-widths and, at each step, draws every layer
//! from the exponential tilt of the uniform categorical whose mean matches
//! that target. Averaged over a schedule epoch the average bit-width then
//! covers the whole range.

use serde::{Deserialize, Serialize};

use crate::error::{QfaError, Result};
use crate::supernet::{avg_bit, BitSet, SubnetConfig};
use crate::tensor::Rng;

pub const DEFAULT_SCHEDULE_LEN: u64 = 8000;
pub const DEFAULT_CLAMP: f64 = 0.05;
pub const DEFAULT_BIN_WIDTH: f64 = 0.25;

/// Tolerance on the matched mean for the tilt root-find.
const MEAN_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    Uniform,
    ResourceBalanced,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleOrder {
    /// Start at the largest bit-width, descend, come back.
    HighToLowFirst,
    /// Start at the smallest bit-width, ascend, come back.
    LowToHighFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BitSchedule {
    pub bits: BitSet,
    pub schedule_len: u64,
    pub order: ScheduleOrder,
    pub clamp: f64,
}

impl Default for BitSchedule {
    fn default() -> Self {
        BitSchedule {
            bits: BitSet::default(),
            schedule_len: DEFAULT_SCHEDULE_LEN,
            order: ScheduleOrder::HighToLowFirst,
            clamp: DEFAULT_CLAMP,
        }
    }
}

impl BitSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.schedule_len < 2 {
            return Err(QfaError::config("schedule length must be at least 2"));
        }
        let half_range = (self.bits.max() - self.bits.min()) as f64 / 2.0;
        let clamp_ok = self.clamp >= 0.0 && (self.clamp < half_range || self.clamp == 0.0);
        if !clamp_ok {
            return Err(QfaError::config(format!(
                "clamp {} outside [0, {half_range})",
                self.clamp
            )));
        }
        Ok(())
    }
}

/// Per-layer categorical over the bit set, in bit order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDistribution {
    pub probs: Vec<f64>,
    /// Tilt parameter; `None` for the clamped point masses.
    pub theta: Option<f64>,
}

impl LayerDistribution {
    pub fn uniform(n: usize) -> Self {
        LayerDistribution {
            probs: vec![1.0 / n as f64; n],
            theta: Some(0.0),
        }
    }

    pub fn mean(&self, bits: &BitSet) -> f64 {
        self.probs
            .iter()
            .zip(bits.as_slice())
            .map(|(p, &b)| p * b as f64)
            .sum()
    }

    /// Zeroes disallowed bits and renormalizes. Falls back to uniform over the
    /// allowed bits if the tilt puts no mass on any of them.
    pub fn restricted(&self, allowed: &[bool]) -> Result<LayerDistribution> {
        if allowed.len() != self.probs.len() || !allowed.iter().any(|&a| a) {
            return Err(QfaError::domain("allowed set must be a non-empty mask over the bit set"));
        }
        let masked: Vec<f64> = self
            .probs
            .iter()
            .zip(allowed)
            .map(|(&p, &a)| if a { p } else { 0.0 })
            .collect();
        let total: f64 = masked.iter().sum();
        let probs = if total > 0.0 {
            masked.iter().map(|p| p / total).collect()
        } else {
            let k = allowed.iter().filter(|&&a| a).count() as f64;
            allowed.iter().map(|&a| if a { 1.0 / k } else { 0.0 }).collect()
        };
        Ok(LayerDistribution {
            probs,
            theta: self.theta,
        })
    }

    pub fn sample(&self, rng: &mut Rng, bits: &BitSet) -> u8 {
        bits.as_slice()[rng.categorical(&self.probs)]
    }

    pub fn sample_config(&self, rng: &mut Rng, bits: &BitSet, layers: usize) -> SubnetConfig {
        SubnetConfig::new((0..layers).map(|_| self.sample(rng, bits)).collect())
    }
}

pub fn uniform_sample(rng: &mut Rng, layers: usize, bits: &BitSet) -> SubnetConfig {
    SubnetConfig::new(
        (0..layers)
            .map(|_| bits.as_slice()[rng.index(bits.len())])
            .collect(),
    )
}

/// Variance of the average bit-width under uniform sampling, `σ²/L`.
pub fn uniform_variance(layers: usize, bits: &BitSet) -> f64 {
    let b = bits.as_f64();
    let n = b.len() as f64;
    let mean = b.iter().sum::<f64>() / n;
    let var = b.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    var / layers as f64
}

/// Triangular target mean of the average bit-width at step `t`.
pub fn target_mean(schedule: &BitSchedule, t: u64) -> f64 {
    let lo = schedule.bits.min() as f64;
    let hi = schedule.bits.max() as f64;
    let phase = (t % schedule.schedule_len) as f64 / schedule.schedule_len as f64;
    let tri = (2.0 * phase - 1.0).abs();
    match schedule.order {
        ScheduleOrder::HighToLowFirst => lo + (hi - lo) * tri,
        ScheduleOrder::LowToHighFirst => hi - (hi - lo) * tri,
    }
}

fn tilt_probs(bits: &[f64], theta: f64) -> Vec<f64> {
    // Shift exponents by their max for stability.
    let top = bits
        .iter()
        .map(|b| theta * b)
        .fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = bits.iter().map(|b| (theta * b - top).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

fn tilt_mean(bits: &[f64], theta: f64) -> f64 {
    tilt_probs(bits, theta)
        .iter()
        .zip(bits)
        .map(|(p, b)| p * b)
        .sum()
}

/// The exponentially tilted uniform categorical with mean `mu`.
///
/// Within `clamp` of either end the result is a point mass on that end.
pub fn tilted_distribution(bits: &BitSet, mu: f64, clamp: f64) -> Result<LayerDistribution> {
    let lo = bits.min() as f64;
    let hi = bits.max() as f64;
    if !mu.is_finite() || mu < lo - 1e-12 || mu > hi + 1e-12 {
        return Err(QfaError::domain(format!(
            "target mean {mu} outside [{lo}, {hi}]"
        )));
    }
    let n = bits.len();
    if n == 1 {
        return Ok(LayerDistribution::uniform(1));
    }
    let point = |idx: usize| {
        let mut probs = vec![0.0; n];
        probs[idx] = 1.0;
        LayerDistribution { probs, theta: None }
    };
    if mu <= lo + clamp {
        return Ok(point(0));
    }
    if mu >= hi - clamp {
        return Ok(point(n - 1));
    }
    let b = bits.as_f64();
    let uniform_mean = b.iter().sum::<f64>() / n as f64;
    if mu == uniform_mean {
        return Ok(LayerDistribution::uniform(n));
    }
    // The tilted mean is strictly increasing in theta; bracket, then bisect.
    let (mut a, mut z) = if mu > uniform_mean { (0.0, 1.0) } else { (-1.0, 0.0) };
    while tilt_mean(&b, z) < mu {
        a = z;
        z *= 2.0;
        if z > 1e6 {
            break;
        }
    }
    while tilt_mean(&b, a) > mu {
        z = a;
        a *= 2.0;
        if a < -1e6 {
            break;
        }
    }
    let mut theta = 0.5 * (a + z);
    for _ in 0..200 {
        theta = 0.5 * (a + z);
        let m = tilt_mean(&b, theta);
        if (m - mu).abs() <= MEAN_TOL * 1e-3 || z - a < 1e-15 {
            break;
        }
        if m < mu {
            a = theta;
        } else {
            z = theta;
        }
    }
    let probs = tilt_probs(&b, theta);
    debug_assert!((probs.iter().zip(&b).map(|(p, x)| p * x).sum::<f64>() - mu).abs() <= MEAN_TOL);
    Ok(LayerDistribution {
        probs,
        theta: Some(theta),
    })
}

/// Per-layer i.i.d. draw from the tilt matching the schedule's mean at `t`.
pub fn scheduled_sample(
    rng: &mut Rng,
    schedule: &BitSchedule,
    t: u64,
    layers: usize,
) -> Result<SubnetConfig> {
    let dist = tilted_distribution(&schedule.bits, target_mean(schedule, t), schedule.clamp)?;
    Ok(dist.sample_config(rng, &schedule.bits, layers))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub count: u64,
    pub mean: f64,
    /// Population variance of the average bit-width.
    pub variance: f64,
    pub histogram: Vec<HistogramBin>,
}

/// Fixed-width bins over `[lo, hi]`; the last bin is closed on the right.
pub fn histogram(values: &[f64], lo: f64, hi: f64, width: f64) -> Vec<HistogramBin> {
    let n_bins = (((hi - lo) / width).round() as usize).max(1);
    let mut bins: Vec<HistogramBin> = (0..n_bins)
        .map(|i| HistogramBin {
            bin_low: lo + i as f64 * width,
            bin_high: if i + 1 == n_bins { hi } else { lo + (i + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for &v in values {
        let idx = (((v - lo) / width) + 1e-9).floor();
        let idx = (idx.max(0.0) as usize).min(n_bins - 1);
        bins[idx].count += 1;
    }
    bins
}

pub fn collect_stats(configs: &[SubnetConfig], bits: &BitSet, bin_width: f64) -> Result<SampleStats> {
    if configs.is_empty() {
        return Err(QfaError::domain("no configurations to summarize"));
    }
    let values: Vec<f64> = configs.iter().map(avg_bit).collect();
    Ok(stats_from_values(&values, bits, bin_width))
}

pub(crate) fn stats_from_values(values: &[f64], bits: &BitSet, bin_width: f64) -> SampleStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    SampleStats {
        count: values.len() as u64,
        mean,
        variance,
        histogram: histogram(values, bits.min() as f64, bits.max() as f64, bin_width),
    }
}

/// Draws `n` configurations with the given sampler. Resource-balanced draws
/// are spread evenly over one schedule epoch.
pub fn draw_configs(
    rng: &mut Rng,
    mode: SamplerMode,
    schedule: &BitSchedule,
    layers: usize,
    n: usize,
) -> Result<Vec<SubnetConfig>> {
    (0..n)
        .map(|i| match mode {
            SamplerMode::Uniform => Ok(uniform_sample(rng, layers, &schedule.bits)),
            SamplerMode::ResourceBalanced => {
                let t = (i as u128 * schedule.schedule_len as u128 / n as u128) as u64;
                scheduled_sample(rng, schedule, t, layers)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn bits234() -> BitSet {
        BitSet::default()
    }

    fn schedule(len: u64, order: ScheduleOrder) -> BitSchedule {
        BitSchedule {
            schedule_len: len,
            order,
            ..Default::default()
        }
    }

    #[test]
    fn single_bit_has_one_config() {
        let bits = BitSet::new(vec![3]).unwrap();
        let c = uniform_sample(&mut Rng::new(1), 5, &bits);
        assert_eq!(c, SubnetConfig::uniform(3, 5));
        assert_eq!(uniform_variance(5, &bits), 0.0);
    }

    #[test]
    fn uniform_variance_closed_form() {
        assert!((uniform_variance(1, &bits234()) - 2.0 / 3.0).abs() < 1e-15);
        assert!((uniform_variance(32, &bits234()) - 1.0 / 48.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_frequencies_are_balanced() {
        let mut rng = Rng::new(2);
        let mut counts = [0usize; 3];
        for _ in 0..100_000 {
            let c = uniform_sample(&mut rng, 1, &bits234());
            counts[(c.bits[0] - 2) as usize] += 1;
        }
        for c in counts {
            assert!(((c as f64 / 1e5) - 1.0 / 3.0).abs() < 0.01);
        }
    }

    #[test]
    fn triangular_mean_landmarks() {
        let s = schedule(8000, ScheduleOrder::HighToLowFirst);
        assert_eq!(target_mean(&s, 0), 4.0);
        assert_eq!(target_mean(&s, 4000), 2.0);
        assert_eq!(target_mean(&s, 2000), 3.0);
        assert_eq!(target_mean(&s, 8000), 4.0);
        let r = schedule(8000, ScheduleOrder::LowToHighFirst);
        assert_eq!(target_mean(&r, 0), 2.0);
        assert_eq!(target_mean(&r, 4000), 4.0);
    }

    #[test]
    fn tilt_at_midpoint_is_uniform() {
        let d = tilted_distribution(&bits234(), 3.0, 0.05).unwrap();
        assert_eq!(d.probs, vec![1.0 / 3.0; 3]);
        assert_eq!(d.theta, Some(0.0));
    }

    #[test]
    fn tilt_at_three_and_a_half() {
        // e^θ solves x² - x - 3 = 0.
        let x = (1.0 + 13f64.sqrt()) / 2.0;
        let z = 1.0 + x + x * x;
        let want = [1.0 / z, x / z, x * x / z];
        let d = tilted_distribution(&bits234(), 3.5, 0.05).unwrap();
        for (p, w) in d.probs.iter().zip(want) {
            assert!((p - w).abs() < 1e-9);
        }
        assert!((d.theta.unwrap() - x.ln()).abs() < 1e-8);
        assert!((d.mean(&bits234()) - 3.5).abs() < 1e-9);
    }

    #[test]
    fn clamps_to_point_masses() {
        assert_eq!(tilted_distribution(&bits234(), 4.0, 0.05).unwrap().probs, vec![0.0, 0.0, 1.0]);
        assert_eq!(tilted_distribution(&bits234(), 2.03, 0.05).unwrap().probs, vec![1.0, 0.0, 0.0]);
        assert!(tilted_distribution(&bits234(), 4.5, 0.05).is_err());
        assert!(tilted_distribution(&bits234(), 1.0, 0.05).is_err());
    }

    #[test]
    fn restriction_renormalizes() {
        let d = tilted_distribution(&bits234(), 3.0, 0.05).unwrap();
        let r = d.restricted(&[false, true, true]).unwrap();
        assert_eq!(r.probs, vec![0.0, 0.5, 0.5]);
        let point = tilted_distribution(&bits234(), 2.0, 0.05).unwrap();
        assert_eq!(point.restricted(&[false, true, true]).unwrap().probs, vec![0.0, 0.5, 0.5]);
        assert!(d.restricted(&[false, false, false]).is_err());
    }

    #[test]
    fn scheduled_mean_tracks_target() {
        let s = BitSchedule::default();
        let mut rng = Rng::new(3);
        for t in [0, 1000, 2500, 4000, 5500, 7000] {
            let mu = target_mean(&s, t);
            let mean = (0..10_000)
                .map(|_| scheduled_sample(&mut rng, &s, t, 8).unwrap().avg_bit())
                .sum::<f64>()
                / 1e4;
            assert!((mean - mu).abs() < 0.02, "t={t}: {mean} vs {mu}");
        }
    }

    #[test]
    fn midpoint_schedule_matches_uniform_sampling() {
        let s = BitSchedule::default();
        let mut rng = Rng::new(4);
        let sched: Vec<_> = (0..100_000).map(|_| scheduled_sample(&mut rng, &s, 2000, 8).unwrap()).collect();
        let unif: Vec<_> = (0..100_000).map(|_| uniform_sample(&mut rng, 8, &s.bits)).collect();
        let a = collect_stats(&sched, &s.bits, 0.25).unwrap();
        let b = collect_stats(&unif, &s.bits, 0.25).unwrap();
        assert!((a.mean - b.mean).abs() / b.mean < 0.05);
        assert!((a.variance - b.variance).abs() / b.variance < 0.05);
    }

    #[test]
    fn stats_examples() {
        let bits = bits234();
        let one = collect_stats(&[SubnetConfig::new(vec![2, 2])], &bits, 0.25).unwrap();
        assert_eq!((one.mean, one.variance), (2.0, 0.0));
        let two = collect_stats(
            &[SubnetConfig::new(vec![2, 2]), SubnetConfig::new(vec![4, 4])],
            &bits,
            0.25,
        )
        .unwrap();
        assert_eq!((two.mean, two.variance), (3.0, 1.0));
        assert_eq!(two.histogram.iter().map(|b| b.count).sum::<u64>(), 2);
        assert_eq!(two.histogram.last().unwrap().count, 1);
        assert!(collect_stats(&[], &bits, 0.25).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(schedule(1, ScheduleOrder::HighToLowFirst).validate().is_err());
        let mut s = BitSchedule::default();
        s.clamp = 1.0;
        assert!(s.validate().is_err());
        s.clamp = 0.0;
        assert!(s.validate().is_ok());
    }

    proptest! {
        #[test]
        fn tilt_matches_mean(mu in 2.05f64..=3.95) {
            let d = tilted_distribution(&bits234(), mu, 0.05).unwrap();
            prop_assert!((d.mean(&bits234()) - mu).abs() <= 1e-6);
            prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(d.probs.iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn tilt_is_monotone(mu in 2.05f64..3.9, step in 1e-3f64..0.05) {
            let a = tilted_distribution(&bits234(), mu, 0.05).unwrap();
            let b = tilted_distribution(&bits234(), mu + step, 0.05).unwrap();
            prop_assert!(b.theta.unwrap() > a.theta.unwrap());
            prop_assert!(b.probs[2] > a.probs[2]);
        }

        #[test]
        fn schedule_is_symmetric_and_periodic(len in 2u64..20_000, frac in 0.0f64..1.0, order in prop_oneof![Just(ScheduleOrder::HighToLowFirst), Just(ScheduleOrder::LowToHighFirst)]) {
            let s = schedule(len, order);
            let t = ((len as f64) * frac) as u64;
            prop_assert!((target_mean(&s, t) - target_mean(&s, len - t)).abs() < 1e-12);
            prop_assert_eq!(target_mean(&s, len), target_mean(&s, 0));
            prop_assert!((target_mean(&s, t + 3 * len) - target_mean(&s, t)).abs() < 1e-12);
        }
    }
}
