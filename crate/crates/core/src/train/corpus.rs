//! Synthetic next-token corpus.
//!
//! The next symbol copies a fixed permutation of the symbol at one of a few
//! lags inside the context window, with the lag chosen at random per
//! position, or is uniform noise. The rule tables come from the seed; the
//! train and validation sequences come from separate random streams.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{QfaError, Result};
use crate::tensor::io::{load_u8, save_tensor, CodeMatrix, Tensor};
use crate::tensor::rng::streams;
use crate::tensor::Rng;

const RULE_STREAM: u64 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub vocab: usize,
    pub train_tokens: usize,
    pub val_tokens: usize,
    /// `(lag, probability)` pairs; lags are at most the model context.
    pub lags: Vec<(usize, f64)>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            vocab: 32,
            train_tokens: 200_000,
            val_tokens: 20_000,
            lags: vec![(1, 0.6), (2, 0.2), (8, 0.1)],
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self, context: usize) -> Result<()> {
        if self.vocab < 2 || self.vocab > 256 {
            return Err(QfaError::config("corpus vocabulary must be in 2..=256"));
        }
        let total: f64 = self.lags.iter().map(|l| l.1).sum();
        if self.lags.iter().any(|&(lag, p)| lag == 0 || lag > context || !(p >= 0.0))
            || total > 1.0 + 1e-12
        {
            return Err(QfaError::config(format!(
                "corpus lags must lie in 1..={context} with probabilities summing to at most 1"
            )));
        }
        let max_lag = self.lags.iter().map(|l| l.0).max().unwrap_or(0);
        if self.train_tokens <= context || self.val_tokens <= context.max(max_lag) {
            return Err(QfaError::config("corpus splits shorter than the context window"));
        }
        Ok(())
    }

    /// Probability of drawing a uniform noise symbol.
    pub fn noise(&self) -> f64 {
        1.0 - self.lags.iter().map(|l| l.1).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: usize,
    pub train: Vec<u16>,
    pub val: Vec<u16>,
}

fn permutation(rng: &mut Rng, n: usize) -> Vec<u16> {
    let mut p: Vec<u16> = (0..n as u16).collect();
    for i in (1..n).rev() {
        let j = rng.index(i + 1);
        p.swap(i, j);
    }
    p
}

fn generate_split(spec: &CorpusSpec, tables: &[Vec<u16>], rng: &mut Rng, len: usize) -> Vec<u16> {
    let max_lag = spec.lags.iter().map(|l| l.0).max().unwrap_or(1);
    let mut out: Vec<u16> = (0..max_lag.min(len))
        .map(|_| rng.index(spec.vocab) as u16)
        .collect();
    let mut weights: Vec<f64> = spec.lags.iter().map(|l| l.1).collect();
    weights.push(spec.noise().max(0.0));
    while out.len() < len {
        let choice = rng.categorical(&weights);
        let next = if choice < spec.lags.len() {
            let lag = spec.lags[choice].0;
            tables[choice][out[out.len() - lag] as usize]
        } else {
            rng.index(spec.vocab) as u16
        };
        out.push(next);
    }
    out
}

pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Corpus {
    let base = Rng::new(seed);
    let mut rule_rng = base.stream(RULE_STREAM);
    let tables: Vec<Vec<u16>> = spec
        .lags
        .iter()
        .map(|_| permutation(&mut rule_rng, spec.vocab))
        .collect();
    let train = generate_split(
        spec,
        &tables,
        &mut base.stream(streams::CORPUS_TRAIN),
        spec.train_tokens,
    );
    let val = generate_split(
        spec,
        &tables,
        &mut base.stream(streams::CORPUS_VAL),
        spec.val_tokens,
    );
    Corpus {
        vocab: spec.vocab,
        train,
        val,
    }
}

fn to_tensor(tokens: &[u16]) -> Tensor {
    Tensor::U8(
        CodeMatrix::from_vec(1, tokens.len(), tokens.iter().map(|&t| t as u8).collect())
            .expect("1 x n shape"),
    )
}

impl Corpus {
    /// Writes `train.bin` and `val.bin` (u8 tensor files, one row each).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| QfaError::io(dir, e))?;
        save_tensor(&dir.join("train.bin"), &to_tensor(&self.train))?;
        save_tensor(&dir.join("val.bin"), &to_tensor(&self.val))
    }

    pub fn load(dir: &Path, vocab: usize) -> Result<Corpus> {
        let read = |name: &str| -> Result<Vec<u16>> {
            let path = dir.join(name);
            let m = load_u8(&path)?;
            let tokens: Vec<u16> = m.data().iter().map(|&t| t as u16).collect();
            if tokens.iter().any(|&t| t as usize >= vocab) {
                return Err(QfaError::format(
                    &path,
                    format!("token outside vocabulary {vocab}"),
                ));
            }
            Ok(tokens)
        };
        Ok(Corpus {
            vocab,
            train: read("train.bin")?,
            val: read("val.bin")?,
        })
    }
}

/// Next-token examples cut from a token stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub context: usize,
    /// `n × context`, row-major.
    pub contexts: Vec<u16>,
    pub targets: Vec<u16>,
}

impl Dataset {
    pub fn from_tokens(tokens: &[u16], context: usize) -> Result<Dataset> {
        if tokens.len() <= context {
            return Err(QfaError::domain(
                "token stream shorter than the context window",
            ));
        }
        let n = tokens.len() - context;
        let mut contexts = Vec::with_capacity(n * context);
        let mut targets = Vec::with_capacity(n);
        for t in context..tokens.len() {
            contexts.extend_from_slice(&tokens[t - context..t]);
            targets.push(tokens[t]);
        }
        Ok(Dataset {
            context,
            contexts,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn window(&self, i: usize) -> &[u16] {
        &self.contexts[i * self.context..(i + 1) * self.context]
    }

    /// Examples `start..end` as (contexts, targets).
    pub fn slice(&self, start: usize, end: usize) -> (&[u16], &[u16]) {
        (
            &self.contexts[start * self.context..end * self.context],
            &self.targets[start..end],
        )
    }

    /// Uniform random minibatch, drawn with replacement.
    pub fn sample_batch(&self, rng: &mut Rng, size: usize) -> (Vec<u16>, Vec<u16>) {
        let mut ctx = Vec::with_capacity(size * self.context);
        let mut tgt = Vec::with_capacity(size);
        for _ in 0..size {
            let i = rng.index(self.len());
            ctx.extend_from_slice(self.window(i));
            tgt.push(self.targets[i]);
        }
        (ctx, tgt)
    }

    /// `n` examples spread evenly over the dataset (all of them if `n >= len`).
    pub fn strided_subset(&self, n: usize) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut contexts = Vec::with_capacity(n * self.context);
        let mut targets = Vec::with_capacity(n);
        for k in 0..n {
            let i = k * self.len() / n;
            contexts.extend_from_slice(self.window(i));
            targets.push(self.targets[i]);
        }
        Dataset {
            context: self.context,
            contexts,
            targets,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            train_tokens: 5000,
            val_tokens: 1000,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = generate_corpus(&small(), 3);
        let b = generate_corpus(&small(), 3);
        assert_eq!(a, b);
        a.save(&dir.path().join("a")).unwrap();
        b.save(&dir.path().join("b")).unwrap();
        for f in ["train.bin", "val.bin"] {
            assert_eq!(
                std::fs::read(dir.path().join("a").join(f)).unwrap(),
                std::fs::read(dir.path().join("b").join(f)).unwrap()
            );
        }
        assert_eq!(Corpus::load(&dir.path().join("a"), 32).unwrap(), a);
    }

    #[test]
    fn splits_come_from_different_streams() {
        let c = generate_corpus(&small(), 3);
        assert_ne!(&c.train[..1000], &c.val[..]);
    }

    #[test]
    fn every_symbol_appears() {
        let c = generate_corpus(&CorpusSpec::default(), 1);
        let mut seen = [0usize; 32];
        c.train.iter().for_each(|&t| seen[t as usize] += 1);
        assert!(seen.iter().all(|&n| n > 0));
    }

    #[test]
    fn lag_one_rule_holds_at_expected_rate() {
        // Most frequent successor of each symbol is its lag-1 image.
        let c = generate_corpus(&CorpusSpec::default(), 2);
        let mut table = vec![[0usize; 32]; 32];
        for w in c.train.windows(2) {
            table[w[0] as usize][w[1] as usize] += 1;
        }
        let hits: usize = table.iter().map(|r| *r.iter().max().unwrap()).sum();
        assert!(hits as f64 / (c.train.len() - 1) as f64 > 0.6);
    }

    #[test]
    fn dataset_windows() {
        let d = Dataset::from_tokens(&[1, 2, 3, 4, 5], 2).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.window(0), &[1, 2]);
        assert_eq!(d.targets, vec![3, 4, 5]);
        assert!(Dataset::from_tokens(&[1, 2], 2).is_err());
        assert_eq!(d.strided_subset(2).targets, vec![3, 4]);
    }

    #[test]
    fn spec_validation() {
        assert!(CorpusSpec::default().validate(8).is_ok());
        assert!(CorpusSpec::default().validate(4).is_err());
        let mut s = CorpusSpec::default();
        s.lags = vec![(1, 0.9), (2, 0.2)];
        assert!(s.validate(8).is_err());
    }
}
