//! The layer-wise mixed-precision supernet.
//!
//! The toy language model embeds the last `context` tokens (concatenated to
//! `hidden` features), runs `layers` residual blocks `h ← h + relu(W·h)` and
//! projects to vocabulary logits. In the supernet every block holds one
//! frozen quantized copy of `W` per bit-width, each paired with its own
//! group-tied adapter; a [`SubnetConfig`] picks one slot per block.
//!
//! Activations are laid out features × batch throughout.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::adapter::{init_adapter, merge, qlora_linear_pooled, AdapterGrads, GroupLoRA};
use crate::error::{QfaError, Result};
use crate::quant::{dequantize, quantize_model, QuantizedTensor};
use crate::tensor::{group_expand, group_sum, matmul, matmul_nt, matmul_tn, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Dims {
    pub vocab: usize,
    pub context: usize,
    pub hidden: usize,
    pub layers: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims {
            vocab: 32,
            context: 8,
            hidden: 64,
            layers: 8,
        }
    }
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.context == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(QfaError::config("model dimensions must be positive"));
        }
        if self.vocab > u16::MAX as usize + 1 {
            return Err(QfaError::config("vocabulary too large for 16-bit token ids"));
        }
        if self.hidden % self.context != 0 {
            return Err(QfaError::config(format!(
                "hidden size {} not divisible by context {}",
                self.hidden, self.context
            )));
        }
        Ok(())
    }

    /// Per-token embedding width.
    pub fn embed_dim(&self) -> usize {
        self.hidden / self.context
    }
}

/// Sorted, strictly increasing set of candidate bit-widths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct BitSet(Vec<u8>);

impl BitSet {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(QfaError::config("empty bit set"));
        }
        if bits.windows(2).any(|w| w[0] >= w[1]) {
            return Err(QfaError::config(format!(
                "bit set {bits:?} must be strictly increasing"
            )));
        }
        if bits.iter().any(|&b| b == 0 || b > crate::quant::MAX_BITS) {
            return Err(QfaError::config(format!("bit set {bits:?} out of range")));
        }
        Ok(BitSet(bits))
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> u8 {
        self.0[0]
    }

    pub fn max(&self) -> u8 {
        *self.0.last().unwrap()
    }

    pub fn index_of(&self, bit: u8) -> Option<usize> {
        self.0.binary_search(&bit).ok()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| b as f64).collect()
    }
}

impl Default for BitSet {
    fn default() -> Self {
        BitSet(vec![2, 3, 4])
    }
}

impl TryFrom<Vec<u8>> for BitSet {
    type Error = QfaError;
    fn try_from(v: Vec<u8>) -> Result<Self> {
        BitSet::new(v)
    }
}

impl From<BitSet> for Vec<u8> {
    fn from(b: BitSet) -> Self {
        b.0
    }
}

/// One bit-width per block; serializes as a plain JSON integer array.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubnetConfig {
    pub bits: Vec<u8>,
}

impl SubnetConfig {
    pub fn new(bits: Vec<u8>) -> Self {
        SubnetConfig { bits }
    }

    pub fn uniform(bit: u8, layers: usize) -> Self {
        SubnetConfig {
            bits: vec![bit; layers],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn validate(&self, layers: usize, bits: &BitSet) -> Result<()> {
        if self.bits.len() != layers {
            return Err(QfaError::domain(format!(
                "config has {} entries, model has {layers} layers",
                self.bits.len()
            )));
        }
        if let Some(b) = self.bits.iter().find(|&&b| bits.index_of(b).is_none()) {
            return Err(QfaError::domain(format!(
                "bit-width {b} not in {:?}",
                bits.as_slice()
            )));
        }
        Ok(())
    }

    /// Average bit-width.
    pub fn avg_bit(&self) -> f64 {
        avg_bit(self)
    }
}

impl fmt::Display for SubnetConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, b) in self.bits.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{b}")?;
        }
        write!(f, "]")
    }
}

pub fn avg_bit(config: &SubnetConfig) -> f64 {
    if config.bits.is_empty() {
        return 0.0;
    }
    config.bits.iter().map(|&b| b as f64).sum::<f64>() / config.bits.len() as f64
}

/// Number of distinct subnets, `|bits|^layers`.
pub fn space_size(bits: &BitSet, layers: usize) -> u128 {
    (bits.len() as u128).pow(layers as u32)
}

/// Flattened `(n × context)` token windows; row `i` is the context for example `i`.
pub fn check_tokens(dims: &Dims, contexts: &[u16]) -> Result<usize> {
    if contexts.len() % dims.context != 0 {
        return Err(QfaError::shape(format!(
            "{} context tokens not a multiple of window {}",
            contexts.len(),
            dims.context
        )));
    }
    if let Some(t) = contexts.iter().find(|&&t| t as usize >= dims.vocab) {
        return Err(QfaError::domain(format!(
            "token id {t} outside vocabulary of {}",
            dims.vocab
        )));
    }
    Ok(contexts.len() / dims.context)
}

/// Concatenated context embeddings, `hidden × n`.
pub fn embed(dims: &Dims, embedding: &Matrix, contexts: &[u16]) -> Result<Matrix> {
    let n = check_tokens(dims, contexts)?;
    let e = dims.embed_dim();
    let mut h = Matrix::zeros(dims.hidden, n);
    for (col, window) in contexts.chunks_exact(dims.context).enumerate() {
        for (p, &tok) in window.iter().enumerate() {
            let emb = embedding.row(tok as usize);
            for (i, &v) in emb.iter().enumerate() {
                h.set(p * e + i, col, v);
            }
        }
    }
    Ok(h)
}

fn relu_residual(h: &Matrix, z: &Matrix) -> Matrix {
    let mut out = h.clone();
    out.data_mut()
        .iter_mut()
        .zip(z.data())
        .for_each(|(o, &v)| *o += v.max(0.0));
    out
}

fn relu_mask(dh: &Matrix, z: &Matrix) -> Matrix {
    let mut out = dh.clone();
    out.data_mut()
        .iter_mut()
        .zip(z.data())
        .for_each(|(o, &v)| {
            if v <= 0.0 {
                *o = 0.0
            }
        });
    out
}

/// Full-precision source model.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatModel {
    pub dims: Dims,
    /// `vocab × embed_dim`
    pub embedding: Matrix,
    /// `layers` matrices, each `hidden × hidden`
    pub blocks: Vec<Matrix>,
    /// `vocab × hidden`
    pub head: Matrix,
}

pub struct FloatCache {
    inputs: Vec<Matrix>,
    pre_acts: Vec<Matrix>,
}

pub struct FloatGrads {
    pub embedding: Matrix,
    pub blocks: Vec<Matrix>,
    pub head: Matrix,
}

impl FloatModel {
    /// Random initialization: unit-variance embeddings, `1/√fan_in` weights.
    pub fn init(dims: Dims, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let d = dims.hidden;
        let w_std = 1.0 / (d as f32).sqrt();
        Ok(FloatModel {
            dims,
            embedding: rng.normal_matrix(dims.vocab, dims.embed_dim(), 1.0),
            blocks: (0..dims.layers)
                .map(|_| rng.normal_matrix(d, d, w_std))
                .collect(),
            head: rng.normal_matrix(dims.vocab, d, w_std),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let d = self.dims.hidden;
        if self.embedding.shape() != (self.dims.vocab, self.dims.embed_dim())
            || self.head.shape() != (self.dims.vocab, d)
            || self.blocks.len() != self.dims.layers
            || self.blocks.iter().any(|b| b.shape() != (d, d))
        {
            return Err(QfaError::shape("float model tensors do not match dims"));
        }
        Ok(())
    }

    pub fn forward(&self, contexts: &[u16]) -> Result<Matrix> {
        Ok(self.forward_cached(contexts)?.0)
    }

    pub fn forward_cached(&self, contexts: &[u16]) -> Result<(Matrix, FloatCache)> {
        let mut h = embed(&self.dims, &self.embedding, contexts)?;
        let mut inputs = Vec::with_capacity(self.blocks.len() + 1);
        let mut pre_acts = Vec::with_capacity(self.blocks.len());
        for w in &self.blocks {
            let z = matmul(w, &h)?;
            let next = relu_residual(&h, &z);
            inputs.push(h);
            pre_acts.push(z);
            h = next;
        }
        let logits = matmul(&self.head, &h)?;
        inputs.push(h);
        Ok((logits, FloatCache { inputs, pre_acts }))
    }

    /// Gradients of every parameter given `d_logits`.
    pub fn backward(&self, contexts: &[u16], cache: &FloatCache, d_logits: &Matrix) -> Result<FloatGrads> {
        let h_last = cache.inputs.last().unwrap();
        let head = matmul_nt(d_logits, h_last)?;
        let mut dh = matmul_tn(&self.head, d_logits)?;
        let mut blocks = vec![Matrix::zeros(0, 0); self.blocks.len()];
        for l in (0..self.blocks.len()).rev() {
            let dz = relu_mask(&dh, &cache.pre_acts[l]);
            blocks[l] = matmul_nt(&dz, &cache.inputs[l])?;
            dh.add_assign(&matmul_tn(&self.blocks[l], &dz)?)?;
        }
        let e = self.dims.embed_dim();
        let mut embedding = Matrix::zeros(self.dims.vocab, e);
        for (col, window) in contexts.chunks_exact(self.dims.context).enumerate() {
            for (p, &tok) in window.iter().enumerate() {
                let row = embedding.row_mut(tok as usize);
                for (i, r) in row.iter_mut().enumerate() {
                    *r += dh.get(p * e + i, col);
                }
            }
        }
        Ok(FloatGrads {
            embedding,
            blocks,
            head,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterMode {
    /// One adapter per (layer, bit-width).
    PerBit,
    /// One adapter per layer, shared by every bit-width.
    Shared,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantSlot {
    pub(crate) q: QuantizedTensor,
    scaled: Matrix,
}

impl QuantSlot {
    pub fn new(q: QuantizedTensor) -> Self {
        let scaled = q.scaled_codes();
        QuantSlot { q, scaled }
    }

    pub fn tensor(&self) -> &QuantizedTensor {
        &self.q
    }
}

/// One block of the supernet: a frozen quantized weight per bit-width plus adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedLayer {
    slots: Vec<QuantSlot>,
    adapters: Vec<GroupLoRA>,
    mode: AdapterMode,
}

impl MixedLayer {
    pub fn new(slots: Vec<QuantSlot>, adapters: Vec<GroupLoRA>, mode: AdapterMode) -> Result<Self> {
        let want = match mode {
            AdapterMode::PerBit => slots.len(),
            AdapterMode::Shared => 1,
        };
        if slots.is_empty() || adapters.len() != want {
            return Err(QfaError::shape(format!(
                "{} slots with {} adapters in {mode:?} mode",
                slots.len(),
                adapters.len()
            )));
        }
        let first = &slots[0].q;
        for s in &slots {
            if s.q.d_out() != first.d_out()
                || s.q.d_in() != first.d_in()
                || s.q.spec().group_size != first.spec().group_size
            {
                return Err(QfaError::shape("slots disagree on shape or group size"));
            }
        }
        for a in &adapters {
            if a.d_out() != first.d_out()
                || a.n_groups() != first.n_groups()
                || a.group_size() != first.spec().group_size
            {
                return Err(QfaError::shape("adapter does not fit its slots"));
            }
        }
        Ok(MixedLayer {
            slots,
            adapters,
            mode,
        })
    }

    pub fn slots(&self) -> &[QuantSlot] {
        &self.slots
    }

    pub fn adapters(&self) -> &[GroupLoRA] {
        &self.adapters
    }

    pub fn adapter_index(&self, bit_index: usize) -> usize {
        match self.mode {
            AdapterMode::PerBit => bit_index,
            AdapterMode::Shared => 0,
        }
    }

    pub fn adapter_for(&self, bit_index: usize) -> &GroupLoRA {
        &self.adapters[self.adapter_index(bit_index)]
    }

    pub(crate) fn adapter_mut(&mut self, adapter_index: usize) -> &mut GroupLoRA {
        &mut self.adapters[adapter_index]
    }
}

/// Identifies one trainable adapter: `adapter` indexes the layer's adapter list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AdapterKey {
    pub layer: usize,
    pub adapter: usize,
}

/// Gradients for exactly the parameters a path touched.
#[derive(Debug)]
pub struct PathGrads {
    pub adapters: Vec<(AdapterKey, AdapterGrads)>,
    pub head: Option<Matrix>,
}

pub struct ForwardCache {
    config: SubnetConfig,
    n: usize,
    inputs: Vec<Matrix>,
    pooled: Vec<Matrix>,
    pre_acts: Vec<Matrix>,
}

impl ForwardCache {
    pub fn config(&self) -> &SubnetConfig {
        &self.config
    }

    /// Hidden state entering block `l` (`l == layers` is the head input).
    pub fn activation(&self, l: usize) -> &Matrix {
        &self.inputs[l]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupernetModel {
    pub dims: Dims,
    pub bits: BitSet,
    pub group_size: usize,
    pub rank: usize,
    pub adapter_mode: AdapterMode,
    pub head_trainable: bool,
    pub embedding: Matrix,
    pub blocks: Vec<MixedLayer>,
    pub head: Matrix,
}

pub struct SupernetOptions {
    pub bits: BitSet,
    pub group_size: usize,
    pub rank: usize,
    pub init_std: f32,
    pub adapter_mode: AdapterMode,
    pub head_trainable: bool,
}

impl Default for SupernetOptions {
    fn default() -> Self {
        SupernetOptions {
            bits: BitSet::default(),
            group_size: 16,
            rank: crate::adapter::DEFAULT_RANK,
            init_std: crate::adapter::DEFAULT_INIT_STD,
            adapter_mode: AdapterMode::PerBit,
            head_trainable: false,
        }
    }
}

pub fn build_supernet(float: &FloatModel, opts: &SupernetOptions, rng: &mut Rng) -> Result<SupernetModel> {
    float.validate()?;
    let d = float.dims.hidden;
    let g = opts.group_size;
    if g == 0 || d % g != 0 {
        return Err(QfaError::config(format!(
            "hidden size {d} not divisible by group size {g}"
        )));
    }
    let quantized = quantize_model(&float.blocks, opts.bits.as_slice(), g)?;
    let n_adapters = match opts.adapter_mode {
        AdapterMode::PerBit => opts.bits.len(),
        AdapterMode::Shared => 1,
    };
    let mut blocks = Vec::with_capacity(float.blocks.len());
    for layer_slots in quantized {
        let slots = layer_slots.into_iter().map(QuantSlot::new).collect();
        let adapters = (0..n_adapters)
            .map(|_| init_adapter(rng, d, d / g, opts.rank, opts.init_std, g))
            .collect::<Result<Vec<_>>>()?;
        blocks.push(MixedLayer::new(slots, adapters, opts.adapter_mode)?);
    }
    Ok(SupernetModel {
        dims: float.dims,
        bits: opts.bits.clone(),
        group_size: g,
        rank: opts.rank,
        adapter_mode: opts.adapter_mode,
        head_trainable: opts.head_trainable,
        embedding: float.embedding.clone(),
        blocks,
        head: float.head.clone(),
    })
}

impl SupernetModel {
    pub fn space_size(&self) -> u128 {
        space_size(&self.bits, self.dims.layers)
    }

    pub fn quantized_tensor_count(&self) -> usize {
        self.blocks.iter().map(|b| b.slots.len()).sum()
    }

    pub fn adapter_count(&self) -> usize {
        self.blocks.iter().map(|b| b.adapters.len()).sum()
    }

    fn slot_indices(&self, config: &SubnetConfig) -> Result<Vec<usize>> {
        config.validate(self.dims.layers, &self.bits)?;
        Ok(config
            .bits
            .iter()
            .map(|&b| self.bits.index_of(b).unwrap())
            .collect())
    }

    /// Key of the adapter used at `layer` when running `bit`.
    pub fn adapter_key(&self, layer: usize, bit: u8) -> Option<AdapterKey> {
        let bi = self.bits.index_of(bit)?;
        Some(AdapterKey {
            layer,
            adapter: self.blocks.get(layer)?.adapter_index(bi),
        })
    }

    pub fn adapter(&self, key: AdapterKey) -> &GroupLoRA {
        &self.blocks[key.layer].adapters[key.adapter]
    }

    pub(crate) fn adapter_mut(&mut self, key: AdapterKey) -> &mut GroupLoRA {
        self.blocks[key.layer].adapter_mut(key.adapter)
    }

    pub fn forward(&self, config: &SubnetConfig, contexts: &[u16]) -> Result<Matrix> {
        Ok(mixed_forward(self, config, contexts)?.0)
    }
}

/// Runs the selected single path; returns logits (`vocab × n`) and the cache for backward.
pub fn mixed_forward(
    model: &SupernetModel,
    config: &SubnetConfig,
    contexts: &[u16],
) -> Result<(Matrix, ForwardCache)> {
    let slots = model.slot_indices(config)?;
    let mut h = embed(&model.dims, &model.embedding, contexts)?;
    let n = h.cols();
    let layers = model.blocks.len();
    let mut inputs = Vec::with_capacity(layers + 1);
    let mut pooled_all = Vec::with_capacity(layers);
    let mut pre_acts = Vec::with_capacity(layers);
    for (block, &bi) in model.blocks.iter().zip(&slots) {
        let slot = &block.slots[bi];
        let pooled = group_sum(&h, model.group_size)?;
        let z = qlora_linear_pooled(&slot.q, &slot.scaled, Some(block.adapter_for(bi)), &h, &pooled)?;
        let next = relu_residual(&h, &z);
        inputs.push(h);
        pooled_all.push(pooled);
        pre_acts.push(z);
        h = next;
    }
    let logits = matmul(&model.head, &h)?;
    inputs.push(h);
    Ok((
        logits,
        ForwardCache {
            config: config.clone(),
            n,
            inputs,
            pooled: pooled_all,
            pre_acts,
        },
    ))
}

/// Backpropagates along the cached path. Only the path's adapters (and the
/// head, when trainable) appear in the result.
pub fn mixed_backward(
    model: &SupernetModel,
    config: &SubnetConfig,
    cache: &ForwardCache,
    d_logits: &Matrix,
) -> Result<PathGrads> {
    if &cache.config != config {
        return Err(QfaError::domain("cache was produced by a different config"));
    }
    if d_logits.shape() != (model.dims.vocab, cache.n) {
        return Err(QfaError::shape(format!(
            "d_logits {:?}, expected {}x{}",
            d_logits.shape(),
            model.dims.vocab,
            cache.n
        )));
    }
    let slots = model.slot_indices(config)?;
    let layers = model.blocks.len();
    let head = if model.head_trainable {
        Some(matmul_nt(d_logits, &cache.inputs[layers])?)
    } else {
        None
    };
    let mut dh = matmul_tn(&model.head, d_logits)?;
    let mut adapters = Vec::with_capacity(layers);
    for l in (0..layers).rev() {
        let block = &model.blocks[l];
        let bi = slots[l];
        let adapter = block.adapter_for(bi);
        let dz = relu_mask(&dh, &cache.pre_acts[l]);
        let grads = adapter.backward_pooled(&cache.pooled[l], &dz)?;
        adapters.push((
            AdapterKey {
                layer: l,
                adapter: block.adapter_index(bi),
            },
            grads,
        ));
        if l > 0 {
            let slot = &block.slots[bi];
            dh.add_assign(&matmul_tn(&slot.scaled, &dz)?)?;
            dh.add_assign(&group_expand(&matmul_tn(slot.q.zeros(), &dz)?, model.group_size))?;
            dh.add_assign(&adapter.input_grad(&dz)?)?;
        }
    }
    adapters.reverse();
    Ok(PathGrads { adapters, head })
}

/// A standalone subnet with adapters folded into the zero factors.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedSubnet {
    pub dims: Dims,
    pub config: SubnetConfig,
    pub embedding: Matrix,
    pub layers: Vec<QuantizedTensor>,
    pub head: Matrix,
}

impl QuantizedSubnet {
    pub fn forward(&self, contexts: &[u16]) -> Result<Matrix> {
        let mut h = embed(&self.dims, &self.embedding, contexts)?;
        for q in &self.layers {
            let z = matmul(&dequantize(q), &h)?;
            h = relu_residual(&h, &z);
        }
        matmul(&self.head, &h)
    }

    pub fn avg_bit(&self) -> f64 {
        self.config.avg_bit()
    }

    /// Bit-packed weight storage in bytes (codes plus f32 scale/zero pairs).
    pub fn weight_bytes(&self) -> f64 {
        self.layers.iter().map(QuantizedTensor::packed_bytes).sum()
    }
}

pub fn extract_subnet(model: &SupernetModel, config: &SubnetConfig) -> Result<QuantizedSubnet> {
    let slots = model.slot_indices(config)?;
    let layers = model
        .blocks
        .iter()
        .zip(&slots)
        .map(|(block, &bi)| merge(block.adapter_for(bi), &block.slots[bi].q))
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedSubnet {
        dims: model.dims,
        config: config.clone(),
        embedding: model.embedding.clone(),
        layers,
        head: model.head.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize;
    use crate::quant::QuantSpec;

    pub(crate) fn small_dims() -> Dims {
        Dims {
            vocab: 11,
            context: 2,
            hidden: 8,
            layers: 3,
        }
    }

    fn contexts(dims: &Dims, n: usize, rng: &mut Rng) -> Vec<u16> {
        (0..n * dims.context).map(|_| rng.index(dims.vocab) as u16).collect()
    }

    fn small_supernet(mode: AdapterMode) -> (FloatModel, SupernetModel) {
        let mut rng = Rng::new(10);
        let float = FloatModel::init(small_dims(), &mut rng).unwrap();
        let opts = SupernetOptions {
            group_size: 4,
            rank: 2,
            adapter_mode: mode,
            ..Default::default()
        };
        let sn = build_supernet(&float, &opts, &mut rng).unwrap();
        (float, sn)
    }

    #[test]
    fn avg_bit_examples() {
        assert_eq!(avg_bit(&SubnetConfig::new(vec![2, 3, 4, 3])), 3.0);
        assert_eq!(avg_bit(&SubnetConfig::uniform(4, 5)), 4.0);
        assert!((avg_bit(&SubnetConfig::new(vec![2, 2, 3])) - 7.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn default_space_counts() {
        let mut rng = Rng::new(1);
        let float = FloatModel::init(Dims::default(), &mut rng).unwrap();
        let sn = build_supernet(&float, &SupernetOptions::default(), &mut rng).unwrap();
        assert_eq!(sn.quantized_tensor_count(), 24);
        assert_eq!(sn.adapter_count(), 24);
        assert_eq!(sn.space_size(), 6561);
    }

    #[test]
    fn fresh_supernet_matches_dequantized_baseline() {
        let (float, sn) = small_supernet(AdapterMode::PerBit);
        let mut rng = Rng::new(2);
        let ctx = contexts(&sn.dims, 6, &mut rng);
        for bits in [vec![2, 3, 4], vec![4, 4, 4], vec![2, 2, 2]] {
            let cfg = SubnetConfig::new(bits);
            let got = sn.forward(&cfg, &ctx).unwrap();
            let mut baseline = float.clone();
            for (w, &b) in baseline.blocks.iter_mut().zip(&cfg.bits) {
                *w = dequantize(&quantize(w, QuantSpec::new(b, 4).unwrap()).unwrap());
            }
            let want = baseline.forward(&ctx).unwrap();
            assert!(got.rel_error(&want).unwrap() <= 1e-5);
        }
    }

    #[test]
    fn four_bit_path_tracks_float_model() {
        let (float, sn) = small_supernet(AdapterMode::PerBit);
        let ctx = contexts(&sn.dims, 16, &mut Rng::new(3));
        let f = float.forward(&ctx).unwrap();
        let e4 = sn.forward(&SubnetConfig::uniform(4, 3), &ctx).unwrap().rel_error(&f).unwrap();
        let e2 = sn.forward(&SubnetConfig::uniform(2, 3), &ctx).unwrap().rel_error(&f).unwrap();
        assert!(e4 < 0.2, "4-bit relative deviation {e4}");
        assert!(e4 < e2);
    }

    #[test]
    fn prefix_determinism() {
        let (_, sn) = small_supernet(AdapterMode::PerBit);
        let ctx = contexts(&sn.dims, 5, &mut Rng::new(4));
        let (_, a) = mixed_forward(&sn, &SubnetConfig::new(vec![3, 2, 4]), &ctx).unwrap();
        let (_, b) = mixed_forward(&sn, &SubnetConfig::new(vec![3, 2, 2]), &ctx).unwrap();
        for l in 0..=2 {
            assert_eq!(a.activation(l), b.activation(l));
        }
        assert_ne!(a.activation(3), b.activation(3));
    }

    #[test]
    fn invalid_inputs_rejected() {
        let (_, sn) = small_supernet(AdapterMode::PerBit);
        assert!(sn.forward(&SubnetConfig::new(vec![2, 3]), &[0, 1]).is_err());
        assert!(sn.forward(&SubnetConfig::new(vec![2, 3, 5]), &[0, 1]).is_err());
        assert!(matches!(
            sn.forward(&SubnetConfig::uniform(2, 3), &[0, 11]),
            Err(QfaError::Domain(_))
        ));
        assert!(sn.forward(&SubnetConfig::uniform(2, 3), &[0]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let (_, mut sn) = small_supernet(AdapterMode::PerBit);
        sn.head_trainable = true;
        let cfg = SubnetConfig::new(vec![2, 4, 3]);
        let ctx = contexts(&sn.dims, 4, &mut Rng::new(5));
        let (logits, cache) = mixed_forward(&sn, &cfg, &ctx).unwrap();
        let g = mixed_backward(&sn, &cfg, &cache, &Matrix::zeros(logits.rows(), logits.cols())).unwrap();
        for (_, ag) in &g.adapters {
            assert!(ag.d_a_tilde.data().iter().chain(ag.d_b.data()).all(|&v| v == 0.0));
        }
        assert!(g.head.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn off_path_adapters_absent_from_grads() {
        let (_, sn) = small_supernet(AdapterMode::PerBit);
        let cfg = SubnetConfig::new(vec![2, 4, 3]);
        let ctx = contexts(&sn.dims, 4, &mut Rng::new(6));
        let (logits, cache) = mixed_forward(&sn, &cfg, &ctx).unwrap();
        let g = mixed_backward(&sn, &cfg, &cache, &logits).unwrap();
        let keys: Vec<_> = g.adapters.iter().map(|(k, _)| *k).collect();
        assert_eq!(
            keys,
            vec![
                AdapterKey { layer: 0, adapter: 0 },
                AdapterKey { layer: 1, adapter: 2 },
                AdapterKey { layer: 2, adapter: 1 },
            ]
        );
        assert!(g.head.is_none());
        let other = SubnetConfig::new(vec![2, 4, 4]);
        assert!(mixed_backward(&sn, &other, &cache, &logits).is_err());
    }

    #[test]
    fn extraction_of_fresh_supernet_is_slot_selection() {
        let (_, sn) = small_supernet(AdapterMode::PerBit);
        let cfg = SubnetConfig::new(vec![3, 2, 4]);
        let sub = extract_subnet(&sn, &cfg).unwrap();
        for (l, q) in sub.layers.iter().enumerate() {
            let bi = sn.bits.index_of(cfg.bits[l]).unwrap();
            assert_eq!(q, sn.blocks[l].slots()[bi].tensor());
        }
    }

    #[test]
    fn shared_mode_has_one_adapter_per_layer() {
        let (_, sn) = small_supernet(AdapterMode::Shared);
        assert_eq!(sn.adapter_count(), 3);
        assert_eq!(sn.adapter_key(1, 4), Some(AdapterKey { layer: 1, adapter: 0 }));
    }

    #[test]
    fn bitset_validation() {
        assert!(BitSet::new(vec![]).is_err());
        assert!(BitSet::new(vec![3, 2]).is_err());
        assert!(BitSet::new(vec![2, 2]).is_err());
        assert!(BitSet::new(vec![0, 2]).is_err());
        let parsed: BitSet = serde_json::from_str("[2,3,4]").unwrap();
        assert_eq!(parsed, BitSet::default());
        assert!(serde_json::from_str::<BitSet>("[4,2]").is_err());
        assert_eq!(serde_json::to_string(&SubnetConfig::new(vec![2, 4])).unwrap(), "[2,4]");
    }
}
