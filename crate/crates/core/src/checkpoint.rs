//! Checkpoint directories: a `manifest.json` plus one tensor file per array.
//!
//! Three kinds share the layout: the float source model, the supernet (with
//! optional optimizer state for resuming), and a merged standalone subnet.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::GroupLoRA;
use crate::error::{QfaError, Result};
use crate::quant::{QuantSpec, QuantizedTensor};
use crate::supernet::{
    AdapterKey, AdapterMode, BitSet, Dims, FloatModel, MixedLayer, QuantSlot, QuantizedSubnet,
    SubnetConfig, SupernetModel,
};
use crate::tensor::io::{load_f32, load_u8, save_tensor, CodeMatrix, Tensor};
use crate::tensor::Matrix;
use crate::train::{AdamState, OptState, TrainState};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Float,
    Supernet,
    Subnet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub dtype: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantEntry {
    pub layer: usize,
    pub bit_width: u8,
    pub group_size: usize,
    pub codes: String,
    pub scales: String,
    pub zeros: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterEntry {
    pub layer: usize,
    pub adapter: usize,
    pub rank: usize,
    pub group_size: usize,
    pub a_tilde: String,
    pub b: String,
}

/// Step counters of the Adam moments stored alongside a supernet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptEntry {
    pub layer: usize,
    pub adapter: usize,
    pub a_tilde_step: u64,
    pub b_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStateEntry {
    pub next_step: u64,
    pub adapters: Vec<OptEntry>,
    pub head_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub kind: CheckpointKind,
    pub dims: Dims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits: Option<BitSet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_mode: Option<AdapterMode>,
    /// Whether the output head was trained (embeddings are always frozen).
    pub head_trainable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<SubnetConfig>,
    pub tensors: BTreeMap<String, TensorEntry>,
    #[serde(default)]
    pub quantized: Vec<QuantEntry>,
    #[serde(default)]
    pub adapters: Vec<AdapterEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_state: Option<TrainStateEntry>,
}

impl Manifest {
    fn new(kind: CheckpointKind, dims: Dims) -> Self {
        Manifest {
            version: FORMAT_VERSION,
            kind,
            dims,
            bits: None,
            group_size: None,
            rank: None,
            adapter_mode: None,
            head_trainable: false,
            config: None,
            tensors: BTreeMap::new(),
            quantized: Vec::new(),
            adapters: Vec::new(),
            train_state: None,
        }
    }
}

struct Writer<'a> {
    dir: &'a Path,
    manifest: Manifest,
}

impl Writer<'_> {
    fn put(&mut self, name: &str, tensor: Tensor) -> Result<String> {
        let file = format!("{name}.bin");
        let (dtype, rows, cols) = match &tensor {
            Tensor::F32(m) => ("f32", m.rows(), m.cols()),
            Tensor::U8(c) => ("u8", c.rows(), c.cols()),
        };
        save_tensor(&self.dir.join(&file), &tensor)?;
        self.manifest.tensors.insert(
            name.to_string(),
            TensorEntry {
                file,
                dtype: dtype.to_string(),
                rows,
                cols,
            },
        );
        Ok(name.to_string())
    }

    fn f32(&mut self, name: &str, m: &Matrix) -> Result<String> {
        self.put(name, Tensor::F32(m.clone()))
    }

    fn quant(&mut self, layer: usize, q: &QuantizedTensor) -> Result<()> {
        let spec = q.spec();
        let stem = format!("layer{layer}_bit{}", spec.bit_width);
        let entry = QuantEntry {
            layer,
            bit_width: spec.bit_width,
            group_size: spec.group_size,
            codes: self.put(&format!("{stem}_codes"), Tensor::U8(q.codes().clone()))?,
            scales: self.f32(&format!("{stem}_scales"), q.scales())?,
            zeros: self.f32(&format!("{stem}_zeros"), q.zeros())?,
        };
        self.manifest.quantized.push(entry);
        Ok(())
    }

    fn finish(self) -> Result<()> {
        let path = self.dir.join(MANIFEST);
        let mut text = serde_json::to_string_pretty(&self.manifest).map_err(|e| QfaError::json(&path, e))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| QfaError::io(&path, e))
    }
}

fn writer(dir: &Path, kind: CheckpointKind, dims: Dims) -> Result<Writer<'_>> {
    std::fs::create_dir_all(dir).map_err(|e| QfaError::io(dir, e))?;
    Ok(Writer {
        dir,
        manifest: Manifest::new(kind, dims),
    })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| QfaError::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| QfaError::json(&path, e))?;
    if m.version != FORMAT_VERSION {
        return Err(QfaError::format(
            &path,
            format!("unsupported manifest version {}", m.version),
        ));
    }
    Ok(m)
}

struct Reader<'a> {
    dir: &'a Path,
    manifest: Manifest,
}

impl Reader<'_> {
    fn open(dir: &Path, kind: CheckpointKind) -> Result<Reader<'_>> {
        let manifest = read_manifest(dir)?;
        if manifest.kind != kind {
            return Err(QfaError::format(
                dir.join(MANIFEST),
                format!("expected a {kind:?} checkpoint, found {:?}", manifest.kind),
            ));
        }
        Ok(Reader { dir, manifest })
    }

    fn entry(&self, name: &str) -> Result<(PathBuf, &TensorEntry)> {
        let e = self.manifest.tensors.get(name).ok_or_else(|| {
            QfaError::format(self.dir.join(MANIFEST), format!("no tensor named {name}"))
        })?;
        Ok((self.dir.join(&e.file), e))
    }

    fn f32(&self, name: &str) -> Result<Matrix> {
        let (path, e) = self.entry(name)?;
        let m = load_f32(&path)?;
        if m.shape() != (e.rows, e.cols) {
            return Err(QfaError::format(&path, "shape differs from the manifest"));
        }
        Ok(m)
    }

    fn u8(&self, name: &str) -> Result<CodeMatrix> {
        let (path, e) = self.entry(name)?;
        let m = load_u8(&path)?;
        if (m.rows(), m.cols()) != (e.rows, e.cols) {
            return Err(QfaError::format(&path, "shape differs from the manifest"));
        }
        Ok(m)
    }

    fn quant(&self, e: &QuantEntry) -> Result<QuantizedTensor> {
        QuantizedTensor::from_parts(
            self.u8(&e.codes)?,
            self.f32(&e.scales)?,
            self.f32(&e.zeros)?,
            QuantSpec::new(e.bit_width, e.group_size)?,
        )
    }

    fn required<T: Clone>(&self, v: &Option<T>, what: &str) -> Result<T> {
        v.clone().ok_or_else(|| {
            QfaError::format(self.dir.join(MANIFEST), format!("manifest lacks {what}"))
        })
    }
}

pub fn save_float(dir: &Path, model: &FloatModel) -> Result<()> {
    let mut w = writer(dir, CheckpointKind::Float, model.dims)?;
    w.f32("embedding", &model.embedding)?;
    for (l, b) in model.blocks.iter().enumerate() {
        w.f32(&format!("block{l}"), b)?;
    }
    w.f32("head", &model.head)?;
    w.finish()
}

pub fn load_float(dir: &Path) -> Result<FloatModel> {
    let r = Reader::open(dir, CheckpointKind::Float)?;
    let dims = r.manifest.dims;
    let model = FloatModel {
        dims,
        embedding: r.f32("embedding")?,
        blocks: (0..dims.layers)
            .map(|l| r.f32(&format!("block{l}")))
            .collect::<Result<_>>()?,
        head: r.f32("head")?,
    };
    model.validate()?;
    Ok(model)
}

fn adapter_stem(key: AdapterKey) -> String {
    format!("layer{}_adapter{}", key.layer, key.adapter)
}

/// Saves the supernet, and the optimizer position when `state` is given.
pub fn save_supernet(dir: &Path, model: &SupernetModel, state: Option<&TrainState>) -> Result<()> {
    let mut w = writer(dir, CheckpointKind::Supernet, model.dims)?;
    w.manifest.bits = Some(model.bits.clone());
    w.manifest.group_size = Some(model.group_size);
    w.manifest.rank = Some(model.rank);
    w.manifest.adapter_mode = Some(model.adapter_mode);
    w.manifest.head_trainable = model.head_trainable;
    w.f32("embedding", &model.embedding)?;
    w.f32("head", &model.head)?;
    for (l, block) in model.blocks.iter().enumerate() {
        for slot in block.slots() {
            w.quant(l, slot.tensor())?;
        }
        for (a, adapter) in block.adapters().iter().enumerate() {
            let stem = adapter_stem(AdapterKey { layer: l, adapter: a });
            let entry = AdapterEntry {
                layer: l,
                adapter: a,
                rank: adapter.rank(),
                group_size: adapter.group_size(),
                a_tilde: w.f32(&format!("{stem}_a_tilde"), adapter.a_tilde())?,
                b: w.f32(&format!("{stem}_b"), adapter.b())?,
            };
            w.manifest.adapters.push(entry);
        }
    }
    if let Some(state) = state {
        let mut entries = Vec::new();
        for (key, (sa, sb)) in &state.opt.adapters {
            let stem = format!("opt_{}", adapter_stem(*key));
            w.f32(&format!("{stem}_a_tilde_m"), &sa.m)?;
            w.f32(&format!("{stem}_a_tilde_v"), &sa.v)?;
            w.f32(&format!("{stem}_b_m"), &sb.m)?;
            w.f32(&format!("{stem}_b_v"), &sb.v)?;
            entries.push(OptEntry {
                layer: key.layer,
                adapter: key.adapter,
                a_tilde_step: sa.step,
                b_step: sb.step,
            });
        }
        let head_step = match &state.opt.head {
            Some(h) => {
                w.f32("opt_head_m", &h.m)?;
                w.f32("opt_head_v", &h.v)?;
                Some(h.step)
            }
            None => None,
        };
        w.manifest.train_state = Some(TrainStateEntry {
            next_step: state.next_step,
            adapters: entries,
            head_step,
        });
    }
    w.finish()
}

/// Loads a supernet and, if one was saved, its training position.
pub fn load_supernet(dir: &Path) -> Result<(SupernetModel, Option<TrainState>)> {
    let r = Reader::open(dir, CheckpointKind::Supernet)?;
    let m = &r.manifest;
    let dims = m.dims;
    dims.validate()?;
    let bits = r.required(&m.bits, "bits")?;
    let group_size = r.required(&m.group_size, "group_size")?;
    let rank = r.required(&m.rank, "rank")?;
    let mode = r.required(&m.adapter_mode, "adapter_mode")?;

    let mut blocks = Vec::with_capacity(dims.layers);
    for l in 0..dims.layers {
        let mut slots = Vec::new();
        for &b in bits.as_slice() {
            let e = m
                .quantized
                .iter()
                .find(|e| e.layer == l && e.bit_width == b)
                .ok_or_else(|| {
                    QfaError::format(dir.join(MANIFEST), format!("missing layer {l} bit {b}"))
                })?;
            slots.push(QuantSlot::new(r.quant(e)?));
        }
        let mut layer_adapters: Vec<&AdapterEntry> = m.adapters.iter().filter(|e| e.layer == l).collect();
        layer_adapters.sort_by_key(|e| e.adapter);
        let adapters = layer_adapters
            .iter()
            .enumerate()
            .map(|(i, e)| {
                if e.adapter != i || e.rank != rank || e.group_size != group_size {
                    return Err(QfaError::format(
                        dir.join(MANIFEST),
                        format!("inconsistent adapter stanza at layer {l}"),
                    ));
                }
                GroupLoRA::new(r.f32(&e.a_tilde)?, r.f32(&e.b)?, e.group_size)
            })
            .collect::<Result<Vec<_>>>()?;
        blocks.push(MixedLayer::new(slots, adapters, mode)?);
    }
    let model = SupernetModel {
        dims,
        bits,
        group_size,
        rank,
        adapter_mode: mode,
        head_trainable: m.head_trainable,
        embedding: r.f32("embedding")?,
        blocks,
        head: r.f32("head")?,
    };

    let state = match &m.train_state {
        None => None,
        Some(ts) => {
            let mut opt = OptState::default();
            for e in &ts.adapters {
                let key = AdapterKey {
                    layer: e.layer,
                    adapter: e.adapter,
                };
                let stem = format!("opt_{}", adapter_stem(key));
                let sa = AdamState {
                    m: r.f32(&format!("{stem}_a_tilde_m"))?,
                    v: r.f32(&format!("{stem}_a_tilde_v"))?,
                    step: e.a_tilde_step,
                };
                let sb = AdamState {
                    m: r.f32(&format!("{stem}_b_m"))?,
                    v: r.f32(&format!("{stem}_b_v"))?,
                    step: e.b_step,
                };
                opt.adapters.insert(key, (sa, sb));
            }
            if let Some(step) = ts.head_step {
                opt.head = Some(AdamState {
                    m: r.f32("opt_head_m")?,
                    v: r.f32("opt_head_v")?,
                    step,
                });
            }
            Some(TrainState {
                next_step: ts.next_step,
                opt,
            })
        }
    };
    Ok((model, state))
}

pub fn save_subnet(dir: &Path, subnet: &QuantizedSubnet) -> Result<()> {
    let mut w = writer(dir, CheckpointKind::Subnet, subnet.dims)?;
    w.manifest.config = Some(subnet.config.clone());
    if let Some(q) = subnet.layers.first() {
        w.manifest.group_size = Some(q.spec().group_size);
    }
    w.f32("embedding", &subnet.embedding)?;
    w.f32("head", &subnet.head)?;
    for (l, q) in subnet.layers.iter().enumerate() {
        w.quant(l, q)?;
    }
    w.finish()
}

pub fn load_subnet(dir: &Path) -> Result<QuantizedSubnet> {
    let r = Reader::open(dir, CheckpointKind::Subnet)?;
    let m = &r.manifest;
    let config = r.required(&m.config, "config")?;
    if config.len() != m.dims.layers {
        return Err(QfaError::format(dir.join(MANIFEST), "config length differs from layer count"));
    }
    let layers = (0..m.dims.layers)
        .map(|l| {
            let e = m
                .quantized
                .iter()
                .find(|e| e.layer == l && e.bit_width == config.bits[l])
                .ok_or_else(|| QfaError::format(dir.join(MANIFEST), format!("missing layer {l}")))?;
            r.quant(e)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedSubnet {
        dims: m.dims,
        config,
        embedding: r.f32("embedding")?,
        layers,
        head: r.f32("head")?,
    })
}

/// SHA-256 over every file in the checkpoint directory (name and bytes, in
/// name order), as lowercase hex.
pub fn checkpoint_digest(dir: &Path) -> Result<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| QfaError::io(dir, e))?
        .map(|e| {
            e.map(|e| e.file_name().to_string_lossy().into_owned())
                .map_err(|err| QfaError::io(dir, err))
        })
        .collect::<Result<_>>()?;
    names.sort();
    let mut h = Sha256::new();
    for name in names {
        let path = dir.join(&name);
        if path.is_dir() {
            continue;
        }
        let bytes = std::fs::read(&path).map_err(|e| QfaError::io(&path, e))?;
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
