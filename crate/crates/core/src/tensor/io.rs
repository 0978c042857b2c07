//! Binary tensor files.
//!
//! Layout: 8-byte magic `QFATENSR`, one dtype byte (0 = f32, 1 = u8), rows and
//! cols as little-endian u32, then the row-major payload in little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{QfaError, Result};

pub const MAGIC: &[u8; 8] = b"QFATENSR";
const HEADER_LEN: usize = 8 + 1 + 4 + 4;

/// Row-major matrix of one-byte integer codes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl CodeMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CodeMatrix {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(QfaError::shape(format!(
                "{rows}x{cols} code matrix needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(CodeMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[u8] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    F32(Matrix),
    U8(CodeMatrix),
}

impl Tensor {
    fn dtype_tag(&self) -> u8 {
        match self {
            Tensor::F32(_) => 0,
            Tensor::U8(_) => 1,
        }
    }

    pub fn into_f32(self) -> Option<Matrix> {
        match self {
            Tensor::F32(m) => Some(m),
            Tensor::U8(_) => None,
        }
    }

    pub fn into_u8(self) -> Option<CodeMatrix> {
        match self {
            Tensor::U8(m) => Some(m),
            Tensor::F32(_) => None,
        }
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let (rows, cols) = match t {
        Tensor::F32(m) => m.shape(),
        Tensor::U8(m) => (m.rows(), m.cols()),
    };
    let mut buf = Vec::with_capacity(HEADER_LEN + rows * cols * 4);
    buf.extend_from_slice(MAGIC);
    buf.push(t.dtype_tag());
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    match t {
        Tensor::F32(m) => m
            .data()
            .iter()
            .for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        Tensor::U8(m) => buf.extend_from_slice(m.data()),
    }
    buf
}

/// Decodes one tensor; `origin` is only used in error messages.
pub fn decode_tensor(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(QfaError::format(origin, "truncated header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(QfaError::format(origin, "bad magic"));
    }
    let tag = bytes[8];
    let rows = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
    let payload = &bytes[HEADER_LEN..];
    let n = rows * cols;
    match tag {
        0 => {
            if payload.len() != n * 4 {
                return Err(QfaError::format(
                    origin,
                    format!("expected {} payload bytes, found {}", n * 4, payload.len()),
                ));
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Tensor::F32(Matrix::from_vec(rows, cols, data)?))
        }
        1 => {
            if payload.len() != n {
                return Err(QfaError::format(
                    origin,
                    format!("expected {n} payload bytes, found {}", payload.len()),
                ));
            }
            Ok(Tensor::U8(CodeMatrix::from_vec(rows, cols, payload.to_vec())?))
        }
        other => Err(QfaError::format(origin, format!("unknown dtype tag {other}"))),
    }
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| QfaError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_tensor(t))
        .and_then(|_| w.flush())
        .map_err(|e| QfaError::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| QfaError::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| QfaError::io(path, e))?;
    decode_tensor(&bytes, path)
}

pub fn load_f32(path: &Path) -> Result<Matrix> {
    load_tensor(path)?
        .into_f32()
        .ok_or_else(|| QfaError::format(path, "expected f32 tensor"))
}

pub fn load_u8(path: &Path) -> Result<CodeMatrix> {
    load_tensor(path)?
        .into_u8()
        .ok_or_else(|| QfaError::format(path, "expected u8 tensor"))
}
