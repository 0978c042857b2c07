//! Group-wise asymmetric round-to-nearest weight quantization.
//!
//! Each output row is split into contiguous groups of `group_size` input
//! columns. A group with range `[min, max]` gets scale
//! `α = (max - min) / (2^N - 1)`, zero `β = min`, and codes
//! `round((w - β) / α)` in `0..=2^N - 1`. Dequantization is `α·code + β`.

use serde::{Deserialize, Serialize};

use crate::error::{QfaError, Result};
use crate::tensor::{CodeMatrix, Matrix};

/// Bit-widths representable with one code per byte.
pub const MAX_BITS: u8 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bit_width: u8,
    pub group_size: usize,
}

impl QuantSpec {
    pub fn new(bit_width: u8, group_size: usize) -> Result<Self> {
        if bit_width == 0 || bit_width > MAX_BITS {
            return Err(QfaError::config(format!(
                "bit width {bit_width} outside 1..={MAX_BITS}"
            )));
        }
        if group_size == 0 {
            return Err(QfaError::config("group size must be positive"));
        }
        Ok(QuantSpec {
            bit_width,
            group_size,
        })
    }

    /// Largest code, `2^N - 1`.
    pub fn max_code(&self) -> u8 {
        ((1u16 << self.bit_width) - 1) as u8
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    codes: CodeMatrix,
    scales: Matrix,
    zeros: Matrix,
    spec: QuantSpec,
}

impl QuantizedTensor {
    /// Reassembles a tensor from its parts, validating every invariant.
    pub fn from_parts(
        codes: CodeMatrix,
        scales: Matrix,
        zeros: Matrix,
        spec: QuantSpec,
    ) -> Result<Self> {
        let g = spec.group_size;
        if codes.cols() % g != 0 {
            return Err(QfaError::shape(format!(
                "{} input columns not divisible by group size {g}",
                codes.cols()
            )));
        }
        let groups = codes.cols() / g;
        if scales.shape() != (codes.rows(), groups) || zeros.shape() != (codes.rows(), groups) {
            return Err(QfaError::shape(format!(
                "factor shapes {:?}/{:?} do not match {}x{groups}",
                scales.shape(),
                zeros.shape(),
                codes.rows()
            )));
        }
        if codes.data().iter().any(|&c| c > spec.max_code()) {
            return Err(QfaError::domain(format!(
                "code exceeds {}-bit range",
                spec.bit_width
            )));
        }
        if scales.data().iter().any(|&a| !(a >= 0.0) || !a.is_finite()) || !zeros.is_finite() {
            return Err(QfaError::domain("scales must be finite and non-negative"));
        }
        Ok(QuantizedTensor {
            codes,
            scales,
            zeros,
            spec,
        })
    }

    pub fn codes(&self) -> &CodeMatrix {
        &self.codes
    }

    pub fn scales(&self) -> &Matrix {
        &self.scales
    }

    pub fn zeros(&self) -> &Matrix {
        &self.zeros
    }

    pub fn spec(&self) -> QuantSpec {
        self.spec
    }

    pub fn d_out(&self) -> usize {
        self.codes.rows()
    }

    pub fn d_in(&self) -> usize {
        self.codes.cols()
    }

    pub fn n_groups(&self) -> usize {
        self.codes.cols() / self.spec.group_size
    }

    /// Same codes and scales with replaced zero factors.
    pub(crate) fn with_zeros(&self, zeros: Matrix) -> Result<Self> {
        QuantizedTensor::from_parts(self.codes.clone(), self.scales.clone(), zeros, self.spec)
    }

    /// `α ⊙ Ŵ`: the scaled integer grid without the zero factors.
    pub fn scaled_codes(&self) -> Matrix {
        let g = self.spec.group_size;
        Matrix::from_fn(self.d_out(), self.d_in(), |o, j| {
            self.scales.get(o, j / g) * self.codes.get(o, j) as f32
        })
    }

    /// Storage in bytes if codes were bit-packed, plus f32 scale/zero pairs.
    pub fn packed_bytes(&self) -> f64 {
        let code_bits = (self.d_out() * self.d_in()) as f64 * self.spec.bit_width as f64;
        code_bits / 8.0 + (self.d_out() * self.n_groups() * 2 * 4) as f64
    }
}

pub fn quantize(w: &Matrix, spec: QuantSpec) -> Result<QuantizedTensor> {
    let g = spec.group_size;
    if g == 0 || w.cols() % g != 0 {
        return Err(QfaError::shape(format!(
            "{} input columns not divisible by group size {g}",
            w.cols()
        )));
    }
    w.ensure_finite("weight matrix")?;
    let groups = w.cols() / g;
    let levels = spec.max_code() as f64;
    let mut codes = CodeMatrix::zeros(w.rows(), w.cols());
    let mut scales = Matrix::zeros(w.rows(), groups);
    let mut zeros = Matrix::zeros(w.rows(), groups);
    for o in 0..w.rows() {
        let row = w.row(o);
        for (gi, block) in row.chunks_exact(g).enumerate() {
            let (lo, hi) = block
                .iter()
                .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            zeros.set(o, gi, lo);
            if hi == lo {
                // Constant group: α = 0 and all codes 0 reconstruct it exactly.
                continue;
            }
            let alpha = ((hi as f64 - lo as f64) / levels) as f32;
            scales.set(o, gi, alpha);
            for (k, &v) in block.iter().enumerate() {
                let q = ((v as f64 - lo as f64) / alpha as f64).round();
                codes.set(o, gi * g + k, q.clamp(0.0, levels) as u8);
            }
        }
    }
    Ok(QuantizedTensor {
        codes,
        scales,
        zeros,
        spec,
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Matrix {
    let g = q.spec.group_size;
    Matrix::from_fn(q.d_out(), q.d_in(), |o, j| {
        q.scales.get(o, j / g) * q.codes.get(o, j) as f32 + q.zeros.get(o, j / g)
    })
}

/// Quantizes every layer at every bit-width; `out[layer][bit_index]`.
pub fn quantize_model(
    layers: &[Matrix],
    bits: &[u8],
    group_size: usize,
) -> Result<Vec<Vec<QuantizedTensor>>> {
    if bits.is_empty() {
        return Err(QfaError::config("empty bit set"));
    }
    layers
        .iter()
        .map(|w| {
            bits.iter()
                .map(|&b| quantize(w, QuantSpec::new(b, group_size)?))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn row(v: &[f32]) -> Matrix {
        Matrix::from_vec(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn on_grid_values() {
        let q = quantize(&row(&[0.0, 1.0, 2.0, 3.0]), QuantSpec::new(2, 4).unwrap()).unwrap();
        assert_eq!(q.scales().data(), &[1.0]);
        assert_eq!(q.zeros().data(), &[0.0]);
        assert_eq!(q.codes().data(), &[0, 1, 2, 3]);
    }

    #[test]
    fn constant_group_reconstructs_exactly() {
        let c = 0.3712;
        let w = row(&[c; 4]);
        let q = quantize(&w, QuantSpec::new(3, 4).unwrap()).unwrap();
        assert_eq!(q.scales().data(), &[0.0]);
        assert_eq!(q.zeros().data(), &[c]);
        assert_eq!(q.codes().data(), &[0, 0, 0, 0]);
        assert_eq!(dequantize(&q), w);
    }

    #[test]
    fn hand_evaluated_two_bit_row() {
        let q = quantize(&row(&[-1.0, -0.5, 0.2, 1.0]), QuantSpec::new(2, 4).unwrap()).unwrap();
        assert!((q.scales().get(0, 0) - 2.0 / 3.0).abs() < 1e-7);
        assert_eq!(q.zeros().get(0, 0), -1.0);
        assert_eq!(q.codes().data(), &[0, 1, 2, 3]);
        let d = dequantize(&q);
        for (got, want) in d.data().iter().zip([-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0]) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_codes_dequantize_to_zeros() {
        let codes = CodeMatrix::zeros(2, 4);
        let scales = Matrix::from_rows(&[vec![0.5, 0.25], vec![1.0, 2.0]]).unwrap();
        let zeros = Matrix::from_rows(&[vec![-1.0, 2.0], vec![3.0, -4.0]]).unwrap();
        let q = QuantizedTensor::from_parts(codes, scales, zeros.clone(), QuantSpec::new(2, 2).unwrap())
            .unwrap();
        let d = dequantize(&q);
        for o in 0..2 {
            for j in 0..4 {
                assert_eq!(d.get(o, j), zeros.get(o, j / 2));
            }
        }
    }

    #[test]
    fn random_error_within_half_step() {
        let mut rng = Rng::new(21);
        let w = rng.normal_matrix(8, 16, 1.0);
        for bits in [2, 3, 4] {
            let q = quantize(&w, QuantSpec::new(bits, 4).unwrap()).unwrap();
            let d = dequantize(&q);
            for o in 0..8 {
                for j in 0..16 {
                    let bound = q.scales().get(o, j / 4) / 2.0 + 1e-6;
                    assert!((d.get(o, j) - w.get(o, j)).abs() <= bound);
                }
            }
        }
    }

    #[test]
    fn model_quantization_counts_and_monotone_error() {
        let mut rng = Rng::new(4);
        let layers = vec![rng.normal_matrix(16, 32, 1.0), rng.normal_matrix(16, 32, 1.0)];
        let before = layers.clone();
        let slots = quantize_model(&layers, &[2, 3, 4], 8).unwrap();
        assert_eq!(slots.iter().map(Vec::len).sum::<usize>(), 6);
        assert_eq!(layers, before);
        let err = |bi: usize| -> f64 {
            slots
                .iter()
                .zip(&layers)
                .map(|(s, w)| dequantize(&s[bi]).sub(w).unwrap().frobenius().powi(2))
                .sum()
        };
        assert!(err(0) >= err(1) && err(1) >= err(2));
        assert!(quantize_model(&layers, &[], 8).is_err());
    }

    #[test]
    fn shape_and_domain_errors() {
        let w = Matrix::zeros(2, 6);
        assert!(matches!(
            quantize(&w, QuantSpec::new(2, 4).unwrap()),
            Err(QfaError::Shape(_))
        ));
        let bad = row(&[0.0, f32::NAN]);
        assert!(matches!(
            quantize(&bad, QuantSpec::new(2, 2).unwrap()),
            Err(QfaError::Domain(_))
        ));
        assert!(QuantSpec::new(0, 4).is_err());
        assert!(QuantSpec::new(9, 4).is_err());
    }

    #[test]
    fn per_channel_special_case() {
        // group_size == d_in recovers one (α, β) pair per row.
        let w = Rng::new(2).normal_matrix(3, 8, 1.0);
        let q = quantize(&w, QuantSpec::new(4, 8).unwrap()).unwrap();
        assert_eq!(q.scales().shape(), (3, 1));
    }

    proptest! {
        #[test]
        fn half_step_bound(seed in any::<u64>(), bits in 2u8..=4, g in prop::sample::select(vec![2usize, 4, 8])) {
            let w = Rng::new(seed).normal_matrix(4, 16, 2.0);
            let q = quantize(&w, QuantSpec::new(bits, g).unwrap()).unwrap();
            let d = dequantize(&q);
            for o in 0..4 {
                for j in 0..16 {
                    prop_assert!(q.codes().get(o, j) <= q.spec().max_code());
                    prop_assert!((d.get(o, j) - w.get(o, j)).abs() <= q.scales().get(o, j / g) / 2.0 + 1e-6);
                }
            }
        }

        #[test]
        fn requantizing_dequantized_weights_is_stable(seed in any::<u64>(), bits in 2u8..=4) {
            let w = Rng::new(seed).normal_matrix(4, 16, 1.0);
            let spec = QuantSpec::new(bits, 4).unwrap();
            let q = quantize(&w, spec).unwrap();
            let q2 = quantize(&dequantize(&q), spec).unwrap();
            prop_assert_eq!(q2.codes(), q.codes());
            prop_assert_eq!(q2.zeros(), q.zeros());
            for (a, b) in q2.scales().data().iter().zip(q.scales().data()) {
                prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-3));
            }
        }

        #[test]
        fn codes_invariant_under_positive_affine_maps(
            seed in any::<u64>(),
            scale in 0.01f32..50.0,
            shift in -10.0f32..10.0,
        ) {
            // Weights sitting on a 3-bit grid that spans the full code range.
            let mut rng = Rng::new(seed);
            let base: Vec<u8> = (0..8).map(|i| match i { 0 => 0, 1 => 7, _ => rng.index(8) as u8 }).collect();
            let w = row(&base.iter().map(|&c| 0.25 * c as f32 - 0.5).collect::<Vec<_>>());
            let spec = QuantSpec::new(3, 8).unwrap();
            let moved = w.map(|v| scale * v + shift);
            let (a, b) = (quantize(&moved, spec).unwrap(), quantize(&w, spec).unwrap());
            prop_assert_eq!(a.codes(), b.codes());
        }
    }
}
