//! Group-tied low-rank adapters.
//!
//! The adapter's down-projection is stored as `Ã` with one column per
//! quantization group instead of one per input feature. Expanding `Ã` by
//! repeating each column `group_size` times gives the functional `A`, so
//! `B·A·X == B·Ã·group_sum(X)`. Because every column inside a group is the
//! same, `B·A` is constant across each group and folds exactly into the
//! quantizer's zero factors: the merged model keeps its integer codes and
//! scales untouched.

use serde::{Deserialize, Serialize};

use crate::error::{QfaError, Result};
use crate::quant::QuantizedTensor;
use crate::tensor::{group_expand, group_sum, matmul, matmul_nt, matmul_tn, Matrix, Rng};

pub const DEFAULT_INIT_STD: f32 = 0.02;
pub const DEFAULT_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupLoRA {
    a_tilde: Matrix,
    b: Matrix,
    group_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterGrads {
    pub d_a_tilde: Matrix,
    pub d_b: Matrix,
}

impl AdapterGrads {
    pub fn zeros_like(adapter: &GroupLoRA) -> Self {
        AdapterGrads {
            d_a_tilde: Matrix::zeros(adapter.rank(), adapter.n_groups()),
            d_b: Matrix::zeros(adapter.d_out(), adapter.rank()),
        }
    }

    pub fn accumulate(&mut self, other: &AdapterGrads) -> Result<()> {
        self.d_a_tilde.add_assign(&other.d_a_tilde)?;
        self.d_b.add_assign(&other.d_b)
    }
}

pub fn init_adapter(
    rng: &mut Rng,
    d_out: usize,
    n_groups: usize,
    rank: usize,
    std: f32,
    group_size: usize,
) -> Result<GroupLoRA> {
    if rank == 0 {
        return Err(QfaError::config("adapter rank must be >= 1"));
    }
    GroupLoRA::new(
        crate::tensor::rng_normal(rng, rank, n_groups, std)?,
        Matrix::zeros(d_out, rank),
        group_size,
    )
}

impl GroupLoRA {
    pub fn new(a_tilde: Matrix, b: Matrix, group_size: usize) -> Result<Self> {
        if a_tilde.rows() != b.cols() {
            return Err(QfaError::shape(format!(
                "adapter rank mismatch: Ã {:?}, B {:?}",
                a_tilde.shape(),
                b.shape()
            )));
        }
        if group_size == 0 {
            return Err(QfaError::config("group size must be positive"));
        }
        Ok(GroupLoRA {
            a_tilde,
            b,
            group_size,
        })
    }

    pub fn a_tilde(&self) -> &Matrix {
        &self.a_tilde
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn rank(&self) -> usize {
        self.a_tilde.rows()
    }

    pub fn n_groups(&self) -> usize {
        self.a_tilde.cols()
    }

    pub fn d_in(&self) -> usize {
        self.n_groups() * self.group_size
    }

    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    pub(crate) fn params_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        (&mut self.a_tilde, &mut self.b)
    }

    /// Full `r × d_in` down-projection with group-tied columns.
    pub fn expanded_a(&self) -> Matrix {
        let g = self.group_size;
        Matrix::from_fn(self.rank(), self.d_in(), |i, j| self.a_tilde.get(i, j / g))
    }

    /// `B·Ã`, the per-(row, group) shift this adapter adds to the zero factors.
    pub fn zero_shift(&self) -> Matrix {
        matmul(&self.b, &self.a_tilde).expect("adapter factors are rank-consistent")
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.d_in() {
            return Err(QfaError::shape(format!(
                "adapter expects {} input features, got {}",
                self.d_in(),
                x.rows()
            )));
        }
        Ok(())
    }

    /// Forward on already group-summed inputs `u` (n_groups × batch).
    pub fn forward_pooled(&self, pooled: &Matrix) -> Result<Matrix> {
        matmul(&self.b, &matmul(&self.a_tilde, pooled)?)
    }

    /// Gradients given group-summed inputs and the output gradient.
    pub fn backward_pooled(&self, pooled: &Matrix, dy: &Matrix) -> Result<AdapterGrads> {
        if dy.rows() != self.d_out() || dy.cols() != pooled.cols() {
            return Err(QfaError::shape(format!(
                "output gradient {:?} does not match {}x{}",
                dy.shape(),
                self.d_out(),
                pooled.cols()
            )));
        }
        let hidden = matmul(&self.a_tilde, pooled)?;
        let d_b = matmul_nt(dy, &hidden)?;
        let d_hidden = matmul_tn(&self.b, dy)?;
        let d_a_tilde = matmul_nt(&d_hidden, pooled)?;
        Ok(AdapterGrads { d_a_tilde, d_b })
    }

    /// Gradient of the adapter output with respect to its (unpooled) input.
    pub fn input_grad(&self, dy: &Matrix) -> Result<Matrix> {
        let d_hidden = matmul_tn(&self.b, dy)?;
        let d_pooled = matmul_tn(&self.a_tilde, &d_hidden)?;
        Ok(group_expand(&d_pooled, self.group_size))
    }
}

/// `B·Ã·group_sum(x)`; `x` is features × batch.
pub fn lora_forward(adapter: &GroupLoRA, x: &Matrix) -> Result<Matrix> {
    adapter.check_input(x)?;
    adapter.forward_pooled(&group_sum(x, adapter.group_size)?)
}

pub fn lora_backward(adapter: &GroupLoRA, x: &Matrix, dy: &Matrix) -> Result<AdapterGrads> {
    adapter.check_input(x)?;
    adapter.backward_pooled(&group_sum(x, adapter.group_size)?, dy)
}

/// Folds the adapter into the zero factors. Codes and scales are unchanged.
pub fn merge(adapter: &GroupLoRA, q: &QuantizedTensor) -> Result<QuantizedTensor> {
    if adapter.group_size != q.spec().group_size {
        return Err(QfaError::shape(format!(
            "adapter group size {} vs quantizer group size {}",
            adapter.group_size,
            q.spec().group_size
        )));
    }
    if adapter.d_out() != q.d_out() || adapter.n_groups() != q.n_groups() {
        return Err(QfaError::shape(format!(
            "adapter {}x{} groups vs tensor {}x{} groups",
            adapter.d_out(),
            adapter.n_groups(),
            q.d_out(),
            q.n_groups()
        )));
    }
    let zeros = q.zeros().add(&adapter.zero_shift())?;
    q.with_zeros(zeros)
}

/// The quantized linear map with an optional adapter:
/// `Y = (α ⊙ Ŵ)·X + β·group_sum(X) + B·Ã·group_sum(X)`.
///
/// `scaled_codes` is `q.scaled_codes()`, passed in so callers can cache it.
pub fn qlora_linear(
    q: &QuantizedTensor,
    scaled_codes: &Matrix,
    adapter: Option<&GroupLoRA>,
    x: &Matrix,
) -> Result<Matrix> {
    let pooled = group_sum(x, q.spec().group_size)?;
    qlora_linear_pooled(q, scaled_codes, adapter, x, &pooled)
}

pub(crate) fn qlora_linear_pooled(
    q: &QuantizedTensor,
    scaled_codes: &Matrix,
    adapter: Option<&GroupLoRA>,
    x: &Matrix,
    pooled: &Matrix,
) -> Result<Matrix> {
    let mut y = matmul(scaled_codes, x)?;
    y.add_assign(&matmul(q.zeros(), pooled)?)?;
    if let Some(a) = adapter {
        y.add_assign(&a.forward_pooled(pooled)?)?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{dequantize, quantize, QuantSpec};

    fn random_adapter(rng: &mut Rng, d_out: usize, groups: usize, r: usize, g: usize) -> GroupLoRA {
        GroupLoRA::new(
            rng.normal_matrix(r, groups, 0.5),
            rng.normal_matrix(d_out, r, 0.5),
            g,
        )
        .unwrap()
    }

    #[test]
    fn zero_b_contributes_nothing() {
        let mut rng = Rng::new(1);
        let a = init_adapter(&mut rng, 6, 2, 3, 0.02, 4).unwrap();
        let x = rng.normal_matrix(8, 5, 1.0);
        let y = lora_forward(&a, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_forward() {
        let a = GroupLoRA::new(
            Matrix::from_vec(1, 1, vec![0.5]).unwrap(),
            Matrix::from_vec(1, 1, vec![2.0]).unwrap(),
            2,
        )
        .unwrap();
        let x = Matrix::from_vec(2, 1, vec![1.0, 3.0]).unwrap();
        assert_eq!(lora_forward(&a, &x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn forward_matches_expanded_a_oracle() {
        let mut rng = Rng::new(2);
        let a = random_adapter(&mut rng, 12, 4, 3, 4);
        let x = rng.normal_matrix(16, 7, 1.0);
        let oracle = matmul(a.b(), &matmul(&a.expanded_a(), &x).unwrap()).unwrap();
        let got = lora_forward(&a, &x).unwrap();
        assert!(got.max_abs_diff(&oracle).unwrap() <= 1e-5);
        assert!(got.rel_error(&oracle).unwrap() <= 1e-6);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = Rng::new(3);
        let a = random_adapter(&mut rng, 4, 2, 2, 2);
        let x = rng.normal_matrix(4, 3, 1.0);
        let g = lora_backward(&a, &x, &Matrix::zeros(4, 3)).unwrap();
        assert!(g.d_a_tilde.data().iter().chain(g.d_b.data()).all(|&v| v == 0.0));
    }

    fn half_sq_loss(a: &GroupLoRA, x: &Matrix) -> f64 {
        lora_forward(a, x)
            .unwrap()
            .data()
            .iter()
            .map(|&v| 0.5 * (v as f64).powi(2))
            .sum()
    }

    #[test]
    fn grads_match_central_differences() {
        let mut rng = Rng::new(4);
        let a = random_adapter(&mut rng, 5, 3, 2, 2);
        let x = rng.normal_matrix(6, 4, 1.0);
        let y = lora_forward(&a, &x).unwrap();
        let g = lora_backward(&a, &x, &y).unwrap();
        let h = 1e-3f32;
        let mut fd_a = Matrix::zeros(a.rank(), a.n_groups());
        for i in 0..a.rank() {
            for j in 0..a.n_groups() {
                let mut p = a.clone();
                let mut m = a.clone();
                let v = a.a_tilde().get(i, j);
                p.params_mut().0.set(i, j, v + h);
                m.params_mut().0.set(i, j, v - h);
                fd_a.set(i, j, ((half_sq_loss(&p, &x) - half_sq_loss(&m, &x)) / (2.0 * h as f64)) as f32);
            }
        }
        let mut fd_b = Matrix::zeros(a.d_out(), a.rank());
        for i in 0..a.d_out() {
            for j in 0..a.rank() {
                let mut p = a.clone();
                let mut m = a.clone();
                let v = a.b().get(i, j);
                p.params_mut().1.set(i, j, v + h);
                m.params_mut().1.set(i, j, v - h);
                fd_b.set(i, j, ((half_sq_loss(&p, &x) - half_sq_loss(&m, &x)) / (2.0 * h as f64)) as f32);
            }
        }
        assert!(g.d_a_tilde.rel_error(&fd_a).unwrap() <= 1e-3);
        assert!(g.d_b.rel_error(&fd_b).unwrap() <= 1e-3);
    }

    #[test]
    fn tied_grads_equal_group_sums_of_expanded_grads() {
        // For an untied A, dL/dA = Bᵀ·dy·xᵀ. Tying sums it within each group.
        let mut rng = Rng::new(5);
        let g = 3;
        let a = random_adapter(&mut rng, 4, 2, 2, g);
        let x = rng.normal_matrix(6, 5, 1.0);
        let dy = rng.normal_matrix(4, 5, 1.0);
        let tied = lora_backward(&a, &x, &dy).unwrap();
        let full = matmul_nt(&matmul_tn(a.b(), &dy).unwrap(), &x).unwrap();
        let summed = group_sum(&full.transpose(), g).unwrap().transpose();
        assert!(tied.d_a_tilde.rel_error(&summed).unwrap() <= 1e-5);
    }

    #[test]
    fn input_grad_matches_expanded_transpose() {
        let mut rng = Rng::new(6);
        let a = random_adapter(&mut rng, 5, 2, 3, 4);
        let dy = rng.normal_matrix(5, 3, 1.0);
        let want = matmul_tn(&matmul(a.b(), &a.expanded_a()).unwrap(), &dy).unwrap();
        assert!(a.input_grad(&dy).unwrap().rel_error(&want).unwrap() <= 1e-5);
    }

    #[test]
    fn merge_with_zero_b_is_identity() {
        let mut rng = Rng::new(7);
        let q = quantize(&rng.normal_matrix(4, 8, 1.0), QuantSpec::new(3, 4).unwrap()).unwrap();
        let a = init_adapter(&mut rng, 4, 2, 2, 0.02, 4).unwrap();
        assert_eq!(merge(&a, &q).unwrap(), q);
    }

    #[test]
    fn merge_hand_arithmetic() {
        let q = QuantizedTensor::from_parts(
            crate::tensor::CodeMatrix::zeros(1, 2),
            Matrix::zeros(1, 1),
            Matrix::from_vec(1, 1, vec![-1.0]).unwrap(),
            QuantSpec::new(2, 2).unwrap(),
        )
        .unwrap();
        let a = GroupLoRA::new(
            Matrix::from_vec(1, 1, vec![0.5]).unwrap(),
            Matrix::from_vec(1, 1, vec![2.0]).unwrap(),
            2,
        )
        .unwrap();
        assert_eq!(merge(&a, &q).unwrap().zeros().data(), &[0.0]);
    }

    #[test]
    fn merged_forward_equals_adapter_forward() {
        let mut rng = Rng::new(8);
        let q = quantize(&rng.normal_matrix(16, 32, 0.5), QuantSpec::new(2, 8).unwrap()).unwrap();
        let a = random_adapter(&mut rng, 16, 4, 4, 8);
        let x = rng.normal_matrix(32, 9, 1.0);
        let pre = qlora_linear(&q, &q.scaled_codes(), Some(&a), &x).unwrap();
        let merged = merge(&a, &q).unwrap();
        assert_eq!(merged.codes(), q.codes());
        assert_eq!(merged.scales(), q.scales());
        let post = matmul(&dequantize(&merged), &x).unwrap();
        assert!(post.rel_error(&pre).unwrap() <= 1e-5);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut rng = Rng::new(9);
        let q = quantize(&rng.normal_matrix(4, 8, 1.0), QuantSpec::new(3, 4).unwrap()).unwrap();
        let wrong_g = init_adapter(&mut rng, 4, 4, 2, 0.02, 2).unwrap();
        assert!(merge(&wrong_g, &q).is_err());
        let wrong_out = init_adapter(&mut rng, 5, 2, 2, 0.02, 4).unwrap();
        assert!(merge(&wrong_out, &q).is_err());
        assert!(lora_forward(&wrong_out, &Matrix::zeros(7, 1)).is_err());
        assert!(init_adapter(&mut rng, 4, 2, 0, 0.02, 4).is_err());
    }

    #[test]
    fn init_determinism() {
        let a = init_adapter(&mut Rng::new(1), 4, 2, 2, 0.02, 4).unwrap();
        let b = init_adapter(&mut Rng::new(2), 4, 2, 2, 0.02, 4).unwrap();
        assert_ne!(a.a_tilde(), b.a_tilde());
        assert_eq!(a.b(), b.b());
        let z = init_adapter(&mut Rng::new(1), 4, 2, 2, 0.0, 4).unwrap();
        assert!(z.a_tilde().data().iter().all(|&v| v == 0.0));
    }
}
