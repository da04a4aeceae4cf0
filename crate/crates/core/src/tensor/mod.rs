//! Dense row-major `f32` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable value. Tensors created through
//! [`Tape::leaf`] carry a handle into the tape, and every primitive applied to
//! at least one such tensor is recorded. [`Tensor::backward`] replays the tape
//! in reverse and returns a [`Gradients`] map keyed by leaf.

mod gradcheck;
pub mod primitive;
mod tape;

use std::cell::Cell;
use std::fmt;
use std::sync::Arc;

pub use gradcheck::{check_gradient, finite_difference_grad, relative_error};
pub use primitive::Primitive;
pub use tape::{Gradients, Tape};

use crate::error::{shape_err, Error, Result};
use primitive::Operand;
use tape::NodeRef;

#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    node: Option<NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl PartialEq for Tensor {
    /// Value equality (shape and bit pattern); tape membership is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || n != data.len() {
            return Err(shape_err(
                "tensor",
                format!(
                    "shape {shape:?} holds {n} values but {} were given",
                    data.len()
                ),
            ));
        }
        Ok(Self::from_parts(shape, data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        let n = data.len();
        Self::from_parts(vec![n], data)
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.to_vec()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, no tape participation. Gradient flow stops here.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Elementwise map without tape participation.
    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Tensor {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&x| f(x)).collect(),
        )
    }

    /// Applies `prim` to `inputs`, recording a tape node when any input is
    /// tracked.
    pub fn apply(prim: Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape.as_slice()).collect();
        let out_shape = primitive::infer_shape(&prim, &shapes)?;
        flops::record(primitive::flop_cost(&prim, &shapes, &out_shape));
        let operands: Vec<Operand<'_>> = inputs
            .iter()
            .map(|t| Operand {
                shape: &t.shape,
                data: &t.data,
            })
            .collect();
        let data = primitive::forward(&prim, &operands, &out_shape);
        let out = Tensor::from_parts(out_shape, data);
        if inputs.iter().any(|t| t.node.is_some()) {
            tape::record(prim, inputs, out)
        } else {
            Ok(out)
        }
    }

    /// Dynamic dispatch by primitive name.
    pub fn apply_named(name: &str, inputs: &[&Tensor]) -> Result<Tensor> {
        Self::apply(Primitive::from_name(name)?, inputs)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        Self::apply(Primitive::Add, &[self, rhs])
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        Self::apply(Primitive::Sub, &[self, rhs])
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        Self::apply(Primitive::Mul, &[self, rhs])
    }

    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        Self::apply(Primitive::AddRow, &[self, row])
    }

    pub fn mul_row(&self, row: &Tensor) -> Result<Tensor> {
        Self::apply(Primitive::MulRow, &[self, row])
    }

    pub fn scale(&self, s: f32) -> Result<Tensor> {
        Self::apply(Primitive::Scale(s), &[self])
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        Self::apply(
            Primitive::MatMul {
                trans_a: false,
                trans_b: false,
            },
            &[self, rhs],
        )
    }

    /// `self * rhs^T`.
    pub fn matmul_t(&self, rhs: &Tensor) -> Result<Tensor> {
        Self::apply(
            Primitive::MatMul {
                trans_a: false,
                trans_b: true,
            },
            &[self, rhs],
        )
    }

    /// `self^T * rhs`.
    pub fn t_matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        Self::apply(
            Primitive::MatMul {
                trans_a: true,
                trans_b: false,
            },
            &[self, rhs],
        )
    }

    /// 2-D transpose.
    pub fn t(&self) -> Result<Tensor> {
        self.permute(&[1, 0])
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        Self::apply(
            Primitive::Transpose {
                perm: perm.to_vec(),
            },
            &[self],
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape == self.shape.as_slice() {
            return Ok(self.clone());
        }
        Self::apply(
            Primitive::Reshape {
                shape: shape.to_vec(),
            },
            &[self],
        )
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.len() == 1 {
            return Ok(parts[0].clone());
        }
        Self::apply(Primitive::Concat { axis }, parts)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis < self.rank() && start == 0 && len == self.shape[axis] {
            return Ok(self.clone());
        }
        Self::apply(Primitive::Narrow { axis, start, len }, &[self])
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor>> {
        if axis >= self.rank() {
            return Err(Error::InvalidAttr {
                op: "split",
                detail: format!("axis {axis} out of range for rank {}", self.rank()),
            });
        }
        let total: usize = sizes.iter().sum();
        if total != self.shape[axis] || sizes.contains(&0) {
            return Err(Error::InvalidAttr {
                op: "split",
                detail: format!(
                    "sizes {sizes:?} do not partition axis of length {}",
                    self.shape[axis]
                ),
            });
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let piece = self.narrow(axis, start, len);
                start += len;
                piece
            })
            .collect()
    }

    pub fn softmax(&self) -> Result<Tensor> {
        Self::apply(Primitive::Softmax, &[self])
    }

    pub fn layer_norm(&self, eps: f32) -> Result<Tensor> {
        Self::apply(Primitive::LayerNorm { eps }, &[self])
    }

    pub fn gelu(&self) -> Result<Tensor> {
        Self::apply(Primitive::Gelu, &[self])
    }

    pub fn elu1(&self) -> Result<Tensor> {
        Self::apply(Primitive::Elu1, &[self])
    }

    pub fn recip(&self) -> Result<Tensor> {
        Self::apply(Primitive::Recip, &[self])
    }

    pub fn sum(&self) -> Result<Tensor> {
        Self::apply(Primitive::Sum, &[self])
    }

    pub fn mean(&self) -> Result<Tensor> {
        Self::apply(Primitive::Mean, &[self])
    }

    pub fn mean_square(&self) -> Result<Tensor> {
        Self::apply(Primitive::MeanSquare, &[self])
    }

    /// Reverse pass from this scalar.
    pub fn backward(&self) -> Result<Gradients> {
        tape::backward(self)
    }
}

/// Analytic FLOP accounting hook. Every primitive forward reports its cost
/// to the innermost active [`flops::Scope`] on the current thread.
pub mod flops {
    use super::Cell;

    thread_local! {
        static ACTIVE: Cell<Option<u64>> = const { Cell::new(None) };
    }

    pub(crate) fn record(n: u64) {
        ACTIVE.with(|a| {
            if let Some(total) = a.get() {
                a.set(Some(total + n));
            }
        });
    }

    /// Counts FLOPs of everything executed on this thread while alive.
    /// Scopes nest: an inner scope's count is also added to the outer one.
    pub struct Scope {
        saved: Option<u64>,
    }

    impl Scope {
        pub fn begin() -> Self {
            let saved = ACTIVE.with(|a| a.replace(Some(0)));
            Scope { saved }
        }

        pub fn count(&self) -> u64 {
            ACTIVE.with(|a| a.get().unwrap_or(0))
        }

        pub fn finish(self) -> u64 {
            self.count()
        }
    }

    /// Suspends counting until dropped.
    pub struct Paused {
        saved: Option<u64>,
    }

    impl Paused {
        pub fn begin() -> Self {
            Paused {
                saved: ACTIVE.with(|a| a.replace(None)),
            }
        }
    }

    impl Drop for Paused {
        fn drop(&mut self) {
            ACTIVE.with(|a| a.set(self.saved));
        }
    }

    impl Drop for Scope {
        fn drop(&mut self) {
            ACTIVE.with(|a| {
                let inner = a.get().unwrap_or(0);
                a.set(self.saved.map(|outer| outer + inner));
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_oracle() {
        let a = t2(&[&[1.5, -2.0], &[0.25, 4.0]]);
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        let prod = t2(&[&[1.0, 2.0], &[3.0, 4.0]])
            .matmul(&t2(&[&[5.0], &[6.0]]))
            .unwrap();
        assert_eq!(prod.shape(), &[2, 1]);
        assert_eq!(prod.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_transpose_flags_agree_with_explicit_transpose() {
        let a = t2(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = t2(&[&[0.5, -1.0, 2.0], &[1.0, 0.0, -3.0]]);
        let direct = a.matmul_t(&b).unwrap();
        let explicit = a.matmul(&b.t().unwrap()).unwrap();
        assert_eq!(direct, explicit);
        let direct = a.t_matmul(&b).unwrap();
        let explicit = a.t().unwrap().matmul(&b).unwrap();
        assert_eq!(direct, explicit);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let s = Tensor::from_vec(vec![0.0; 3]).softmax().unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let s = Tensor::from_vec(vec![1000.0, 1000.0]).softmax().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let err = t2(&[&[1.0, 2.0]]).matmul(&t2(&[&[1.0, 2.0]])).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("matmul") && msg.contains("inner dimensions"),
            "{msg}"
        );
        let err = Tensor::from_vec(vec![1.0])
            .add(&Tensor::from_vec(vec![1.0, 2.0]))
            .unwrap_err();
        assert!(err.to_string().contains("add"));
    }

    #[test]
    fn split_rejects_bad_sizes() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(x.split(0, &[1, 1]).is_err());
        let parts = x.split(0, &[1, 2]).unwrap();
        assert_eq!(parts[1].data(), &[2.0, 3.0]);
    }

    #[test]
    fn new_validates_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn flop_scope_counts_and_nests() {
        let a = Tensor::eye(2);
        let outer = flops::Scope::begin();
        {
            let inner = flops::Scope::begin();
            a.matmul(&a).unwrap();
            assert_eq!(inner.finish(), 16);
        }
        a.add(&a).unwrap();
        assert_eq!(outer.finish(), 20);
        let empty = flops::Scope::begin();
        assert_eq!(empty.finish(), 0);
    }
}
