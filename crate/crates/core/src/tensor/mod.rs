//! Dense row-major tensors with tape-free reverse-mode differentiation.
//!
//! Every differentiable operation records its parents and a backward closure
//! on the output tensor. Tensor ids are allocated from a monotonically
//! increasing counter, so parents always carry smaller ids than their
//! children; `backward` uses descending-id order as its topological order.
//!
//! Values are stored as `f64` regardless of dtype. An `F32` tensor holds only
//! values that are exactly representable in `f32` (each op result is rounded),
//! so it behaves like single-precision arithmetic while sharing one code path.
//! Mixed-dtype operations promote to `F64`.
//!
//! Gradients accumulate: calling `backward` twice without `zero_grad` adds the
//! second pass into the existing buffers.

mod gradcheck;
pub mod io;
mod nn;
mod ops;

pub use gradcheck::{compare_gradients, grad_check, numeric_gradient, GradCheckReport};

use std::cell::Cell;
use std::cmp::Reverse;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn promote(self, other: DType) -> DType {
        if self == DType::F64 || other == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }

    #[inline]
    pub(crate) fn round(self, x: f64) -> f64 {
        match self {
            DType::F32 => x as f32 as f64,
            DType::F64 => x,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on the current thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>> + Send + Sync>;

struct Node {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<Node>,
}

/// Cheaply clonable handle to an immutable tensor value.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape())
            .field("dtype", &self.dtype())
            .field("requires_grad", &self.requires_grad());
        if self.numel() <= 16 {
            s.field("data", &self.data());
        }
        s.finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Contract(format!(
            "tensor extents must be a non-empty list of positive integers, got {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    fn build(
        data: Vec<f64>,
        shape: Vec<usize>,
        dtype: DType,
        requires_grad: bool,
        node: Option<Node>,
    ) -> Tensor {
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            dtype,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
    }

    /// New `f64` leaf tensor.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::from_vec_dtype(data, shape, DType::F64)
    }

    pub fn from_vec_dtype(mut data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} holds {n} elements but {} were supplied",
                data.len()
            )));
        }
        if dtype == DType::F32 {
            data.iter_mut().for_each(|x| *x = dtype.round(*x));
        }
        Ok(Self::build(data, shape.to_vec(), dtype, false, None))
    }

    pub fn full(shape: &[usize], value: f64, dtype: DType) -> Result<Tensor> {
        let n = check_shape(shape)?;
        Self::from_vec_dtype(vec![value; n], shape, dtype)
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Result<Tensor> {
        Self::full(shape, 0.0, dtype)
    }

    pub fn ones(shape: &[usize], dtype: DType) -> Result<Tensor> {
        Self::full(shape, 1.0, dtype)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::build(vec![value], vec![1], DType::F64, false, None)
    }

    /// `[1, n]` row vector.
    pub fn row(values: &[f64]) -> Result<Tensor> {
        Self::from_vec(values.to_vec(), &[1, values.len()])
    }

    /// Leaf tensor that participates in differentiation.
    pub fn param(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
        Ok(Self::from_vec_dtype(data, shape, dtype)?.as_param())
    }

    /// Fresh leaf copy of this value with `requires_grad` set.
    pub fn as_param(&self) -> Tensor {
        Self::build(
            self.0.data.clone(),
            self.0.shape.clone(),
            self.0.dtype,
            true,
            None,
        )
    }

    /// Fresh leaf copy of this value, cut from any graph.
    pub fn detach(&self) -> Tensor {
        Self::build(
            self.0.data.clone(),
            self.0.shape.clone(),
            self.0.dtype,
            false,
            None,
        )
    }

    /// Same values and shape, converted to `dtype` (a new leaf).
    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        let data = self.0.data.iter().map(|&x| dtype.round(x)).collect();
        Self::build(data, self.0.shape.clone(), dtype, false, None)
    }

    /// Output of a differentiable op. `backward` maps the output gradient to
    /// one gradient buffer per parent, in parent order.
    pub(crate) fn from_op<F>(
        mut data: Vec<f64>,
        shape: Vec<usize>,
        dtype: DType,
        parents: Vec<Tensor>,
        backward: F,
    ) -> Tensor
    where
        F: Fn(&[f64]) -> Vec<Vec<f64>> + Send + Sync + 'static,
    {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if dtype == DType::F32 {
            data.iter_mut().for_each(|x| *x = dtype.round(*x));
        }
        let requires_grad = grad_enabled() && parents.iter().any(Tensor::requires_grad);
        let node = requires_grad.then(|| Node {
            parents,
            backward: Box::new(backward),
        });
        Self::build(data, shape, dtype, requires_grad, node)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn dtype(&self) -> DType {
        self.0.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() needs a single-element tensor, got shape {:?}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode accumulation from a single-element root into every
    /// `requires_grad` tensor reachable from it.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Contract(
                "backward root does not depend on any requires-grad tensor".into(),
            ));
        }

        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(node) = &t.0.node {
                stack.extend(
                    node.parents
                        .iter()
                        .filter(|p| p.requires_grad() && !seen.contains(&p.id()))
                        .cloned(),
                );
            }
            order.push(t);
        }
        order.sort_by_key(|t| Reverse(t.id()));

        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for t in &order {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            if let Some(node) = &t.0.node {
                let parent_grads = (node.backward)(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    if !p.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), p.numel());
                    match pending.get_mut(&p.id()) {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, x)| *a += x),
                        None => {
                            pending.insert(p.id(), pg);
                        }
                    }
                }
            }
            t.accumulate_grad(&g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::from_vec(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::from_vec(vec![], &[0]).is_err());
        assert!(Tensor::from_vec(vec![1.0], &[]).is_err());
    }

    #[test]
    fn f32_values_are_rounded() {
        let t = Tensor::from_vec_dtype(vec![0.1], &[1], DType::F32).unwrap();
        assert_eq!(t.data()[0], 0.1f32 as f64);
        let u = Tensor::from_vec(vec![0.1], &[1]).unwrap();
        assert_eq!(u.data()[0], 0.1);
    }

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::param(vec![1.0, -2.0, 3.5], &[3], DType::F64).unwrap();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_rule() {
        let x = Tensor::param(vec![3.0], &[1], DType::F64).unwrap();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let x = Tensor::param(vec![3.0], &[1], DType::F64).unwrap();
        let y = x.mul(&x).unwrap().sum();
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let x = Tensor::param(vec![1.0, 2.0], &[2], DType::F64).unwrap();
        assert!(matches!(x.backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = Tensor::param(vec![1.0, 2.0], &[2], DType::F64).unwrap();
        let y = no_grad(|| x.sum());
        assert!(!y.requires_grad());
        assert!(grad_enabled());
    }

    #[test]
    fn mixed_dtype_promotes() {
        let a = Tensor::from_vec_dtype(vec![1.0], &[1], DType::F32).unwrap();
        let b = Tensor::from_vec(vec![1e-12], &[1]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.dtype(), DType::F64);
        assert_eq!(c.data()[0], 1.0 + 1e-12);
    }
}
