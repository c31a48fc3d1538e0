//! The [`Tensor`] handle and the reverse-mode computation record.
//!
//! Every tensor is an immutable node. Ops that consume at least one
//! gradient-carrying input record a backward closure together with their
//! parents; [`Tensor::backward`] walks that record in reverse topological
//! order and accumulates into the `grad` buffers of the leaves.

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{dim_err, Result, TensorError};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static NO_GRAD_DEPTH: Cell<usize> = const { Cell::new(0) };
}

/// Gradient of each parent given the gradient of the output.
/// `None` means "no contribution".
pub(crate) type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct Record {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    record: Option<Record>,
}

/// Dense row-major f64 tensor with an optional gradient record.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

/// While alive, ops on this thread build no computation record.
pub struct NoGradGuard(());

pub fn no_grad() -> NoGradGuard {
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    NoGradGuard(())
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, record: Option<Record>) -> Self {
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            record,
        }))
    }

    fn validated(shape: &[usize], data: &[f64]) -> Result<()> {
        if numel(shape) != data.len() {
            return dim_err(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                numel(shape),
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("construction"));
        }
        Ok(())
    }

    /// Constant tensor (no gradient). Rejects NaN/Inf.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::validated(shape, &data)?;
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Constant tensor that may hold non-finite values. Test use only.
    pub fn from_vec_unchecked(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return dim_err("shape/data length mismatch");
        }
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Self::validated(shape, &data)?;
        Ok(Self::build(shape.to_vec(), data, true, None))
    }

    pub fn scalar(v: f64) -> Self {
        Self::build(Vec::new(), vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![0.0; numel(shape)], false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::build(shape.to_vec(), vec![v; numel(shape)], false, None)
    }

    /// Result of an op. The backward closure is dropped when no parent
    /// needs a gradient or recording is disabled.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let needs = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if needs {
            Self::build(shape, data, true, Some(Record { parents, backward }))
        } else {
            Self::build(shape, data, false, None)
        }
    }

    pub(crate) fn from_op_checked(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(op));
        }
        Ok(Self::from_op(shape, data, parents, backward))
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.record.is_none()
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return dim_err(format!("item() on tensor of shape {:?}", self.shape()));
        }
        Ok(self.0.data[0])
    }

    /// Same values, no gradient history.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Fresh gradient-carrying leaf with the same values.
    pub fn detach_param(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.0.data.clone(), true, None)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    fn accumulate(&self, g: &[f64]) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode pass from a scalar loss. Leaf gradients accumulate
    /// across calls until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward() requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.record {
                None => node.accumulate(&g),
                Some(rec) => {
                    let parent_grads = (rec.backward)(&g);
                    debug_assert_eq!(parent_grads.len(), rec.parents.len());
                    for (p, pg) in rec.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.len());
                        match pending.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over gradient-carrying nodes reachable from `self`.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(rec) = &t.0.record {
                for p in &rec.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &preview)
            .finish()
    }
}
