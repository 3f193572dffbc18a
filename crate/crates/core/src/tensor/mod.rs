//! Reverse-mode autodiff over `f32` buffers.
//!
//! Every `Tensor` is a cheap handle onto a graph node holding row-major data,
//! a shape, and the op that produced it. Node ids increase monotonically as
//! nodes are created, so a child's id is always larger than its parents'.
//! `backward` exploits that: it collects the reachable subgraph, replays it in
//! descending id order (exact reverse of recording order), and accumulates
//! gradients into the leaves that requested them. The whole engine is
//! single-threaded and deterministic: identical op sequences produce
//! bit-identical values and gradients.

mod backward;
mod ops;
pub(crate) mod shape;

pub use ops::Op;

use crate::error::{TensorError, TensorResult};
use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: RefCell<Vec<f32>>,
    /// Persistent gradient buffer; only leaves accumulate here.
    pub(crate) grad: RefCell<Option<Vec<f32>>>,
    pub(crate) requires_grad: Cell<bool>,
    pub(crate) op: Op,
}

/// Handle onto a graph node. `clone` copies the handle, not the buffer.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Node>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad.get())
            .finish()
    }
}

impl Tensor {
    pub(crate) fn new_node(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(shape::numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(requires_grad),
            op,
        }))
    }

    /// Constant leaf: carries values, never accumulates a gradient.
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> TensorResult<Tensor> {
        if shape::numel(shape) != data.len() {
            return Err(TensorError::BadReshape {
                from: vec![data.len()],
                from_len: data.len(),
                to: shape.to_vec(),
                to_len: shape::numel(shape),
            });
        }
        Ok(Tensor::new_node(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Trainable leaf: `backward` accumulates into its `grad` buffer.
    pub fn param(data: Vec<f32>, shape: &[usize]) -> TensorResult<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        t.0.requires_grad.set(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new_node(shape.to_vec(), vec![0.0; shape::numel(shape)], false, Op::Leaf)
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::new_node(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        shape::numel(&self.0.shape)
    }

    pub fn data(&self) -> Ref<'_, Vec<f32>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.0.data.borrow().clone()
    }

    /// Scalar extraction; panics on non-scalar tensors.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on shape {:?}", self.0.shape);
        self.0.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    /// Drops this leaf out of future gradient accumulation (frozen weights).
    pub fn set_requires_grad(&self, on: bool) {
        self.0.requires_grad.set(on);
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.borrow().clone()
    }

    /// Overwrites the values of a leaf in place (optimizer updates, oracle
    /// perturbations). The graph above it, if any, is stale afterwards.
    pub fn set_data(&self, values: &[f32]) {
        let mut d = self.0.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data length mismatch");
        d.copy_from_slice(values);
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Reverse pass from a scalar loss. Repeated calls without `zero_grad`
    /// accumulate additively into leaf gradients.
    pub fn backward(&self) -> TensorResult<()> {
        backward::run(self)
    }
}
