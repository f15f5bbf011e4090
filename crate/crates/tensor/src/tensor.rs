use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use crate::ops::Op;
use crate::shape::numel;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// An n-dimensional array of `f64` that participates in reverse-mode
/// differentiation.
///
/// Cloning a `Tensor` is cheap and yields a handle to the same node.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) node: Arc<Node>,
}

pub(crate) struct Node {
    /// Creation order. Parents always have smaller ids than their children,
    /// so descending id order is a valid reverse topological order.
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: RwLock<Vec<f64>>,
    pub(crate) grad: Mutex<Option<Vec<f64>>>,
    pub(crate) requires_grad: AtomicBool,
    pub(crate) op: Option<Op>,
}

impl Tensor {
    fn from_node(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Self {
        assert_eq!(
            data.len(),
            numel(&shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                grad: Mutex::new(None),
                requires_grad: AtomicBool::new(requires_grad),
                op,
            }),
        }
    }

    /// A leaf that does not track gradients.
    pub fn constant(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self::from_node(shape, data, false, None)
    }

    /// A leaf that accumulates gradients (a trainable parameter or an input
    /// being differentiated against).
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self::from_node(shape, data, true, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(vec![], vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::constant(shape.to_vec(), vec![value; numel(shape)])
    }

    /// Builds the result of an operation. The op is only recorded when one of
    /// its inputs requires a gradient.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Self {
        let rg = op.inputs().iter().any(|t| t.requires_grad());
        Self::from_node(shape, data, rg, rg.then_some(op))
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.node.shape)
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.node.shape[axis]
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f64>> {
        self.node.data.read().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad.load(Ordering::Relaxed)
    }

    /// Toggles gradient tracking on a leaf. Graphs built afterwards see the
    /// new setting; graphs already built are unaffected.
    pub fn set_requires_grad(&self, flag: bool) {
        assert!(self.is_leaf(), "requires_grad can only be changed on leaves");
        self.node.requires_grad.store(flag, Ordering::Relaxed);
    }

    pub fn is_leaf(&self) -> bool {
        self.node.op.is_none()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock poisoned") = None;
    }

    /// A new constant leaf holding a copy of the values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.shape().to_vec(), self.to_vec())
    }

    /// In-place update of a leaf's values (optimizer steps, checkpoint loads).
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        assert!(self.is_leaf(), "only leaves can be updated in place");
        let mut guard = self.node.data.write().expect("tensor data lock poisoned");
        f(&mut guard);
    }

    pub(crate) fn id(&self) -> u64 {
        self.node.id
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut guard = self.node.grad.lock().expect("grad lock poisoned");
        match guard.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *guard = Some(g.to_vec()),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("values", &preview)
            .finish()
    }
}
