use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::scalar::Scalar;

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Returns whether operations currently record a graph on this thread.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with graph recording switched off on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_mode(false, f)
}

pub(crate) fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    let _restore = Restore(prev);
    f()
}

/// Backward rule: receives the upstream gradient and a mask telling which
/// parents need a gradient, returns one optional gradient per parent.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + Send + Sync>;

pub(crate) struct Node<T: Scalar> {
    pub(crate) id: u64,
    pub(crate) parents: Vec<Tensor<T>>,
    pub(crate) backward: Option<BackwardFn<T>>,
    pub(crate) op: &'static str,
}

/// Dense row-major n-dimensional array with optional autodiff history.
///
/// Cloning is cheap: data and history are reference counted. Values are
/// immutable; every operation produces a new tensor.
#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    pub(crate) data: Arc<Vec<T>>,
    pub(crate) shape: Vec<usize>,
    pub(crate) node: Option<Arc<Node<T>>>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, d) in strides.iter_mut().zip(shape.iter()).rev() {
        *s = acc;
        acc *= *d;
    }
    strides
}

impl<T: Scalar> Tensor<T> {
    /// Builds a constant tensor. Panics when `data.len()` disagrees with `shape`.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Self {
        assert_eq!(
            data.len(),
            numel_of(shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            data: Arc::new(data),
            shape: shape.to_vec(),
            node: None,
        }
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Self {
        Self::from_vec(data.iter().map(|&v| T::from_f64_lossy(v)).collect(), shape)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(vec![value], &[])
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_vec(vec![value; numel_of(shape)], shape)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Creates a leaf that tracks gradients (a trainable parameter or an
    /// input whose gradient is requested).
    pub fn leaf(data: Vec<T>, shape: &[usize]) -> Self {
        Self::from_vec(data, shape).requires_grad()
    }

    /// Returns a gradient-tracking leaf sharing this tensor's values.
    pub fn requires_grad(&self) -> Self {
        Tensor {
            data: self.data.clone(),
            shape: self.shape.clone(),
            node: Some(Arc::new(Node {
                id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
                parents: Vec::new(),
                backward: None,
                op: "leaf",
            })),
        }
    }

    /// Drops autodiff history, keeping the values.
    pub fn detach(&self) -> Self {
        Tensor {
            data: self.data.clone(),
            shape: self.shape.clone(),
            node: None,
        }
    }

    pub fn tracks_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn is_leaf(&self) -> bool {
        self.node.as_ref().map_or(true, |n| n.parents.is_empty())
    }

    pub(crate) fn node_id(&self) -> Option<u64> {
        self.node.as_ref().map(|n| n.id)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute element-wise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    /// Records an operation result. History is attached only while grad
    /// mode is on and at least one parent tracks gradients.
    pub(crate) fn from_op(
        data: impl Into<Arc<Vec<T>>>,
        shape: Vec<usize>,
        op: &'static str,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let data = data.into();
        debug_assert_eq!(data.len(), numel_of(&shape));
        let record = is_grad_enabled() && parents.iter().any(|p| p.tracks_grad());
        let node = if record {
            Some(Arc::new(Node {
                id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
                parents,
                backward: Some(backward),
                op,
            }))
        } else {
            None
        };
        Tensor { data, shape, node }
    }

    pub(crate) fn constant(data: Vec<T>, shape: Vec<usize>) -> Self {
        Tensor {
            data: Arc::new(data),
            shape,
            node: None,
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.node.as_ref().map_or("const", |n| n.op);
        write!(f, "Tensor{{shape: {:?}, op: {}", self.shape, op)?;
        if self.numel() <= 8 {
            write!(f, ", data: {:?}", self.data)?;
        }
        write!(f, "}}")
    }
}
