//! Dense 1-3D tensors with reverse-mode automatic differentiation.
//!
//! Every forward operation that touches a gradient-tracked tensor records a
//! node holding its inputs and a backward rule. `Tensor::backward` walks the
//! recorded graph once in reverse topological order and accumulates
//! `d(loss)/d(tensor)` into every tracked leaf. Op outputs are immutable
//! after creation; leaf values may be rewritten in place by the optimizer.
//!
//! Storage is row-major and contiguous. A leading third extent is treated as
//! a batch dimension: all operations apply per slice with identical
//! semantics, and weight operands broadcast across it.

mod gemm;
mod gradcheck;
mod ops;

pub use gemm::Element;
pub use gradcheck::finite_diff_check;
pub use ops::masked_cross_entropy;

use crate::error::{Error, Result};
use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// How a non-leaf tensor was produced; consumed by the backward sweep.
pub(crate) enum Rule<T: Element> {
    /// C = A · B (weight operand may broadcast over the batch extent).
    Matmul,
    /// C = A · Bᵀ over the last two extents.
    MatmulNt,
    /// Elementwise sum, rhs broadcast per `broadcast` rules.
    Add,
    /// Elementwise product, rhs broadcast.
    Mul,
    /// y = c · x for a scalar constant.
    Scale(T),
    Relu,
    /// Row-wise softmax over the last extent; backward reads the stored output.
    SoftmaxRows,
    /// Column-wise concatenation; `widths` are the input column counts.
    ConcatCols { widths: Vec<usize> },
    /// Contiguous column window starting at `start` of the parent.
    SliceCols { start: usize },
    /// Row lookup into a table; backward scatter-adds per id.
    GatherRows { ids: Vec<usize> },
    Reshape,
    /// Full reduction to a scalar.
    Sum,
    /// Column-wise standardization over the first `valid` rows of each slice.
    StandardizeCols { valid: Vec<usize>, eps: T },
    /// Column-wise standardization where row i uses statistics of rows 0..=i.
    StandardizeColsCausal { valid: Vec<usize>, eps: T },
    /// Row-wise standardization over the last extent.
    StandardizeRows { eps: T },
    /// Inverted dropout; `keep` holds the sampled per-element scale (0 or 1/(1-rate)).
    Dropout { keep: Vec<T> },
    /// Mean negative log-likelihood over non-pad positions.
    MaskedCrossEntropy {
        labels: Vec<u32>,
        pad_id: u32,
        n_valid: usize,
    },
}

pub(crate) struct Node<T: Element> {
    id: u64,
    shape: Vec<usize>,
    // Interior-mutable only so the optimizer can update leaf parameters in
    // place; op outputs are never written again after creation.
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    parents: Vec<Tensor<T>>,
    rule: Option<Rule<T>>,
}

/// A shared handle to an immutable tensor value plus its autodiff bookkeeping.
///
/// Cloning is cheap (reference count); two clones refer to the same node and
/// the same gradient buffer.
pub struct Tensor<T: Element>(Rc<Node<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    fn from_node(node: Node<T>) -> Self {
        Tensor(Rc::new(node))
    }

    pub(crate) fn new_leaf(data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::Contract(format!(
                "tensors are 1-3 dimensional, got shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self::from_node(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            parents: Vec::new(),
            rule: None,
        }))
    }

    /// Records an op output. The node tracks gradients iff any parent does;
    /// otherwise the graph edge is dropped so constant subtrees stay leaf-like.
    pub(crate) fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        parents: Vec<Tensor<T>>,
        rule: Rule<T>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, rule) = if requires_grad {
            (parents, Some(rule))
        } else {
            (Vec::new(), None)
        };
        Self::from_node(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            parents,
            rule,
        })
    }

    /// A gradient-tracked leaf (trainable parameter).
    pub fn param(data: Vec<T>, shape: Vec<usize>) -> Result<Self> {
        Self::new_leaf(data, shape, true)
    }

    /// A constant leaf; no gradient flows into or through it.
    pub fn constant(data: Vec<T>, shape: Vec<usize>) -> Result<Self> {
        Self::new_leaf(data, shape, false)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel = shape.iter().product();
        Self::new_leaf(vec![T::zero(); numel], shape, false)
    }

    pub fn scalar(v: T) -> Self {
        Self::new_leaf(vec![v], vec![1], false).expect("scalar shape is valid")
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn len(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Borrows the value buffer. The borrow is dynamic only because optimizer
    /// steps rewrite leaves in place; holding it across an update panics.
    pub fn data(&self) -> std::cell::Ref<'_, [T]> {
        std::cell::Ref::map(self.0.data.borrow(), |v| v.as_slice())
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.0.data.borrow()[0]
    }

    /// A copy of the accumulated gradient, if any backward pass reached this tensor.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first touch.
    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.len());
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi = *gi + *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Mutable access to the gradient buffer (allocated zeroed on first touch),
    /// for rules that write grads in place via GEMM accumulation.
    pub(crate) fn grad_buf(&self) -> std::cell::RefMut<'_, Vec<T>> {
        {
            let mut slot = self.0.grad.borrow_mut();
            if slot.is_none() {
                *slot = Some(vec![T::zero(); self.len()]);
            }
        }
        std::cell::RefMut::map(self.0.grad.borrow_mut(), |s| {
            s.as_mut().expect("grad allocated above")
        })
    }

    /// In-place parameter update for the optimizer. Only valid on leaves:
    /// recorded graphs assume op outputs never change after creation.
    pub fn update_data(&self, mut f: impl FnMut(&mut T, usize)) {
        assert!(
            self.0.rule.is_none(),
            "update_data is reserved for leaf tensors"
        );
        for (i, v) in self.0.data.borrow_mut().iter_mut().enumerate() {
            f(v, i);
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// gradient-tracked tensor reachable from `self`; repeated calls without
    /// `clear_grad` keep accumulating.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Contract(
                "backward on a tensor with no gradient-tracked ancestors".into(),
            ));
        }
        self.accumulate_grad(&[T::one()]);

        // Reverse topological order: every node is visited exactly once, after
        // every node that consumes its output.
        let order = self.topo_order();
        for node in order.iter().rev() {
            if node.0.rule.is_none() {
                continue;
            }
            let grad = node.0.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            ops::apply_backward(node, &grad);
            // Intermediate gradients are dead after their rule fires; dropping
            // them caps peak memory during the sweep.
            if !node.0.parents.is_empty() {
                node.clear_grad();
            }
        }
        Ok(())
    }

    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // Iterative post-order DFS; graphs get deep during training.
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((node, child)) = stack.pop() {
            if child < node.0.parents.len() {
                stack.push((node.clone(), child + 1));
                let parent = node.0.parents[child].clone();
                if parent.requires_grad() && visited.insert(parent.id()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }

    /// Number of matrix rows: the product of all extents except the last.
    pub(crate) fn rows(&self) -> usize {
        self.shape()[..self.shape().len() - 1].iter().product()
    }

    /// The last extent (column count).
    pub(crate) fn cols(&self) -> usize {
        *self.shape().last().expect("tensors are never 0-d")
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }
}

impl<T: Element> Tensor<T> {
    pub(crate) fn parents(&self) -> &[Tensor<T>] {
        &self.0.parents
    }

    pub(crate) fn rule(&self) -> Option<&Rule<T>> {
        self.0.rule.as_ref()
    }
}
