//! Dense NCHW tensors with tape-free reverse-mode differentiation.
//!
//! Every operation that has at least one gradient-tracking input records a
//! closure mapping the output gradient to input gradients. [`Tensor::backward`]
//! orders the reachable operations topologically (see [`Graph`]) and replays
//! them in reverse. Gradients of leaves accumulate across passes until
//! [`Tensor::zero_grad`] is called.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Batch, channel, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub fn with_spatial(self, h: usize, w: usize) -> Self {
        Shape { h, w, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording operations on this thread.
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

/// Maps the output gradient to one optional gradient per input.
/// `needs[i]` is false when input `i` does not track gradients.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Op {
    name: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    shape: Shape,
    data: Vec<f64>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Option<Op>,
}

/// A reference-counted tensor value. Cloning is cheap and shares storage.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.op_name())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "data length {} does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Self::from_parts(shape, data, false, None))
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self::from_parts(shape, vec![value; shape.numel()], false, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self::from_parts(shape, data, false, None)
    }

    /// A gradient-tracking leaf.
    pub fn param(shape: Shape, data: Vec<f64>) -> Result<Self> {
        Ok(Self::new(shape, data)?.requires_grad())
    }

    /// Returns a leaf that shares no graph history and tracks gradients.
    pub fn requires_grad(self) -> Self {
        let data = self.0.data.clone();
        Self::from_parts(self.0.shape, data, true, None)
    }

    /// Returns a leaf copy without gradient tracking.
    pub fn detach(&self) -> Self {
        Self::from_parts(self.0.shape, self.0.data.clone(), false, None)
    }

    fn from_parts(shape: Shape, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Self {
        Tensor(Rc::new(Node {
            shape,
            data,
            grad: RefCell::new(None),
            requires_grad,
            op,
        }))
    }

    /// Records an operation result. The op is only kept when some input tracks
    /// gradients.
    pub(crate) fn from_op(
        shape: Shape,
        data: Vec<f64>,
        name: &'static str,
        inputs: &[&Tensor],
        backward: BackwardFn,
    ) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        let tracked =
            GRAD_ENABLED.with(Cell::get) && inputs.iter().any(|t| t.tracks_grad());
        let op = tracked.then(|| Op {
            name,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            backward,
        });
        Self::from_parts(shape, data, tracked, op)
    }

    pub fn shape(&self) -> Shape {
        self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.0.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(format!(
                "item() on tensor of shape {}",
                self.0.shape
            ))),
        }
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let s = self.0.shape;
        self.0.data[((n * s.c + c) * s.h + y) * s.w + x]
    }

    pub fn tracks_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|op| op.name)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    /// Backpropagates from a single-element tensor with seed gradient 1.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward on non-scalar tensor of shape {} needs an explicit seed",
                self.shape()
            )));
        }
        self.backward_with(&[1.0])
    }

    /// Backpropagates an explicit seed gradient of the same shape.
    pub fn backward_with(&self, seed: &[f64]) -> Result<()> {
        if seed.len() != self.numel() {
            return Err(Error::shape(format!(
                "seed length {} does not match shape {}",
                seed.len(),
                self.shape()
            )));
        }
        Graph::trace(self).run_backward(seed);
        Ok(())
    }
}

/// The operations reachable from a root tensor, in topological order:
/// every entry appears after all producers of its inputs.
pub struct Graph {
    order: Vec<Tensor>,
}

impl Graph {
    pub fn trace(root: &Tensor) -> Self {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        // iterative post-order DFS
        let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if !t.tracks_grad() {
                continue;
            }
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for input in op.inputs.iter().rev() {
                    if !seen.contains(&input.key()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        Graph { order }
    }

    /// All gradient-tracking tensors reachable from the root, producers first.
    pub fn tensors(&self) -> &[Tensor] {
        &self.order
    }

    /// Names of the recorded operations in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.order.iter().filter_map(|t| t.op_name()).collect()
    }

    fn run_backward(&self, seed: &[f64]) {
        let Some(root) = self.order.last() else {
            return;
        };
        let index: std::collections::HashMap<*const Node, usize> = self
            .order
            .iter()
            .enumerate()
            .map(|(i, t)| (t.key(), i))
            .collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.order.len()];
        grads[self.order.len() - 1] = Some(seed.to_vec());
        debug_assert!(root.tracks_grad());

        for i in (0..self.order.len()).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.order[i].0;
            match &node.op {
                Some(op) => {
                    let needs: Vec<bool> = op.inputs.iter().map(|t| t.tracks_grad()).collect();
                    let input_grads = (op.backward)(&g, &needs);
                    for ((input, ig), need) in op.inputs.iter().zip(input_grads).zip(needs) {
                        let (Some(ig), true) = (ig, need) else {
                            continue;
                        };
                        let j = index[&input.key()];
                        match &mut grads[j] {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
                None => {
                    let mut slot = node.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
            }
        }
    }
}
