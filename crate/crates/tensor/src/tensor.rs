//! The [`Tensor`] type and the reverse-mode tape behind it.
//!
//! Every tensor produced by an operation on at least one tensor that requires
//! gradients carries a [`TapeNode`] naming the operation, holding its inputs and
//! a closure that maps the output gradient to input gradients. The graph is a
//! DAG by construction (a node can only reference tensors that existed before
//! it), and [`Tensor::backward`] walks it in reverse topological order.

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::real::Real;

/// Maps `(grad_output, output_data)` to one optional gradient per input.
///
/// Entries for inputs that do not require gradients may be `None`.
pub type BackwardFn<T> = Box<dyn Fn(&[T], &[T]) -> Vec<Option<Vec<T>>>>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any operations on the tape.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _restore = Restore(prev);
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// A recorded operation: what produced a tensor and how to differentiate it.
pub struct TapeNode<T: Real> {
    pub op: &'static str,
    pub inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Real> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    tape: Option<TapeNode<T>>,
}

/// Dense row-major tensor with optional gradient tracking.
///
/// Cloning is cheap (reference counted); the data itself is immutable once
/// created. Only the gradient buffer of a leaf changes, during
/// [`Tensor::backward`].
pub struct Tensor<T: Real>(Rc<Node<T>>);

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("dtype", &T::NAME)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.tape.as_ref().map(|t| t.op))
            .finish()
    }
}

pub(crate) fn check_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(index) => Err(TensorError::NumericFault {
            op,
            index,
            value: data[index].as_f64(),
        }),
    }
}

fn check_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(TensorError::dim(
            op,
            format!("extents must be positive, got {shape:?}"),
        ));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(TensorError::dim(
            op,
            format!("shape {shape:?} needs {n} values, got {len}"),
        ));
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    fn make(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        tape: Option<TapeNode<T>>,
    ) -> Self {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            tape,
        }))
    }

    /// A constant (no gradient) tensor.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape("new", shape, data.len())?;
        check_finite("new", &data)?;
        Ok(Self::make(shape.to_vec(), data, false, None))
    }

    /// A leaf that accumulates gradients during [`backward`](Self::backward).
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape("param", shape, data.len())?;
        check_finite("param", &data)?;
        Ok(Self::make(shape.to_vec(), data, true, None))
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self::make(vec![1], vec![v], false, None)
    }

    /// Records the result of a custom operation.
    ///
    /// `data` is checked for non-finite values. The tape entry is only kept
    /// when gradient recording is enabled and some input requires gradients.
    pub fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: &[&Tensor<T>],
        backward: BackwardFn<T>,
    ) -> Result<Self> {
        check_shape(op, &shape, data.len())?;
        check_finite(op, &data)?;
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let tape = track.then(|| TapeNode {
            op,
            inputs: inputs.iter().map(|&t| t.clone()).collect(),
            backward,
        });
        Ok(Self::make(shape, data, track, tape))
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

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.tape.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.tape.as_ref().map(|t| t.op)
    }

    pub fn tape(&self) -> Option<&TapeNode<T>> {
        self.0.tape.as_ref()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape()
        );
        self.0.data[0]
    }

    pub fn grad(&self) -> Option<Ref<'_, Vec<T>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().expect("checked")))
        } else {
            None
        }
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// A constant copy cut off from the tape.
    pub fn detach(&self) -> Self {
        Self::make(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// A fresh gradient-tracking leaf with the same values.
    pub fn detach_param(&self) -> Self {
        Self::make(self.0.shape.clone(), self.0.data.clone(), true, None)
    }

    /// Convert to another precision (constant result).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        let data = self.0.data.iter().map(|v| U::of(v.as_f64())).collect();
        Tensor::make(self.0.shape.clone(), data, false, None)
    }

    /// Reverse-mode sweep from a single-element root.
    ///
    /// Gradients of every gradient-requiring leaf reachable from `self` are
    /// accumulated (added to any gradient already present).
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward() needs a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(TensorError::Contract(
                "backward() on a tensor that does not require gradients".into(),
            ));
        }

        let order = self.topological_order();
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);

        for node in order.iter().rev() {
            let Some(grad_out) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.tape {
                None => {
                    if node.requires_grad() {
                        let mut slot = node.0.grad.borrow_mut();
                        match slot.as_mut() {
                            Some(acc) => acc.iter_mut().zip(&grad_out).for_each(|(a, g)| *a += *g),
                            None => *slot = Some(grad_out),
                        }
                    }
                }
                Some(tape) => {
                    let grads = (tape.backward)(&grad_out, node.data());
                    debug_assert_eq!(grads.len(), tape.inputs.len(), "op {}", tape.op);
                    for (input, grad) in tape.inputs.iter().zip(grads) {
                        let Some(grad) = grad else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        if grad.len() != input.numel() {
                            return Err(TensorError::Contract(format!(
                                "op {} produced a gradient of length {} for an input of {} values",
                                tape.op,
                                grad.len(),
                                input.numel()
                            )));
                        }
                        check_finite(tape.op, &grad)?;
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += *g),
                            None => {
                                pending.insert(input.id(), grad);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over gradient-requiring nodes reachable from `self`.
    fn topological_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // (node, children expanded?)
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(tape) = &node.0.tape {
                for input in tape.inputs.iter().rev() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}
