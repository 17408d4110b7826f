use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use super::real::Real;
use crate::error::{Error, Result};

/// Backward rule of a recorded operation: maps the upstream gradient of the
/// output to one optional gradient per input, in input order.
pub type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>> + Send + Sync>;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` without recording any operation graph on this thread.
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

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct Node<T: Real> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<T>>>,
    node: Option<Node<T>>,
}

/// Dense row-major tensor. Cloning is cheap and shares storage; values are
/// immutable after construction, only the gradient buffer changes.
pub struct Tensor<T: Real = f32>(Arc<Inner<T>>);

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.0.shape);
        if self.numel() <= 16 {
            s.field("data", &self.0.data);
        }
        if let Some(node) = &self.0.node {
            s.field("op", &node.op);
        }
        s.field("requires_grad", &self.0.requires_grad).finish()
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::Shape(format!(
            "shape {shape:?} needs {expected} values, got {len}"
        )));
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    /// Constant tensor that never receives a gradient.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates a gradient during [`backward`].
    pub fn parameter(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, true, None))
    }

    pub fn scalar(v: T) -> Self {
        Self::build(Vec::new(), vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![T::zero(); n], false, None)
    }

    pub fn from_f64(data: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(data.iter().map(|&v| T::lit(v)).collect(), shape)
    }

    /// Result of a differentiable operation. The graph node is only kept when
    /// some input needs a gradient and recording is enabled on this thread.
    ///
    /// This is public so callers can define their own primitives.
    pub fn custom(
        op: &'static str,
        data: Vec<T>,
        shape: Vec<usize>,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Result<Self> {
        check_len(&shape, data.len())?;
        let track = is_grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if !track {
            return Ok(Self::build(shape, data, false, None));
        }
        let node = Node {
            op,
            inputs,
            backward,
        };
        Ok(Self::build(shape, data, true, Some(node)))
    }

    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, node: Option<Node<T>>) -> Self {
        Tensor(Arc::new(Inner {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        }))
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Name of the producing operation, if recorded.
    pub fn op(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    /// A fresh leaf with the same values, detached from any graph.
    pub fn detach(&self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Same values as a new trainable leaf.
    pub fn to_parameter(&self) -> Self {
        Self::build(self.0.shape.clone(), self.0.data.clone(), true, None)
    }

    /// Convert element type; the result is a leaf with the same trainability.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        let data = self.0.data.iter().map(|v| U::lit(v.as_f64())).collect();
        Tensor::build(
            self.0.shape.clone(),
            data,
            self.0.requires_grad && self.is_leaf(),
            None,
        )
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.0.grad.lock().expect("grad lock");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }
}

/// Reverse-mode sweep from a scalar `loss`. Gradients are *added* to every
/// reachable trainable leaf; callers zero them between steps.
pub fn backward<T: Real>(loss: &Tensor<T>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Usage(format!(
            "backward needs a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.requires_grad() {
        return Err(Error::Usage(
            "backward called on a tensor outside any recorded graph".into(),
        ));
    }

    // Iterative post-order DFS gives a topological order (inputs first).
    let mut order: Vec<Tensor<T>> = Vec::new();
    let mut visited: HashMap<usize, ()> = HashMap::new();
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(loss.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if visited.insert(t.key(), ()).is_some() {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = &t.0.node {
            for input in &node.inputs {
                if input.requires_grad() && !visited.contains_key(&input.key()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }

    let mut grads: HashMap<usize, Vec<T>> = HashMap::new();
    grads.insert(loss.key(), vec![T::one()]);
    for t in order.iter().rev() {
        let Some(g) = grads.remove(&t.key()) else {
            continue;
        };
        match &t.0.node {
            None => t.accumulate_grad(&g),
            Some(node) => {
                let input_grads = (node.backward)(&g);
                debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
                for (input, ig) in node.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !input.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(ig.len(), input.numel(), "op {}", node.op);
                    match grads.get_mut(&input.key()) {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                        None => {
                            grads.insert(input.key(), ig);
                        }
                    }
                }
            }
        }
    }
    Ok(())
}
