//! Dense 2-D f64 tensors with recorded reverse-mode differentiation.
//!
//! Every forward operation allocates a fresh node holding its output values
//! and a provenance record (the operation plus handles to its inputs).
//! [`backward`] runs a reverse topological sweep from a scalar loss,
//! accumulating gradients additively into every reachable leaf that
//! requires them. A tape is single-threaded; independent graphs may live on
//! separate threads.
//!
//! Shape mismatches and non-finite results panic: both indicate a bug or a
//! diverged training run, and the training loop maps panics to a numeric
//! failure at its boundary.

mod ops;

pub use ops::{Segments, SparseMat};

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::Array2;

pub(crate) struct Inner {
    pub(crate) values: Array2<f64>,
    pub(crate) grad: Option<Array2<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Option<ops::Op>,
}

/// A handle to a tape node. Cloning is shallow.
pub struct Tensor(pub(crate) Rc<RefCell<Inner>>);

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.0.borrow();
        write!(
            f,
            "Tensor{:?} requires_grad={}",
            (inner.values.nrows(), inner.values.ncols()),
            inner.requires_grad
        )
    }
}

pub(crate) fn assert_finite(op_name: &str, values: &Array2<f64>) {
    if !values.iter().all(|v| v.is_finite()) {
        panic!("non-finite result in `{op_name}`");
    }
}

impl Tensor {
    /// A gradient-carrying leaf (a parameter or a checked input).
    pub fn leaf(values: Array2<f64>, requires_grad: bool) -> Self {
        assert_finite("leaf", &values);
        Tensor(Rc::new(RefCell::new(Inner {
            values,
            grad: None,
            requires_grad,
            op: None,
        })))
    }

    /// A constant input that never receives gradient.
    pub fn constant(values: Array2<f64>) -> Self {
        Self::leaf(values, false)
    }

    pub fn scalar(x: f64) -> Self {
        Self::constant(Array2::from_elem((1, 1), x))
    }

    pub(crate) fn from_op(values: Array2<f64>, op: ops::Op) -> Self {
        let requires_grad = op.parents().iter().any(|p| p.0.borrow().requires_grad);
        Tensor(Rc::new(RefCell::new(Inner {
            values,
            grad: None,
            requires_grad,
            op: Some(op),
        })))
    }

    pub fn shape(&self) -> (usize, usize) {
        let inner = self.0.borrow();
        (inner.values.nrows(), inner.values.ncols())
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.borrow().op.is_none()
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.0.borrow_mut().requires_grad = flag;
    }

    /// Borrow the value matrix.
    pub fn value(&self) -> Ref<'_, Array2<f64>> {
        Ref::map(self.0.borrow(), |inner| &inner.values)
    }

    /// Clone the value matrix out.
    pub fn to_array(&self) -> Array2<f64> {
        self.0.borrow().values.clone()
    }

    /// The single entry of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        let inner = self.0.borrow();
        assert_eq!(
            inner.values.dim(),
            (1, 1),
            "item() requires a 1x1 tensor, got {:?}",
            inner.values.dim()
        );
        inner.values[(0, 0)]
    }

    /// Clone the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Array2<f64>> {
        self.0.borrow().grad.clone()
    }

    /// Remove and return the accumulated gradient.
    pub fn take_grad(&self) -> Option<Array2<f64>> {
        self.0.borrow_mut().grad.take()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Mutate the value matrix in place (optimizer updates). The tensor
    /// must be a leaf; rewriting an interior node would desynchronize the
    /// tape.
    pub fn update_value(&self, f: impl FnOnce(&mut Array2<f64>)) {
        let mut inner = self.0.borrow_mut();
        assert!(inner.op.is_none(), "update_value on a non-leaf tensor");
        f(&mut inner.values);
        assert_finite("update_value", &inner.values);
    }

    pub(crate) fn accumulate_grad(&self, g: Array2<f64>) {
        let mut inner = self.0.borrow_mut();
        debug_assert_eq!(inner.values.dim(), g.dim(), "gradient shape mismatch");
        match &mut inner.grad {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }
}

/// Reverse sweep from a scalar loss. Gradients accumulate additively into
/// every reachable leaf with `requires_grad`; frozen leaves are skipped
/// entirely, as are subgraphs that cannot reach a gradient-requiring leaf.
pub fn backward(loss: &Tensor) {
    assert_eq!(
        loss.shape(),
        (1, 1),
        "backward requires a scalar (1x1) loss, got {:?}",
        loss.shape()
    );
    if !loss.0.borrow().requires_grad {
        return;
    }

    // Iterative postorder DFS. `state`: 0 = unvisited, 1 = on stack
    // (cycle guard), 2 = done.
    let mut order: Vec<Tensor> = Vec::new();
    let mut state: HashMap<usize, u8> = HashMap::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(loss.clone(), 0)];
    state.insert(loss.key(), 1);
    while let Some((node, child)) = stack.pop() {
        let parents = node
            .0
            .borrow()
            .op
            .as_ref()
            .map(|op| op.parents())
            .unwrap_or_default();
        if child < parents.len() {
            stack.push((node.clone(), child + 1));
            let parent = parents[child].clone();
            match state.get(&parent.key()).copied().unwrap_or(0) {
                0 => {
                    if parent.0.borrow().requires_grad {
                        state.insert(parent.key(), 1);
                        stack.push((parent, 0));
                    }
                }
                1 => panic!("cycle detected in the tape"),
                _ => {}
            }
        } else {
            state.insert(node.key(), 2);
            order.push(node);
        }
    }

    loss.accumulate_grad(Array2::from_elem((1, 1), 1.0));
    for node in order.iter().rev() {
        let grad = {
            let mut inner = node.0.borrow_mut();
            if inner.op.is_none() {
                continue; // leaf: keep its accumulated gradient
            }
            match inner.grad.take() {
                Some(g) => g,
                None => continue,
            }
        };
        // Parents are always distinct allocations from the node itself, so
        // holding this borrow while the VJP mutates parents is safe.
        let inner = node.0.borrow();
        if let Some(op) = inner.op.as_ref() {
            op.vjp(&inner.values, &grad);
        }
    }
}

/// Max relative error between recorded gradients and central finite
/// differences of a scalar-valued function, over every coordinate of every
/// input.
pub fn grad_check(
    f: impl Fn(&[Tensor]) -> Tensor,
    inputs: &[Array2<f64>],
    eps: f64,
) -> f64 {
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|x| Tensor::leaf(x.clone(), true))
        .collect();
    let loss = f(&leaves);
    backward(&loss);
    let analytic: Vec<Array2<f64>> = leaves
        .iter()
        .map(|l| {
            l.grad()
                .unwrap_or_else(|| Array2::zeros(l.value().dim()))
        })
        .collect();

    let eval = |xs: &[Array2<f64>]| -> f64 {
        let leaves: Vec<Tensor> = xs.iter().map(|x| Tensor::constant(x.clone())).collect();
        f(&leaves).item()
    };

    let mut worst = 0.0f64;
    let mut xs: Vec<Array2<f64>> = inputs.to_vec();
    for i in 0..xs.len() {
        for idx in 0..xs[i].len() {
            let (r, c) = (idx / xs[i].ncols(), idx % xs[i].ncols());
            let orig = xs[i][(r, c)];
            xs[i][(r, c)] = orig + eps;
            let plus = eval(&xs);
            xs[i][(r, c)] = orig - eps;
            let minus = eval(&xs);
            xs[i][(r, c)] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i][(r, c)];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn linear_map_gradient() {
        // loss = sum(W x): dLoss/dW = x^T broadcast across rows.
        let w = Tensor::leaf(array![[1.0, 2.0], [3.0, 4.0]], true);
        let x = Tensor::constant(array![[5.0], [7.0]]);
        let loss = w.matmul(&x).sum();
        backward(&loss);
        assert_eq!(w.grad().unwrap(), array![[5.0, 7.0], [5.0, 7.0]]);
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let c = Tensor::leaf(array![[3.0]], true);
        let x = Tensor::constant(array![[-1.0]]);
        let loss = x.relu().mul_elem(&c).sum();
        backward(&loss);
        assert_eq!(c.grad().unwrap(), array![[0.0]]);
    }

    #[test]
    fn gradient_accumulates_across_uses() {
        let x = Tensor::leaf(array![[2.0]], true);
        // loss = x*x + 3x -> d/dx = 2x + 3 = 7
        let loss = x.mul_elem(&x).add(&x.scale(3.0)).sum();
        backward(&loss);
        assert_eq!(x.grad().unwrap(), array![[7.0]]);
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let w = Tensor::leaf(array![[1.0]], false);
        let v = Tensor::leaf(array![[2.0]], true);
        let loss = w.mul_elem(&v).sum();
        backward(&loss);
        assert!(w.grad().is_none());
        assert_eq!(v.grad().unwrap(), array![[1.0]]);
    }

    #[test]
    #[should_panic(expected = "scalar")]
    fn backward_rejects_non_scalar() {
        let x = Tensor::leaf(array![[1.0, 2.0]], true);
        backward(&x.relu());
    }

    #[test]
    fn quadratic_grad_check() {
        // f = x^2 at x=3: analytic 6.
        let err = grad_check(
            |ts| ts[0].mul_elem(&ts[0]).sum(),
            &[array![[3.0]]],
            1e-5,
        );
        assert!(err < 1e-9, "rel err {err}");
    }

    #[test]
    fn gelu_gradient_at_zero_is_half() {
        let x = Tensor::leaf(array![[0.0]], true);
        let loss = x.gelu().sum();
        backward(&loss);
        assert!((x.grad().unwrap()[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let err = grad_check(
            |ts| ts[0].scale(0.0).sum().add_scalar(4.0),
            &[array![[1.0, -2.0]]],
            1e-5,
        );
        assert!(err < 1e-12);
        let x = Tensor::leaf(array![[1.0, -2.0]], true);
        let loss = x.scale(0.0).sum().add_scalar(4.0);
        backward(&loss);
        assert_eq!(x.grad().unwrap(), array![[0.0, 0.0]]);
    }

    #[test]
    fn replay_is_bitwise_deterministic() {
        let run = || {
            let w = Tensor::leaf(array![[0.3, -1.2], [2.2, 0.7]], true);
            let x = Tensor::constant(array![[0.5, -0.25], [1.5, 0.75]]);
            let loss = w.matmul(&x).gelu().sum();
            backward(&loss);
            (loss.item(), w.grad().unwrap())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }
}
