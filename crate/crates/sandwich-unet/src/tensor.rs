//! Dense tensors and reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shared handle to a row-major `f64` buffer with an
//! optional gradient slot. Operations executed inside [`Tape::record`]
//! append backward closures to a tape; [`Tape::backward`] replays the
//! tape in reverse, accumulating gradients into every tensor that
//! requires them. The tape is rebuilt on every forward pass
//! (define-by-run), so the graph always matches the code that ran.
//!
//! All training math is `f64`; gradients of independent paths sum, and
//! replaying identical inputs produces bit-identical values and
//! gradients.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Dense N-dimensional array with an optional gradient slot.
///
/// Cloning a `Tensor` clones the handle, not the buffer; the value data
/// is immutable once created by an operation. Parameter tensors expose
/// [`Tensor::apply_update`] for the optimizer, which is only sound
/// between tape lifetimes.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

struct TensorInner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
}

impl Tensor {
    fn raw(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
            }),
        }
    }

    /// Creates a constant tensor, validating shape/data agreement and
    /// finiteness.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::numerical("tensor data contains NaN or Inf"));
        }
        Ok(Tensor::raw(shape.to_vec(), data, false))
    }

    /// Creates a trainable tensor (gradient slot active).
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                shape: t.inner.shape.clone(),
                data: RefCell::new(t.data_vec()),
                requires_grad: true,
                grad: RefCell::new(None),
            }),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::raw(shape.to_vec(), vec![0.0; numel], false)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::raw(vec![1], vec![value], false)
    }

    pub fn param_scalar(value: f64) -> Tensor {
        let mut t = Tensor::scalar(value);
        t = Tensor {
            inner: Rc::new(TensorInner {
                shape: t.inner.shape.clone(),
                data: RefCell::new(vec![value]),
                requires_grad: true,
                grad: RefCell::new(None),
            }),
        };
        t
    }

    /// Output of an op; `track` marks it as part of the recorded graph.
    pub(crate) fn op_output(shape: Vec<usize>, data: Vec<f64>, track: bool) -> Tensor {
        Tensor::raw(shape, data, track)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Borrows the value buffer.
    pub fn data(&self) -> std::cell::Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    /// Copies the value buffer out.
    pub fn data_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn value(&self) -> f64 {
        assert_eq!(self.numel(), 1, "value() requires a scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    fn set_grad(&self, g: Vec<f64>) {
        *self.inner.grad.borrow_mut() = Some(g);
    }

    /// In-place parameter update (optimizer use). Must not be called
    /// while a tape referencing this tensor is still alive.
    pub fn apply_update(&self, f: impl FnMut(usize, &mut f64)) {
        let mut data = self.inner.data.borrow_mut();
        let mut f = f;
        for (i, v) in data.iter_mut().enumerate() {
            f(i, v);
        }
    }

    /// Overwrites the value buffer (checkpoint restore, snapshots).
    pub fn set_data(&self, values: &[f64]) {
        let mut data = self.inner.data.borrow_mut();
        assert_eq!(data.len(), values.len(), "set_data length mismatch");
        data.copy_from_slice(values);
    }

    pub(crate) fn set_element(&self, idx: usize, v: f64) {
        self.inner.data.borrow_mut()[idx] = v;
    }

    fn same_shape(&self, other: &Tensor) -> bool {
        self.inner.shape == other.inner.shape
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

// ── Tape ─────────────────────────────────────────────────────────────

pub(crate) struct Node {
    output: Tensor,
    backward: Box<dyn Fn(&[f64])>,
}

/// Recorded forward operations, in creation (topological) order.
pub struct ComputationTape {
    nodes: Vec<Node>,
}

/// Alias used throughout the crate.
pub type Tape = ComputationTape;

thread_local! {
    static ACTIVE: RefCell<Option<ComputationTape>> = const { RefCell::new(None) };
}

pub(crate) fn recording() -> bool {
    ACTIVE.with(|t| t.borrow().is_some())
}

/// True when a node must be recorded for these parents.
pub(crate) fn should_track(parents: &[&Tensor]) -> bool {
    recording() && parents.iter().any(|p| p.requires_grad())
}

pub(crate) fn push_node(output: &Tensor, backward: Box<dyn Fn(&[f64])>) {
    ACTIVE.with(|t| {
        let mut slot = t.borrow_mut();
        let tape = slot
            .as_mut()
            .expect("push_node called without an active tape");
        tape.nodes.push(Node {
            output: output.clone(),
            backward,
        });
    });
}

impl ComputationTape {
    /// Runs `f` with recording enabled and returns its result together
    /// with the tape it produced. The single training thread owns the
    /// tape; nesting is a programming error.
    pub fn record<R>(f: impl FnOnce() -> R) -> (R, ComputationTape) {
        ACTIVE.with(|t| {
            let mut slot = t.borrow_mut();
            assert!(slot.is_none(), "nested Tape::record is not supported");
            *slot = Some(ComputationTape { nodes: Vec::new() });
        });
        let result = f();
        let tape = ACTIVE.with(|t| t.borrow_mut().take().expect("tape vanished"));
        (result, tape)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse-topological gradient accumulation from a scalar root.
    ///
    /// Gradients of independent paths sum; every tensor reachable from
    /// the root with `requires_grad` ends up with a populated grad.
    pub fn backward(self, root: &Tensor) -> Result<()> {
        if root.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                root.shape()
            )));
        }
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape"));
        }
        root.set_grad(vec![1.0]);
        for node in self.nodes.iter().rev() {
            let grad = node.output.inner.grad.borrow();
            if let Some(g) = grad.as_ref() {
                (node.backward)(g);
            }
        }
        Ok(())
    }
}

// ── Elementwise primitives ───────────────────────────────────────────

/// Binary elementwise operation kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

/// Right-hand operand: a same-shape tensor or a broadcast scalar.
#[derive(Clone, Copy)]
pub enum Rhs<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
}

impl<'a> From<&'a Tensor> for Rhs<'a> {
    fn from(t: &'a Tensor) -> Self {
        Rhs::Tensor(t)
    }
}

impl From<f64> for Rhs<'_> {
    fn from(v: f64) -> Self {
        Rhs::Scalar(v)
    }
}

/// Elementwise `a (op) b` with `b` either same-shape or scalar.
pub fn elementwise<'a>(op: ElemOp, a: &Tensor, b: impl Into<Rhs<'a>>) -> Result<Tensor> {
    let b = b.into();
    match b {
        Rhs::Tensor(bt) => {
            if !a.same_shape(bt) {
                return Err(Error::shape(format!(
                    "elementwise {:?}: {:?} vs {:?}",
                    op,
                    a.shape(),
                    bt.shape()
                )));
            }
            if op == ElemOp::Div && bt.data().iter().any(|&v| v == 0.0) {
                return Err(Error::numerical("division by a tensor containing zero"));
            }
            let out_data: Vec<f64> = {
                let ad = a.data();
                let bd = bt.data();
                ad.iter()
                    .zip(bd.iter())
                    .map(|(&x, &y)| apply_elem(op, x, y))
                    .collect()
            };
            check_finite(&out_data, op)?;
            let track = should_track(&[a, bt]);
            let out = Tensor::op_output(a.shape().to_vec(), out_data, track);
            if track {
                let (pa, pb) = (a.clone(), bt.clone());
                push_node(
                    &out,
                    Box::new(move |g| backward_elem_tensor(op, &pa, &pb, g)),
                );
            }
            Ok(out)
        }
        Rhs::Scalar(s) => {
            if op == ElemOp::Div && s == 0.0 {
                return Err(Error::numerical("division by scalar zero"));
            }
            let out_data: Vec<f64> = a.data().iter().map(|&x| apply_elem(op, x, s)).collect();
            check_finite(&out_data, op)?;
            let track = should_track(&[a]);
            let out = Tensor::op_output(a.shape().to_vec(), out_data, track);
            if track {
                let pa = a.clone();
                push_node(&out, Box::new(move |g| backward_elem_scalar(op, &pa, s, g)));
            }
            Ok(out)
        }
    }
}

fn apply_elem(op: ElemOp, x: f64, y: f64) -> f64 {
    match op {
        ElemOp::Add => x + y,
        ElemOp::Sub => x - y,
        ElemOp::Mul => x * y,
        ElemOp::Div => x / y,
        ElemOp::Max => {
            if y > x {
                y
            } else {
                x
            }
        }
        ElemOp::Min => {
            if y < x {
                y
            } else {
                x
            }
        }
    }
}

fn check_finite(data: &[f64], op: ElemOp) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numerical(format!(
            "elementwise {op:?} produced a non-finite value"
        )))
    }
}

fn backward_elem_tensor(op: ElemOp, a: &Tensor, b: &Tensor, g: &[f64]) {
    let ad = a.data();
    let bd = b.data();
    if a.requires_grad() {
        let ga: Vec<f64> = match op {
            ElemOp::Add | ElemOp::Sub => g.to_vec(),
            ElemOp::Mul => g.iter().zip(bd.iter()).map(|(&gi, &y)| gi * y).collect(),
            ElemOp::Div => g.iter().zip(bd.iter()).map(|(&gi, &y)| gi / y).collect(),
            // ties route to the first operand
            ElemOp::Max => g
                .iter()
                .zip(ad.iter().zip(bd.iter()))
                .map(|(&gi, (&x, &y))| if y > x { 0.0 } else { gi })
                .collect(),
            ElemOp::Min => g
                .iter()
                .zip(ad.iter().zip(bd.iter()))
                .map(|(&gi, (&x, &y))| if y < x { 0.0 } else { gi })
                .collect(),
        };
        drop(ad);
        a.accumulate_grad(&ga);
    }
    if b.requires_grad() {
        let ad = a.data();
        let gb: Vec<f64> = match op {
            ElemOp::Add => g.to_vec(),
            ElemOp::Sub => g.iter().map(|&gi| -gi).collect(),
            ElemOp::Mul => g.iter().zip(ad.iter()).map(|(&gi, &x)| gi * x).collect(),
            ElemOp::Div => g
                .iter()
                .zip(ad.iter().zip(bd.iter()))
                .map(|(&gi, (&x, &y))| -gi * x / (y * y))
                .collect(),
            ElemOp::Max => g
                .iter()
                .zip(ad.iter().zip(bd.iter()))
                .map(|(&gi, (&x, &y))| if y > x { gi } else { 0.0 })
                .collect(),
            ElemOp::Min => g
                .iter()
                .zip(ad.iter().zip(bd.iter()))
                .map(|(&gi, (&x, &y))| if y < x { gi } else { 0.0 })
                .collect(),
        };
        drop(ad);
        drop(bd);
        b.accumulate_grad(&gb);
    }
}

fn backward_elem_scalar(op: ElemOp, a: &Tensor, s: f64, g: &[f64]) {
    if !a.requires_grad() {
        return;
    }
    let ad = a.data();
    let ga: Vec<f64> = match op {
        ElemOp::Add | ElemOp::Sub => g.to_vec(),
        ElemOp::Mul => g.iter().map(|&gi| gi * s).collect(),
        ElemOp::Div => g.iter().map(|&gi| gi / s).collect(),
        ElemOp::Max => g
            .iter()
            .zip(ad.iter())
            .map(|(&gi, &x)| if s > x { 0.0 } else { gi })
            .collect(),
        ElemOp::Min => g
            .iter()
            .zip(ad.iter())
            .map(|(&gi, &x)| if s < x { 0.0 } else { gi })
            .collect(),
    };
    drop(ad);
    a.accumulate_grad(&ga);
}

/// `a + b`
pub fn add<'a>(a: &Tensor, b: impl Into<Rhs<'a>>) -> Result<Tensor> {
    elementwise(ElemOp::Add, a, b)
}

/// `a - b`
pub fn sub<'a>(a: &Tensor, b: impl Into<Rhs<'a>>) -> Result<Tensor> {
    elementwise(ElemOp::Sub, a, b)
}

/// `a * b`
pub fn mul<'a>(a: &Tensor, b: impl Into<Rhs<'a>>) -> Result<Tensor> {
    elementwise(ElemOp::Mul, a, b)
}

/// `a / b`; errors if any divisor element is zero.
pub fn div<'a>(a: &Tensor, b: impl Into<Rhs<'a>>) -> Result<Tensor> {
    elementwise(ElemOp::Div, a, b)
}

// ── Reductions ───────────────────────────────────────────────────────

/// Reduction kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

/// Full reduction to a scalar tensor.
pub fn reduce(op: Reduce, a: &Tensor) -> Result<Tensor> {
    let n = a.numel();
    if n == 0 {
        return Err(Error::invalid("reduce of a zero-length tensor"));
    }
    let total: f64 = a.data().iter().sum();
    let value = match op {
        Reduce::Sum => total,
        Reduce::Mean => total / n as f64,
    };
    if !value.is_finite() {
        return Err(Error::numerical("reduction produced a non-finite value"));
    }
    let track = should_track(&[a]);
    let out = Tensor::op_output(vec![1], vec![value], track);
    if track {
        let pa = a.clone();
        push_node(
            &out,
            Box::new(move |g| {
                if pa.requires_grad() {
                    let per = match op {
                        Reduce::Sum => g[0],
                        Reduce::Mean => g[0] / pa.numel() as f64,
                    };
                    pa.accumulate_grad(&vec![per; pa.numel()]);
                }
            }),
        );
    }
    Ok(out)
}

pub fn sum(a: &Tensor) -> Result<Tensor> {
    reduce(Reduce::Sum, a)
}

pub fn mean(a: &Tensor) -> Result<Tensor> {
    reduce(Reduce::Mean, a)
}

// ── Sigmoid and clamp ────────────────────────────────────────────────

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Logistic function, elementwise. Saturates without overflow; the
/// backward rule uses `s * (1 - s)` from the stored outputs.
pub fn sigmoid(a: &Tensor) -> Tensor {
    let out_data: Vec<f64> = a.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    let track = should_track(&[a]);
    let out = Tensor::op_output(a.shape().to_vec(), out_data, track);
    if track {
        let pa = a.clone();
        let saved = out.clone();
        push_node(
            &out,
            Box::new(move |g| {
                if pa.requires_grad() {
                    let s = saved.data();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(s.iter())
                        .map(|(&gi, &si)| gi * si * (1.0 - si))
                        .collect();
                    drop(s);
                    pa.accumulate_grad(&ga);
                }
            }),
        );
    }
    out
}

/// Limits values to `[lo, hi]`. The gradient passes unchanged strictly
/// inside the range and is zero at or outside the bounds.
pub fn clamp01(a: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    if lo >= hi {
        return Err(Error::invalid(format!("clamp bounds lo {lo} >= hi {hi}")));
    }
    let out_data: Vec<f64> = a.data().iter().map(|&v| v.clamp(lo, hi)).collect();
    let track = should_track(&[a]);
    let out = Tensor::op_output(a.shape().to_vec(), out_data, track);
    if track {
        let pa = a.clone();
        push_node(
            &out,
            Box::new(move |g| {
                if pa.requires_grad() {
                    let xd = pa.data();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(xd.iter())
                        .map(|(&gi, &x)| if x > lo && x < hi { gi } else { 0.0 })
                        .collect();
                    drop(xd);
                    pa.accumulate_grad(&ga);
                }
            }),
        );
    }
    Ok(out)
}
