//! Two evaluators for the same model code: [`Eager`] computes values and
//! drops intermediates as soon as they go out of scope, [`Tape`] records
//! every op so gradients can be obtained by reverse accumulation.

use std::sync::Arc;

use super::ops::{self, ApplyPlan};
use super::{ParamId, ParameterSet, Scalar, Tensor, TensorError};

/// Operations the models are written against.
pub trait Graph<T: Scalar> {
    type Value: Clone;

    fn constant(&mut self, value: Tensor<T>) -> Self::Value;
    fn param(&mut self, params: &ParameterSet<T>, id: ParamId) -> Self::Value;
    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor<T>;

    fn conv2d(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value, padding: usize)
        -> Result<Self::Value, TensorError>;
    fn depthwise_conv2d(&mut self, x: &Self::Value, w: &Self::Value, padding: usize)
        -> Result<Self::Value, TensorError>;
    fn grouped_depthwise(&mut self, x: &Self::Value, kernels: &Self::Value) -> Result<Self::Value, TensorError>;
    fn dense(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value) -> Result<Self::Value, TensorError>;
    fn unfold(&mut self, x: &Self::Value, k: usize) -> Result<Self::Value, TensorError>;
    fn pixel_shuffle(&mut self, x: &Self::Value, s: usize) -> Result<Self::Value, TensorError>;
    fn gather_rows(&mut self, x: &Self::Value, indices: Arc<[usize]>) -> Result<Self::Value, TensorError>;
    fn kernel_apply(&mut self, features: &Self::Value, kernels: &Self::Value, plan: Arc<ApplyPlan>)
        -> Result<Self::Value, TensorError>;
    fn reshape(&mut self, x: &Self::Value, shape: &[usize]) -> Result<Self::Value, TensorError>;
    fn relu(&mut self, x: &Self::Value) -> Result<Self::Value, TensorError>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, TensorError>;
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, TensorError>;
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, TensorError>;
    fn scale(&mut self, x: &Self::Value, factor: f64) -> Result<Self::Value, TensorError>;
    fn sum(&mut self, x: &Self::Value) -> Result<Self::Value, TensorError>;
    fn l1_loss(&mut self, pred: &Self::Value, target: &Self::Value) -> Result<Self::Value, TensorError>;
}

/// Immediate evaluation without gradient bookkeeping.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

type Shared<T> = Arc<Tensor<T>>;

fn fin<T: Scalar>(op: &'static str, t: Tensor<T>) -> Result<Shared<T>, TensorError> {
    ops::check_finite(op, t).map(Arc::new)
}

impl<T: Scalar> Graph<T> for Eager {
    type Value = Shared<T>;

    fn constant(&mut self, value: Tensor<T>) -> Shared<T> {
        Arc::new(value)
    }

    fn param(&mut self, params: &ParameterSet<T>, id: ParamId) -> Shared<T> {
        Arc::new(params.value(id).clone())
    }

    fn value<'a>(&'a self, v: &'a Shared<T>) -> &'a Tensor<T> {
        v
    }

    fn conv2d(&mut self, x: &Shared<T>, w: &Shared<T>, b: &Shared<T>, padding: usize) -> Result<Shared<T>, TensorError> {
        fin("conv2d", ops::conv2d(x, w, b, padding)?)
    }

    fn depthwise_conv2d(&mut self, x: &Shared<T>, w: &Shared<T>, padding: usize) -> Result<Shared<T>, TensorError> {
        fin("depthwise_conv2d", ops::depthwise_conv2d(x, w, padding)?)
    }

    fn grouped_depthwise(&mut self, x: &Shared<T>, kernels: &Shared<T>) -> Result<Shared<T>, TensorError> {
        fin("grouped_depthwise", ops::grouped_depthwise(x, kernels)?)
    }

    fn dense(&mut self, x: &Shared<T>, w: &Shared<T>, b: &Shared<T>) -> Result<Shared<T>, TensorError> {
        fin("dense", ops::dense(x, w, b)?)
    }

    fn unfold(&mut self, x: &Shared<T>, k: usize) -> Result<Shared<T>, TensorError> {
        Ok(Arc::new(ops::unfold(x, k)?))
    }

    fn pixel_shuffle(&mut self, x: &Shared<T>, s: usize) -> Result<Shared<T>, TensorError> {
        Ok(Arc::new(ops::pixel_shuffle(x, s)?))
    }

    fn gather_rows(&mut self, x: &Shared<T>, indices: Arc<[usize]>) -> Result<Shared<T>, TensorError> {
        Ok(Arc::new(ops::gather_rows(x, &indices)?))
    }

    fn kernel_apply(&mut self, features: &Shared<T>, kernels: &Shared<T>, plan: Arc<ApplyPlan>) -> Result<Shared<T>, TensorError> {
        fin("kernel_apply", ops::kernel_apply(features, kernels, &plan)?)
    }

    fn reshape(&mut self, x: &Shared<T>, shape: &[usize]) -> Result<Shared<T>, TensorError> {
        Ok(Arc::new(x.as_ref().clone().reshape(shape)?))
    }

    fn relu(&mut self, x: &Shared<T>) -> Result<Shared<T>, TensorError> {
        Ok(Arc::new(ops::relu(x)))
    }

    fn add(&mut self, a: &Shared<T>, b: &Shared<T>) -> Result<Shared<T>, TensorError> {
        fin("add", ops::add(a, b)?)
    }

    fn sub(&mut self, a: &Shared<T>, b: &Shared<T>) -> Result<Shared<T>, TensorError> {
        fin("sub", ops::sub(a, b)?)
    }

    fn mul(&mut self, a: &Shared<T>, b: &Shared<T>) -> Result<Shared<T>, TensorError> {
        fin("mul", ops::mul(a, b)?)
    }

    fn scale(&mut self, x: &Shared<T>, factor: f64) -> Result<Shared<T>, TensorError> {
        fin("scale", ops::scale(x, factor))
    }

    fn sum(&mut self, x: &Shared<T>) -> Result<Shared<T>, TensorError> {
        fin("sum", ops::sum(x))
    }

    fn l1_loss(&mut self, pred: &Shared<T>, target: &Shared<T>) -> Result<Shared<T>, TensorError> {
        fin("l1_loss", ops::l1_loss(pred, target)?)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var, padding: usize },
    Depthwise { x: Var, w: Var },
    Grouped { x: Var, kernels: Var },
    Dense { x: Var, w: Var, b: Var },
    Unfold { x: Var, k: usize },
    PixelShuffle { x: Var, s: usize },
    Gather { x: Var, indices: Arc<[usize]> },
    KernelApply { features: Var, kernels: Var, plan: Arc<ApplyPlan> },
    Reshape { x: Var },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Sum { x: Var },
    L1 { pred: Var, target: Var },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Summary of one reverse pass.
#[derive(Clone, Debug, Default)]
pub struct BackwardReport {
    /// Node indices in the order their gradients were propagated.
    pub visited: Vec<usize>,
}

/// Recording evaluator with reverse-mode differentiation.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_count: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_count: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Param(_) => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, value: Tensor<T>, op: Op, inputs: &[Var]) -> Result<Var, TensorError> {
        let value = ops::check_finite(name, value)?;
        Ok(self.push(value, op, inputs))
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulates `∂loss/∂value` into the `grad` of every parameter that
    /// reached `loss`. Repeated calls accumulate.
    pub fn backward(&self, loss: Var, params: &mut ParameterSet<T>) -> Result<BackwardReport, TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let seed = self.val(loss);
        if seed.len() != 1 {
            return Err(TensorError::NotScalar(seed.shape().to_vec()));
        }
        if self.param_count > params.len() {
            return Err(TensorError::ParameterSetMismatch);
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(seed.shape(), T::one()));
        let mut report = BackwardReport::default();

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            report.visited.push(i);
            let need = |v: &Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let p = params.get_mut(*id);
                    if p.grad.shape() != g.shape() {
                        return Err(TensorError::ParameterSetMismatch);
                    }
                    p.grad.add_assign(&g);
                }
                Op::Conv2d { x, w, b, padding } => {
                    let (dx, dw, db) = ops::conv2d_backward(self.val(*x), self.val(*w), &g, *padding);
                    for (v, d) in [(x, dx), (w, dw), (b, db)] {
                        if need(v) {
                            acc(&mut grads, *v, d);
                        }
                    }
                }
                Op::Depthwise { x, w } => {
                    let (dx, dw) = ops::depthwise_conv2d_backward(self.val(*x), self.val(*w), &g);
                    for (v, d) in [(x, dx), (w, dw)] {
                        if need(v) {
                            acc(&mut grads, *v, d);
                        }
                    }
                }
                Op::Grouped { x, kernels } => {
                    let (dx, dk) = ops::grouped_depthwise_backward(self.val(*x), self.val(*kernels), &g);
                    for (v, d) in [(x, dx), (kernels, dk)] {
                        if need(v) {
                            acc(&mut grads, *v, d);
                        }
                    }
                }
                Op::Dense { x, w, b } => {
                    let (dx, dw, db) = ops::dense_backward(self.val(*x), self.val(*w), &g);
                    for (v, d) in [(x, dx), (w, dw), (b, db)] {
                        if need(v) {
                            acc(&mut grads, *v, d);
                        }
                    }
                }
                Op::Unfold { x, k } => {
                    let d = ops::unfold_backward(self.val(*x).shape(), *k, &g);
                    acc(&mut grads, *x, d);
                }
                Op::PixelShuffle { x, s } => {
                    acc(&mut grads, *x, ops::pixel_unshuffle(&g, *s)?);
                }
                Op::Gather { x, indices } => {
                    let d = ops::gather_rows_backward(self.val(*x).shape(), indices, &g);
                    acc(&mut grads, *x, d);
                }
                Op::KernelApply { features, kernels, plan } => {
                    let (df, dk) = ops::kernel_apply_backward(self.val(*features), self.val(*kernels), plan, &g);
                    for (v, d) in [(features, df), (kernels, dk)] {
                        if need(v) {
                            acc(&mut grads, *v, d);
                        }
                    }
                }
                Op::Reshape { x } => {
                    let d = g.reshape(self.val(*x).shape())?;
                    acc(&mut grads, *x, d);
                }
                Op::Relu { x } => {
                    acc(&mut grads, *x, ops::relu_backward(self.val(*x), &g));
                }
                Op::Add { a, b } => {
                    if need(a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if need(b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub { a, b } => {
                    if need(b) {
                        acc(&mut grads, *b, ops::scale(&g, -1.0));
                    }
                    if need(a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul { a, b } => {
                    if need(a) {
                        acc(&mut grads, *a, ops::mul(&g, self.val(*b))?);
                    }
                    if need(b) {
                        acc(&mut grads, *b, ops::mul(&g, self.val(*a))?);
                    }
                }
                Op::Scale { x, factor } => {
                    acc(&mut grads, *x, ops::scale(&g, *factor));
                }
                Op::Sum { x } => {
                    let gv = g.item()?;
                    acc(&mut grads, *x, Tensor::full(self.val(*x).shape(), gv));
                }
                Op::L1 { pred, target } => {
                    let gv = g.item()?;
                    let dp = ops::l1_loss_backward(self.val(*pred), self.val(*target), gv);
                    if need(target) {
                        acc(&mut grads, *target, ops::scale(&dp, -1.0));
                    }
                    if need(pred) {
                        acc(&mut grads, *pred, dp);
                    }
                }
            }
        }
        Ok(report)
    }
}

impl<T: Scalar> Graph<T> for Tape<T> {
    type Value = Var;

    fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, &[])
    }

    fn param(&mut self, params: &ParameterSet<T>, id: ParamId) -> Var {
        self.param_count = self.param_count.max(id.0 + 1);
        self.push(params.value(id).clone(), Op::Param(id), &[])
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        self.val(*v)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: &Var, padding: usize) -> Result<Var, TensorError> {
        let out = ops::conv2d(self.val(*x), self.val(*w), self.val(*b), padding)?;
        self.record("conv2d", out, Op::Conv2d { x: *x, w: *w, b: *b, padding }, &[*x, *w, *b])
    }

    fn depthwise_conv2d(&mut self, x: &Var, w: &Var, padding: usize) -> Result<Var, TensorError> {
        let out = ops::depthwise_conv2d(self.val(*x), self.val(*w), padding)?;
        self.record("depthwise_conv2d", out, Op::Depthwise { x: *x, w: *w }, &[*x, *w])
    }

    fn grouped_depthwise(&mut self, x: &Var, kernels: &Var) -> Result<Var, TensorError> {
        let out = ops::grouped_depthwise(self.val(*x), self.val(*kernels))?;
        self.record("grouped_depthwise", out, Op::Grouped { x: *x, kernels: *kernels }, &[*x, *kernels])
    }

    fn dense(&mut self, x: &Var, w: &Var, b: &Var) -> Result<Var, TensorError> {
        let out = ops::dense(self.val(*x), self.val(*w), self.val(*b))?;
        self.record("dense", out, Op::Dense { x: *x, w: *w, b: *b }, &[*x, *w, *b])
    }

    fn unfold(&mut self, x: &Var, k: usize) -> Result<Var, TensorError> {
        let out = ops::unfold(self.val(*x), k)?;
        self.record("unfold", out, Op::Unfold { x: *x, k }, &[*x])
    }

    fn pixel_shuffle(&mut self, x: &Var, s: usize) -> Result<Var, TensorError> {
        let out = ops::pixel_shuffle(self.val(*x), s)?;
        self.record("pixel_shuffle", out, Op::PixelShuffle { x: *x, s }, &[*x])
    }

    fn gather_rows(&mut self, x: &Var, indices: Arc<[usize]>) -> Result<Var, TensorError> {
        let out = ops::gather_rows(self.val(*x), &indices)?;
        self.record("gather_rows", out, Op::Gather { x: *x, indices }, &[*x])
    }

    fn kernel_apply(&mut self, features: &Var, kernels: &Var, plan: Arc<ApplyPlan>) -> Result<Var, TensorError> {
        let out = ops::kernel_apply(self.val(*features), self.val(*kernels), &plan)?;
        let op = Op::KernelApply { features: *features, kernels: *kernels, plan };
        self.record("kernel_apply", out, op, &[*features, *kernels])
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.val(*x).clone().reshape(shape)?;
        self.record("reshape", out, Op::Reshape { x: *x }, &[*x])
    }

    fn relu(&mut self, x: &Var) -> Result<Var, TensorError> {
        let out = ops::relu(self.val(*x));
        self.record("relu", out, Op::Relu { x: *x }, &[*x])
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var, TensorError> {
        let out = ops::add(self.val(*a), self.val(*b))?;
        self.record("add", out, Op::Add { a: *a, b: *b }, &[*a, *b])
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var, TensorError> {
        let out = ops::sub(self.val(*a), self.val(*b))?;
        self.record("sub", out, Op::Sub { a: *a, b: *b }, &[*a, *b])
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var, TensorError> {
        let out = ops::mul(self.val(*a), self.val(*b))?;
        self.record("mul", out, Op::Mul { a: *a, b: *b }, &[*a, *b])
    }

    fn scale(&mut self, x: &Var, factor: f64) -> Result<Var, TensorError> {
        let out = ops::scale(self.val(*x), factor);
        self.record("scale", out, Op::Scale { x: *x, factor }, &[*x])
    }

    fn sum(&mut self, x: &Var) -> Result<Var, TensorError> {
        let out = ops::sum(self.val(*x));
        self.record("sum", out, Op::Sum { x: *x }, &[*x])
    }

    fn l1_loss(&mut self, pred: &Var, target: &Var) -> Result<Var, TensorError> {
        let out = ops::l1_loss(self.val(*pred), self.val(*target))?;
        self.record("l1_loss", out, Op::L1 { pred: *pred, target: *target }, &[*pred, *target])
    }
}
