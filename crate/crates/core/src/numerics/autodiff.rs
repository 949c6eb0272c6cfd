//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every differentiable operation creates a [`Var`] that remembers its
//! parents and which primitive produced it. [`backward`] walks the graph in
//! reverse creation order. Vector-Jacobian products are themselves written
//! in terms of `Var` operations, so when `create_graph` is set the gradients
//! it returns are ordinary graph nodes and can be differentiated again. This
//! is how the guidance score `∇_x log q(z|x)` ends up inside a loss that is
//! differentiated with respect to the encoder weights.
//!
//! Graphs are confined to the thread that built them (`Var` is `!Send`).

use std::cell::Cell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{shape_err, Result};
use crate::numerics::kernels::{self, ConvGeom};
use crate::numerics::tensor::Tensor;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Disables graph recording until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(false));
        Self { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Runs `f` with graph recording disabled.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = NoGradGuard::new();
    f()
}

/// The primitive that produced a node, plus whatever the VJP needs.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Shift,
    MatMul,
    Transpose,
    Reshape,
    SumAll,
    SumTo,
    BroadcastTo,
    Relu,
    Silu,
    Softplus,
    Sigmoid,
    Exp,
    Log,
    Square,
    Sqrt,
    Concat { axis: usize, sizes: Vec<usize> },
    Slice { axis: usize, start: usize, full: usize },
    Embed { axis: usize, start: usize, len: usize },
    Conv2d { stride: usize, pad: usize },
    ConvInputGrad { geom: ConvGeom },
    ConvWeightGrad { geom: ConvGeom },
}

struct Node {
    id: u64,
    value: Tensor,
    op: Op,
    parents: Vec<Var>,
    requires_grad: bool,
}

/// A tensor-valued node in the autodiff graph.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?}, {:?})", self.0.id, self.0.op, self.0.value)
    }
}

impl Var {
    fn make(value: Tensor, op: Op, parents: Vec<Var>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op,
            parents,
            requires_grad,
        }))
    }

    /// A leaf whose gradient is tracked.
    pub fn param(value: Tensor) -> Self {
        Self::make(value, Op::Leaf, Vec::new(), true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(value: Tensor) -> Self {
        Self::make(value, Op::Leaf, Vec::new(), false)
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Tensor::scalar(v))
    }

    fn from_op(value: Tensor, op: Op, parents: Vec<Var>) -> Self {
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.0.requires_grad);
        if requires_grad {
            Self::make(value, op, parents, true)
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn op_name(&self) -> &'static str {
        match self.0.op {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Shift => "shift",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::SumAll => "sum",
            Op::SumTo => "sum_to",
            Op::BroadcastTo => "broadcast",
            Op::Relu => "relu",
            Op::Silu => "silu",
            Op::Softplus => "softplus",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Square => "square",
            Op::Sqrt => "sqrt",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Embed { .. } => "embed",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvInputGrad { .. } => "conv_transpose",
            Op::ConvWeightGrad { .. } => "conv_weight_grad",
        }
    }

    // ---- elementwise binary ops (with numpy broadcasting) ----

    fn broadcast_pair(&self, other: &Var, op: &'static str) -> Result<(Var, Var)> {
        if self.shape() == other.shape() {
            return Ok((self.clone(), other.clone()));
        }
        let shape = kernels::broadcast_shape(self.shape(), other.shape())
            .ok_or_else(|| shape_err(op, format!("{:?} vs {:?}", self.shape(), other.shape())))?;
        Ok((self.broadcast_to(&shape)?, other.broadcast_to(&shape)?))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(other, "add")?;
        let v = a.value().add(b.value())?;
        Ok(Var::from_op(v, Op::Add, vec![a, b]))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(other, "sub")?;
        let v = a.value().sub(b.value())?;
        Ok(Var::from_op(v, Op::Sub, vec![a, b]))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(other, "mul")?;
        let v = a.value().mul(b.value())?;
        Ok(Var::from_op(v, Op::Mul, vec![a, b]))
    }

    /// Elementwise division; a zero anywhere in the divisor is an error.
    pub fn div(&self, other: &Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(other, "div")?;
        if let Some(i) = b.value().data().iter().position(|&v| v == 0.0) {
            return Err(crate::SamiError::Domain {
                op: "div",
                detail: format!("division by zero at element {}", i),
            });
        }
        let v = a.value().zip_map(b.value(), "div", |x, y| x / y)?;
        Ok(Var::from_op(v, Op::Div, vec![a, b]))
    }

    // ---- unary ops ----

    pub fn neg(&self) -> Var {
        Var::from_op(self.value().map(|v| -v), Op::Neg, vec![self.clone()])
    }

    pub fn scale(&self, s: f64) -> Var {
        Var::from_op(self.value().scale(s), Op::Scale(s), vec![self.clone()])
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        Var::from_op(self.value().map(|v| v + s), Op::Shift, vec![self.clone()])
    }

    pub fn relu(&self) -> Var {
        Var::from_op(self.value().map(|v| v.max(0.0)), Op::Relu, vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Var {
        Var::from_op(self.value().map(sigmoid), Op::Sigmoid, vec![self.clone()])
    }

    pub fn silu(&self) -> Var {
        Var::from_op(self.value().map(|v| v * sigmoid(v)), Op::Silu, vec![self.clone()])
    }

    pub fn softplus(&self) -> Var {
        Var::from_op(self.value().map(softplus), Op::Softplus, vec![self.clone()])
    }

    pub fn exp(&self) -> Var {
        Var::from_op(self.value().map(f64::exp), Op::Exp, vec![self.clone()])
    }

    /// Natural log; non-positive inputs are an error.
    pub fn log(&self) -> Result<Var> {
        if let Some(i) = self.value().data().iter().position(|&v| v <= 0.0) {
            return Err(crate::SamiError::Domain {
                op: "log",
                detail: format!("non-positive input {} at element {}", self.value().data()[i], i),
            });
        }
        Ok(Var::from_op(self.value().map(f64::ln), Op::Log, vec![self.clone()]))
    }

    pub fn square(&self) -> Var {
        Var::from_op(self.value().map(|v| v * v), Op::Square, vec![self.clone()])
    }

    /// Square root; negative inputs are an error.
    pub fn sqrt(&self) -> Result<Var> {
        if let Some(i) = self.value().data().iter().position(|&v| v < 0.0) {
            return Err(crate::SamiError::Domain {
                op: "sqrt",
                detail: format!("negative input at element {}", i),
            });
        }
        Ok(Var::from_op(self.value().map(f64::sqrt), Op::Sqrt, vec![self.clone()]))
    }

    // ---- shape ops ----

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value().reshape(shape)?;
        Ok(Var::from_op(v, Op::Reshape, vec![self.clone()]))
    }

    pub fn transpose(&self) -> Result<Var> {
        let v = kernels::transpose2d(self.value())?;
        Ok(Var::from_op(v, Op::Transpose, vec![self.clone()]))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let v = kernels::broadcast_to(self.value(), shape)?;
        Ok(Var::from_op(v, Op::BroadcastTo, vec![self.clone()]))
    }

    pub fn sum_to(&self, shape: &[usize]) -> Result<Var> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let v = kernels::sum_to(self.value(), shape)?;
        Ok(Var::from_op(v, Op::SumTo, vec![self.clone()]))
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum(&self) -> Var {
        Var::from_op(Tensor::scalar(self.value().sum()), Op::SumAll, vec![self.clone()])
    }

    pub fn mean(&self) -> Var {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let v = kernels::matmul(self.value(), other.value())?;
        Ok(Var::from_op(v, Op::MatMul, vec![self.clone(), other.clone()]))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = kernels::slice(self.value(), axis, start, len)?;
        let full = self.shape()[axis];
        Ok(Var::from_op(v, Op::Slice { axis, start, full }, vec![self.clone()]))
    }

    fn embed(&self, axis: usize, start: usize, full: usize) -> Result<Var> {
        let v = kernels::embed(self.value(), axis, start, full)?;
        let len = self.shape()[axis];
        Ok(Var::from_op(v, Op::Embed { axis, start, len }, vec![self.clone()]))
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    // log(1 + e^v) without overflow
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

pub fn concat(parts: &[&Var], axis: usize) -> Result<Var> {
    let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
    let v = kernels::concat(&values, axis)?;
    let sizes = parts.iter().map(|p| p.shape()[axis]).collect();
    Ok(Var::from_op(
        v,
        Op::Concat { axis, sizes },
        parts.iter().map(|p| (*p).clone()).collect(),
    ))
}

/// 2-D convolution of `x: [N, C, H, W]` with `w: [O, C, k, k]`, no bias.
pub fn conv2d(x: &Var, w: &Var, stride: usize, pad: usize) -> Result<Var> {
    let v = kernels::conv2d(x.value(), w.value(), stride, pad)?;
    Ok(Var::from_op(v, Op::Conv2d { stride, pad }, vec![x.clone(), w.clone()]))
}

/// Transposed convolution: the adjoint of `conv2d` in its input. `geom`
/// describes the forward convolution whose output shape `y` has.
pub fn conv_transpose(y: &Var, w: &Var, geom: ConvGeom) -> Result<Var> {
    let v = kernels::conv2d_input_grad(y.value(), w.value(), &geom)?;
    Ok(Var::from_op(v, Op::ConvInputGrad { geom }, vec![y.clone(), w.clone()]))
}

fn conv_weight_grad(x: &Var, gy: &Var, geom: ConvGeom) -> Result<Var> {
    let v = kernels::conv2d_weight_grad(x.value(), gy.value(), &geom)?;
    Ok(Var::from_op(v, Op::ConvWeightGrad { geom }, vec![x.clone(), gy.clone()]))
}

/// Vector-Jacobian products for one node, one entry per parent.
fn vjp(node: &Node, g: &Var) -> Result<Vec<Option<Var>>> {
    let p = &node.parents;
    let out = match &node.op {
        Op::Leaf => vec![],
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(g.neg())],
        Op::Mul => vec![Some(g.mul(&p[1])?), Some(g.mul(&p[0])?)],
        Op::Div => {
            let ga = g.div(&p[1])?;
            // d(a/b)/db = -a / b^2
            let gb = ga.mul(&p[0])?.div(&p[1])?.neg();
            vec![Some(ga), Some(gb)]
        }
        Op::Neg => vec![Some(g.neg())],
        Op::Scale(s) => vec![Some(g.scale(*s))],
        Op::Shift => vec![Some(g.clone())],
        Op::MatMul => {
            let ga = g.matmul(&p[1].transpose()?)?;
            let gb = p[0].transpose()?.matmul(g)?;
            vec![Some(ga), Some(gb)]
        }
        Op::Transpose => vec![Some(g.transpose()?)],
        Op::Reshape => vec![Some(g.reshape(p[0].shape())?)],
        Op::SumAll => vec![Some(g.broadcast_to(p[0].shape())?)],
        Op::SumTo => vec![Some(g.broadcast_to(p[0].shape())?)],
        Op::BroadcastTo => vec![Some(g.sum_to(p[0].shape())?)],
        Op::Relu => {
            // subgradient at 0 is 0
            let mask = p[0].value().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            vec![Some(g.mul(&Var::constant(mask))?)]
        }
        Op::Sigmoid => {
            let s = p[0].sigmoid();
            let ds = s.mul(&s.neg().add_scalar(1.0))?;
            vec![Some(g.mul(&ds)?)]
        }
        Op::Silu => {
            // silu'(x) = s(x) (1 + x (1 - s(x)))
            let s = p[0].sigmoid();
            let d = s.mul(&p[0].mul(&s.neg().add_scalar(1.0))?.add_scalar(1.0))?;
            vec![Some(g.mul(&d)?)]
        }
        Op::Softplus => vec![Some(g.mul(&p[0].sigmoid())?)],
        Op::Exp => vec![Some(g.mul(&p[0].exp())?)],
        Op::Log => vec![Some(g.div(&p[0])?)],
        Op::Square => vec![Some(g.mul(&p[0])?.scale(2.0))],
        Op::Sqrt => {
            let root = p[0].sqrt()?;
            vec![Some(g.div(&root)?.scale(0.5))]
        }
        Op::Concat { axis, sizes } => {
            let mut start = 0;
            let mut grads = Vec::with_capacity(sizes.len());
            for &len in sizes {
                grads.push(Some(g.slice(*axis, start, len)?));
                start += len;
            }
            grads
        }
        Op::Slice { axis, start, full } => vec![Some(g.embed(*axis, *start, *full)?)],
        Op::Embed { axis, start, len } => vec![Some(g.slice(*axis, *start, *len)?)],
        Op::Conv2d { stride, pad } => {
            let geom = ConvGeom::new(p[0].shape(), p[1].shape(), *stride, *pad)?;
            vec![
                Some(conv_transpose(g, &p[1], geom)?),
                Some(conv_weight_grad(&p[0], g, geom)?),
            ]
        }
        Op::ConvInputGrad { geom } => {
            // u = convT(y, w): <u, h> = <conv(h, w), y> = <w, wgrad(h, y)>
            vec![
                Some(conv2d(g, &p[1], geom.stride, geom.pad)?),
                Some(conv_weight_grad(g, &p[0], *geom)?),
            ]
        }
        Op::ConvWeightGrad { geom } => {
            // v = wgrad(x, gy): <v, h> = <conv(x, h), gy> = <x, convT(gy, h)>
            vec![
                Some(conv_transpose(&p[1], g, *geom)?),
                Some(conv2d(&p[0], g, geom.stride, geom.pad)?),
            ]
        }
    };
    Ok(out)
}

/// Gradients of the scalar `root` with respect to each of `wrt`.
///
/// Nodes in `wrt` that `root` does not depend on get a zero tensor of their
/// own shape. With `create_graph` the returned gradients are recorded on the
/// graph and may be differentiated again; otherwise they are constants.
pub fn backward(root: &Var, wrt: &[&Var], create_graph: bool) -> Result<Vec<Var>> {
    if root.value().len() != 1 || root.value().rank() != 0 {
        return Err(shape_err(
            "backward",
            format!("root must be a scalar of shape [], got {:?}", root.shape()),
        ));
    }
    let _guard = if create_graph {
        None
    } else {
        Some(NoGradGuard::new())
    };

    // every node reachable through requires-grad edges
    let mut nodes: HashMap<u64, Var> = HashMap::new();
    let mut stack = vec![root.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || nodes.contains_key(&v.id()) {
            continue;
        }
        for p in &v.0.parents {
            stack.push(p.clone());
        }
        nodes.insert(v.id(), v);
    }
    let mut order: Vec<u64> = nodes.keys().copied().collect();
    // parents are always created before children
    order.sort_unstable_by(|a, b| b.cmp(a));

    let keep: std::collections::HashSet<u64> = wrt.iter().map(|v| v.id()).collect();
    let mut grads: HashMap<u64, Var> = HashMap::new();
    grads.insert(root.id(), Var::constant(Tensor::scalar(1.0)));
    let mut kept: HashMap<u64, Var> = HashMap::new();

    for id in order {
        let Some(g) = grads.remove(&id) else { continue };
        let node = &nodes[&id].0;
        if keep.contains(&id) {
            kept.insert(id, g.clone());
        }
        if node.parents.is_empty() {
            continue;
        }
        let pgrads = vjp(node, &g)?;
        for (parent, pg) in node.parents.iter().zip(pgrads) {
            let Some(pg) = pg else { continue };
            if !parent.requires_grad() {
                continue;
            }
            let acc = match grads.remove(&parent.id()) {
                Some(prev) => prev.add(&pg)?,
                None => pg,
            };
            grads.insert(parent.id(), acc);
        }
    }

    Ok(wrt
        .iter()
        .map(|v| {
            kept.remove(&v.id())
                .unwrap_or_else(|| Var::constant(Tensor::zeros(v.shape())))
        })
        .collect())
}

/// Gradient values only, for callers that do not need a graph.
pub fn grad_values(root: &Var, wrt: &[&Var]) -> Result<Vec<Tensor>> {
    Ok(backward(root, wrt, false)?
        .into_iter()
        .map(|v| v.value().clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var(v: &[f64]) -> Var {
        Var::param(Tensor::vector(v))
    }

    #[test]
    fn relu_definition() {
        let x = Var::constant(Tensor::vector(&[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let x = vec_var(&[1.0, 2.0]);
        let y = x.square().sum();
        let g = grad_values(&y, &[&x]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let x = vec_var(&[3.0, -1.0, 0.5]);
        let g = grad_values(&x.sum(), &[&x]).unwrap();
        assert_eq!(g[0].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn second_derivative_of_cube() {
        let x = Var::param(Tensor::scalar(2.0));
        let y = x.square().mul(&x).unwrap();
        let dy = backward(&y, &[&x], true).unwrap().remove(0);
        assert_eq!(dy.value().item().unwrap(), 12.0);
        let d2 = grad_values(&dy, &[&x]).unwrap();
        assert_eq!(d2[0].item().unwrap(), 12.0);
    }

    #[test]
    fn unreachable_wrt_gets_zero() {
        let x = vec_var(&[1.0, 2.0]);
        let other = vec_var(&[5.0, 6.0, 7.0]);
        let g = grad_values(&x.sum(), &[&other]).unwrap();
        assert_eq!(g[0], Tensor::zeros(&[3]));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let x = vec_var(&[1.0, 2.0]);
        assert!(backward(&x, &[&x], false).is_err());
    }

    #[test]
    fn domain_errors() {
        let x = vec_var(&[1.0, 0.0]);
        assert!(x.log().is_err());
        assert!(x.div(&x).is_err());
        assert!(x.add(&vec_var(&[1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn no_grad_produces_constants() {
        let x = vec_var(&[1.0]);
        let y = no_grad(|| x.square());
        assert!(!y.requires_grad());
        assert!(x.square().requires_grad());
    }

    #[test]
    fn broadcasting_gradient_sums_back() {
        let b = Var::param(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let x = Var::constant(Tensor::new(&[3, 2], vec![1.0; 6]).unwrap());
        let y = x.mul(&b).unwrap().sum();
        let g = grad_values(&y, &[&b]).unwrap();
        assert_eq!(g[0].data(), &[3.0, 3.0]);
    }
}
