//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Var`] is a reference-counted graph node. Operations whose inputs all
//! lack gradient tracking record no history, so inference passes keep no
//! intermediates alive. [`backward`] walks the graph from a scalar loss,
//! accumulates into parameter gradients held by a [`ParamStore`], and then
//! releases the graph.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct GradFn<T: Scalar> {
    parents: Vec<Var<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    param: Option<ParamId>,
    grad_fn: RefCell<Option<GradFn<T>>>,
    consumed: Cell<bool>,
    grad: RefCell<Option<Tensor<T>>>,
}

#[derive(Clone)]
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(requires_grad={}, {:?})", self.0.requires_grad, self.0.value)
    }
}

impl<T: Scalar> Var<T> {
    fn make(value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Self {
        Var(Rc::new(Node {
            value,
            requires_grad,
            param,
            grad_fn: RefCell::new(None),
            consumed: Cell::new(false),
            grad: RefCell::new(None),
        }))
    }

    /// Value without gradient tracking.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::make(value, false, None)
    }

    /// Free leaf whose gradient is kept on the node after [`backward`].
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::make(value, true, None)
    }

    pub(crate) fn param_leaf(value: Tensor<T>, id: ParamId, trainable: bool) -> Self {
        Self::make(value, trainable, Some(id))
    }

    /// Record an operation result. `backward` maps the output gradient to one
    /// optional gradient per parent, in order.
    pub(crate) fn from_op(
        op: &str,
        value: Tensor<T>,
        parents: &[&Var<T>],
        backward: impl Fn(&Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.to_string()));
        }
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let var = Self::make(value, requires_grad, None);
        if requires_grad {
            *var.0.grad_fn.borrow_mut() = Some(GradFn {
                parents: parents.iter().map(|&p| p.clone()).collect(),
                backward: Box::new(backward),
            });
        }
        Ok(var)
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Gradient accumulated on a free leaf by [`backward`].
    pub fn grad(&self) -> Ref<'_, Option<Tensor<T>>> {
        self.0.grad.borrow()
    }

    /// Same values, no history.
    pub fn detach(&self) -> Var<T> {
        Var::constant(self.0.value.clone())
    }

    fn key(&self) -> *const Node<T> {
        Rc::as_ptr(&self.0)
    }
}

/// Accumulate `d loss / d param` into every reachable trainable parameter.
///
/// Frozen parameters and detached values receive nothing. The graph is
/// released afterwards; a second call through the same graph fails with
/// [`Error::GraphConsumed`].
pub fn backward<T: Scalar>(loss: &Var<T>, store: &mut ParamStore<T>) -> Result<()> {
    if loss.value().numel() != 1 {
        return Err(Error::NotScalar(loss.shape().to_vec()));
    }
    if loss.0.consumed.get() {
        return Err(Error::GraphConsumed);
    }
    if !loss.requires_grad() {
        return Ok(());
    }

    let order = topo_order(loss)?;
    let mut grads: HashMap<*const Node<T>, Tensor<T>> = HashMap::new();
    grads.insert(loss.key(), Tensor::ones(loss.shape()));

    for var in order.iter().rev() {
        let Some(g) = grads.remove(&var.key()) else { continue };
        let grad_fn = var.0.grad_fn.borrow();
        match grad_fn.as_ref() {
            Some(gf) => {
                let parent_grads = (gf.backward)(&g)?;
                debug_assert_eq!(parent_grads.len(), gf.parents.len());
                for (parent, pg) in gf.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    if pg.shape() != parent.shape() {
                        return shape_err("backward", parent.shape(), pg.shape());
                    }
                    match grads.get_mut(&parent.key()) {
                        Some(acc) => acc.add_assign(&pg)?,
                        None => {
                            grads.insert(parent.key(), pg);
                        }
                    }
                }
            }
            None => {
                if let Some(id) = var.0.param {
                    store.accumulate_grad(id, &g)?;
                } else {
                    let mut slot = var.0.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.add_assign(&g)?,
                        None => *slot = Some(g),
                    }
                }
            }
        }
    }

    for var in &order {
        if var.0.grad_fn.borrow_mut().take().is_some() {
            var.0.consumed.set(true);
        }
    }
    Ok(())
}

fn topo_order<T: Scalar>(root: &Var<T>) -> Result<Vec<Var<T>>> {
    let mut order = Vec::new();
    let mut visited: HashMap<*const Node<T>, ()> = HashMap::new();
    let mut stack: Vec<(Var<T>, bool)> = vec![(root.clone(), false)];
    while let Some((var, expanded)) = stack.pop() {
        if expanded {
            order.push(var);
            continue;
        }
        if visited.insert(var.key(), ()).is_some() {
            continue;
        }
        if var.0.consumed.get() {
            return Err(Error::GraphConsumed);
        }
        stack.push((var.clone(), true));
        if let Some(gf) = var.0.grad_fn.borrow().as_ref() {
            for p in gf.parents.iter().rev() {
                if p.requires_grad() && !visited.contains_key(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    Ok(order)
}

// ---------------------------------------------------------------------------
// Broadcasting helpers

/// Strides of `b` laid over `a_shape` (0 on broadcast axes), or `None` if `b`
/// cannot broadcast into `a_shape`.
fn broadcast_strides(a_shape: &[usize], b_shape: &[usize]) -> Option<Vec<usize>> {
    if b_shape.len() > a_shape.len() {
        return None;
    }
    let offset = a_shape.len() - b_shape.len();
    let mut b_strides = vec![0; b_shape.len()];
    let mut acc = 1;
    for i in (0..b_shape.len()).rev() {
        b_strides[i] = acc;
        acc *= b_shape[i];
    }
    let mut out = vec![0; a_shape.len()];
    for (i, &bd) in b_shape.iter().enumerate() {
        let ad = a_shape[offset + i];
        if bd == ad {
            out[offset + i] = b_strides[i];
        } else if bd == 1 {
            out[offset + i] = 0;
        } else {
            return None;
        }
    }
    Some(out)
}

/// For each flat index of `a_shape`, the matching flat index into `b`.
fn broadcast_index_map(a_shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n: usize = a_shape.iter().product();
    let mut idx = vec![0usize; a_shape.len()];
    let mut out = Vec::with_capacity(n);
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for d in (0..a_shape.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < a_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

fn sum_to_index_map<T: Scalar>(g: &[T], map: &[usize], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for (&gi, &bi) in g.iter().zip(map) {
        out[bi] = out[bi] + gi;
    }
    out
}

impl<T: Scalar> Var<T> {
    /// Elementwise `a op b`; `b` may match `a`'s shape or broadcast into it
    /// (trailing-dimension rule, size-1 axes expand).
    pub fn binary(&self, op: BinaryOp, other: &Var<T>) -> Result<Var<T>> {
        let a = self.value().clone();
        let b = other.value().clone();
        if a.shape() == b.shape() {
            let value = a.zip_map(&b, op.name(), |x, y| op.apply(x, y))?;
            return Var::from_op(op.name(), value, &[self, other], move |g| {
                let (ga, gb) = match op {
                    BinaryOp::Add => (g.clone(), g.clone()),
                    BinaryOp::Sub => (g.clone(), g.map(|v| -v)),
                    BinaryOp::Mul => (g.zip_map(&b, "mul", |g, y| g * y)?, g.zip_map(&a, "mul", |g, x| g * x)?),
                    BinaryOp::Div => {
                        let ga = g.zip_map(&b, "div", |g, y| g / y)?;
                        let mut gb = g.clone();
                        for ((gv, &x), &y) in gb.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                            *gv = -*gv * x / (y * y);
                        }
                        (ga, gb)
                    }
                };
                Ok(vec![Some(ga), Some(gb)])
            });
        }
        let strides = broadcast_strides(a.shape(), b.shape())
            .ok_or_else(|| Error::ShapeMismatch { op: op.name(), lhs: a.shape().to_vec(), rhs: b.shape().to_vec() })?;
        let map = Rc::new(broadcast_index_map(a.shape(), &strides));
        let bd = b.data();
        let data: Vec<T> = a.data().iter().zip(map.iter()).map(|(&x, &bi)| op.apply(x, bd[bi])).collect();
        let value = Tensor::from_parts(a.shape().to_vec(), data);
        Var::from_op(op.name(), value, &[self, other], move |g| {
            let bd = b.data();
            let ad = a.data();
            let gd = g.data();
            let (ga, gb_full): (Vec<T>, Vec<T>) = match op {
                BinaryOp::Add => (gd.to_vec(), gd.to_vec()),
                BinaryOp::Sub => (gd.to_vec(), gd.iter().map(|&v| -v).collect()),
                BinaryOp::Mul => (
                    gd.iter().zip(map.iter()).map(|(&g, &bi)| g * bd[bi]).collect(),
                    gd.iter().zip(ad).map(|(&g, &x)| g * x).collect(),
                ),
                BinaryOp::Div => (
                    gd.iter().zip(map.iter()).map(|(&g, &bi)| g / bd[bi]).collect(),
                    gd.iter()
                        .zip(ad)
                        .zip(map.iter())
                        .map(|((&g, &x), &bi)| -g * x / (bd[bi] * bd[bi]))
                        .collect(),
                ),
            };
            let gb = sum_to_index_map(&gb_full, &map, b.numel());
            Ok(vec![
                Some(Tensor::from_parts(a.shape().to_vec(), ga)),
                Some(Tensor::from_parts(b.shape().to_vec(), gb)),
            ])
        })
    }

    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn div(&self, other: &Var<T>) -> Result<Var<T>> {
        self.binary(BinaryOp::Div, other)
    }

    pub fn add_scalar(&self, s: T) -> Result<Var<T>> {
        let value = self.value().map(|v| v + s);
        Var::from_op("add_scalar", value, &[self], |g| Ok(vec![Some(g.clone())]))
    }

    pub fn mul_scalar(&self, s: T) -> Result<Var<T>> {
        let value = self.value().map(|v| v * s);
        Var::from_op("mul_scalar", value, &[self], move |g| Ok(vec![Some(g.map(|v| v * s))]))
    }

    pub fn neg(&self) -> Result<Var<T>> {
        self.mul_scalar(-T::one())
    }

    pub fn square(&self) -> Result<Var<T>> {
        let x = self.value().clone();
        let value = x.map(|v| v * v);
        Var::from_op("square", value, &[self], move |g| {
            let two = T::of(2.0);
            Ok(vec![Some(g.zip_map(&x, "square", |g, v| g * two * v)?)])
        })
    }

    /// Subgradient 0 at the origin.
    pub fn abs(&self) -> Result<Var<T>> {
        let x = self.value().clone();
        let value = x.map(|v| v.abs());
        Var::from_op("abs", value, &[self], move |g| {
            Ok(vec![Some(g.zip_map(&x, "abs", |g, v| {
                if v > T::zero() {
                    g
                } else if v < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            })?)])
        })
    }

    /// Clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&self, lo: T, hi: T) -> Result<Var<T>> {
        let x = self.value().clone();
        let value = x.map(|v| v.max(lo).min(hi));
        Var::from_op("clamp", value, &[self], move |g| {
            Ok(vec![Some(g.zip_map(&x, "clamp", |g, v| if v > lo && v < hi { g } else { T::zero() })?)])
        })
    }

    pub fn sum(&self) -> Result<Var<T>> {
        let shape = self.shape().to_vec();
        let value = Tensor::scalar(self.value().sum());
        Var::from_op("sum", value, &[self], move |g| Ok(vec![Some(Tensor::full(&shape, g.data()[0]))]))
    }

    pub fn mean(&self) -> Result<Var<T>> {
        let n = T::of(self.value().numel() as f64);
        self.sum()?.mul_scalar(T::one() / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<T>> {
        let orig = self.shape().to_vec();
        let value = self.value().reshape(shape)?;
        Var::from_op("reshape", value, &[self], move |g| Ok(vec![Some(g.reshape(&orig)?)]))
    }

    /// Concatenate along axis 1 (channels for NCHW, features for `[B, F]`).
    pub fn concat1(parts: &[&Var<T>]) -> Result<Var<T>> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let s0 = first.shape();
        if s0.len() < 2 {
            return Err(Error::InvalidArgument("concat1 needs rank >= 2".into()));
        }
        let batch = s0[0];
        let inner: usize = s0[2..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != s0.len() || s[0] != batch || s[2..] != s0[2..] {
                return shape_err("concat1", s0, s);
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(batch * total * inner);
        for b in 0..batch {
            for (p, &w) in parts.iter().zip(&widths) {
                let d = p.value().data();
                data.extend_from_slice(&d[b * w * inner..(b + 1) * w * inner]);
            }
        }
        let mut shape = s0.to_vec();
        shape[1] = total;
        let value = Tensor::from_parts(shape, data);
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        Var::from_op("concat1", value, parts, move |g| {
            let gd = g.data();
            let mut outs: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(batch * w * inner)).collect();
            let mut off = 0;
            for _ in 0..batch {
                for (o, &w) in outs.iter_mut().zip(&widths) {
                    o.extend_from_slice(&gd[off..off + w * inner]);
                    off += w * inner;
                }
            }
            Ok(outs
                .into_iter()
                .zip(&shapes)
                .map(|(d, s)| Some(Tensor::from_parts(s.clone(), d)))
                .collect())
        })
    }
}

/// Free-function form of [`Var::detach`].
pub fn detach<T: Scalar>(x: &Var<T>) -> Var<T> {
    x.detach()
}
