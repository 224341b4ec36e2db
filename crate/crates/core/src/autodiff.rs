//! Differentiation engine.
//!
//! Two layers compose:
//!
//! * [`Tape`] / [`Var`]: a reverse-mode Wengert list over scalars. Each node
//!   stores its value and the local partials with respect to its operands, so
//!   a single backward sweep yields gradients of a scalar loss with respect
//!   to every leaf (the network parameters).
//! * [`Jet2`]: a forward-mode second-order jet (value, gradient, packed
//!   Hessian) generic over any [`Real`] scalar. With `Jet2<f64>` it computes
//!   input derivatives of a scalar field; with `Jet2<Var>` every jet component
//!   is itself a tape node, so input gradients and Hessians stay
//!   differentiable with respect to the parameters.
//!
//! Tapes are single-threaded; independent points use independent tapes and
//! share parameter values read-only.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

use crate::numerics::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Sin,
    Cos,
    Tanh,
    Exp,
    Sqrt,
    Square,
    Relu,
    Dot,
    Custom(&'static str),
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::Custom(name) => write!(f, "custom({name})"),
            other => write!(f, "{other:?}"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("non-finite value at node {node} ({kind})")]
    NonFinite { kind: OpKind, node: usize },
}

#[derive(Debug, Clone, Copy)]
struct Node {
    kind: OpKind,
    value: f64,
    start: u32,
    len: u32,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    edges: Vec<(u32, f64)>,
}

/// Append-only computation graph.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({})", self.idx, self.value)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Self {
            inner: RefCell::new(TapeInner {
                nodes: Vec::with_capacity(nodes),
                edges: Vec::with_capacity(2 * nodes),
            }),
        }
    }

    /// Drops every node; requires that no `Var` is alive.
    pub fn clear(&mut self) {
        let inner = self.inner.get_mut();
        inner.nodes.clear();
        inner.edges.clear();
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, kind: OpKind, value: f64, parents: &[(u32, f64)]) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let start = inner.edges.len() as u32;
        inner.edges.extend_from_slice(parents);
        let idx = inner.nodes.len() as u32;
        inner.nodes.push(Node {
            kind,
            value,
            start,
            len: parents.len() as u32,
        });
        Var {
            tape: self,
            idx,
            value,
        }
    }

    pub fn leaf(&self, value: f64) -> Var<'_> {
        self.push(OpKind::Leaf, value, &[])
    }

    pub fn leaves(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.leaf(v)).collect()
    }

    pub fn constant(&self, value: f64) -> Var<'_> {
        self.push(OpKind::Constant, value, &[])
    }

    /// Node with caller-supplied value and local partials `∂value/∂inputs[i]`.
    pub fn custom<'t>(
        &'t self,
        name: &'static str,
        inputs: &[Var<'t>],
        value: f64,
        partials: &[f64],
    ) -> Var<'t> {
        assert_eq!(inputs.len(), partials.len(), "one partial per input");
        let parents: Vec<(u32, f64)> = inputs
            .iter()
            .zip(partials)
            .filter(|(_, p)| **p != 0.0)
            .map(|(v, p)| (v.idx, *p))
            .collect();
        self.push(OpKind::Custom(name), value, &parents)
    }

    /// Adjoint of every node with respect to `output`.
    pub fn gradient(&self, output: Var<'_>) -> Result<Adjoints, AutodiffError> {
        let inner = self.inner.borrow();
        let last = output.idx as usize;
        for (i, node) in inner.nodes[..=last].iter().enumerate() {
            let edges = &inner.edges[node.start as usize..(node.start + node.len) as usize];
            if !node.value.is_finite() || edges.iter().any(|(_, p)| !p.is_finite()) {
                return Err(AutodiffError::NonFinite {
                    kind: node.kind,
                    node: i,
                });
            }
        }
        let mut adj = vec![0.0; last + 1];
        adj[last] = 1.0;
        for i in (0..=last).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = inner.nodes[i];
            for &(parent, partial) in
                &inner.edges[node.start as usize..(node.start + node.len) as usize]
            {
                adj[parent as usize] += a * partial;
            }
        }
        Ok(Adjoints { values: adj })
    }
}

/// Result of a backward sweep.
#[derive(Debug, Clone)]
pub struct Adjoints {
    values: Vec<f64>,
}

impl Adjoints {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.values.get(v.idx as usize).copied().unwrap_or(0.0)
    }

    pub fn wrt_all(&self, vars: &[Var<'_>]) -> Vec<f64> {
        vars.iter().map(|v| self.wrt(*v)).collect()
    }
}

/// Gradient of a scalar `loss` with respect to `params`.
pub fn grad_params(loss: Var<'_>, params: &[Var<'_>]) -> Result<Vec<f64>, AutodiffError> {
    Ok(loss.tape.gradient(loss)?.wrt_all(params))
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn unary(self, kind: OpKind, value: f64, partial: f64) -> Self {
        self.tape.push(kind, value, &[(self.idx, partial)])
    }

    pub fn sin(self) -> Self {
        self.unary(OpKind::Sin, self.value.sin(), self.value.cos())
    }

    pub fn cos(self) -> Self {
        self.unary(OpKind::Cos, self.value.cos(), -self.value.sin())
    }

    pub fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.unary(OpKind::Tanh, t, 1.0 - t * t)
    }

    pub fn exp(self) -> Self {
        let e = self.value.exp();
        self.unary(OpKind::Exp, e, e)
    }

    pub fn sqrt(self) -> Self {
        let s = self.value.sqrt();
        self.unary(OpKind::Sqrt, s, 0.5 / s)
    }

    pub fn square(self) -> Self {
        self.unary(OpKind::Square, self.value * self.value, 2.0 * self.value)
    }

    /// `max(0, x)` with subgradient 0 at the kink.
    pub fn relu(self) -> Self {
        if self.value > 0.0 {
            self.unary(OpKind::Relu, self.value, 1.0)
        } else {
            self.unary(OpKind::Relu, 0.0, 0.0)
        }
    }

    pub fn dot(a: &[Var<'t>], b: &[Var<'t>]) -> Var<'t> {
        assert_eq!(a.len(), b.len());
        let tape = a.first().expect("non-empty dot").tape;
        let value = a.iter().zip(b).map(|(x, y)| x.value * y.value).sum();
        let mut parents = Vec::with_capacity(2 * a.len());
        for (x, y) in a.iter().zip(b) {
            parents.push((x.idx, y.value));
            parents.push((y.idx, x.value));
        }
        tape.push(OpKind::Dot, value, &parents)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self {
        self.tape.push(
            OpKind::Add,
            self.value + rhs.value,
            &[(self.idx, 1.0), (rhs.idx, 1.0)],
        )
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self {
        self.tape.push(
            OpKind::Sub,
            self.value - rhs.value,
            &[(self.idx, 1.0), (rhs.idx, -1.0)],
        )
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self {
        self.tape.push(
            OpKind::Mul,
            self.value * rhs.value,
            &[(self.idx, rhs.value), (rhs.idx, self.value)],
        )
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Self) -> Self {
        let q = self.value / rhs.value;
        self.tape.push(
            OpKind::Div,
            q,
            &[(self.idx, 1.0 / rhs.value), (rhs.idx, -q / rhs.value)],
        )
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.unary(OpKind::Neg, -self.value, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Self {
        self.unary(OpKind::Add, self.value + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Self {
        self.unary(OpKind::Sub, self.value - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Self {
        self.unary(OpKind::Mul, self.value * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Self {
        self.unary(OpKind::Div, self.value / rhs, 1.0 / rhs)
    }
}

/// Scalar field element usable by generic model code.
pub trait Real:
    Clone
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// Primal value.
    fn value(&self) -> f64;
    /// Constant living in the same context as `self`.
    fn lift(&self, c: f64) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn tanh(&self) -> Self;
    fn exp(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn square(&self) -> Self;
    fn relu(&self) -> Self;
}

impl Real for f64 {
    fn value(&self) -> f64 {
        *self
    }
    fn lift(&self, c: f64) -> Self {
        c
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn tanh(&self) -> Self {
        f64::tanh(*self)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn square(&self) -> Self {
        self * self
    }
    fn relu(&self) -> Self {
        self.max(0.0)
    }
}

impl<'t> Real for Var<'t> {
    fn value(&self) -> f64 {
        self.value
    }
    fn lift(&self, c: f64) -> Self {
        self.tape.constant(c)
    }
    fn sin(&self) -> Self {
        Var::sin(*self)
    }
    fn cos(&self) -> Self {
        Var::cos(*self)
    }
    fn tanh(&self) -> Self {
        Var::tanh(*self)
    }
    fn exp(&self) -> Self {
        Var::exp(*self)
    }
    fn sqrt(&self) -> Self {
        Var::sqrt(*self)
    }
    fn square(&self) -> Self {
        Var::square(*self)
    }
    fn relu(&self) -> Self {
        Var::relu(*self)
    }
}

/// Index of `(i, j)`, `i ≤ j`, in a packed upper-triangular `d × d` array.
#[inline]
pub fn packed_index(d: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * d - i * (i + 1) / 2 + j
}

pub fn packed_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Second-order forward jet: value, gradient and packed Hessian with respect
/// to `d` input directions. Empty `grad`/`hess` mean a constant.
#[derive(Debug, Clone)]
pub struct Jet2<T> {
    pub value: T,
    pub grad: Vec<T>,
    pub hess: Vec<T>,
}

impl<T: Real> Jet2<T> {
    pub fn constant(value: T) -> Self {
        Self {
            value,
            grad: Vec::new(),
            hess: Vec::new(),
        }
    }

    /// Input `index` of `dim` independent variables.
    pub fn variable(value: T, index: usize, dim: usize) -> Self {
        let zero = value.lift(0.0);
        let mut grad = vec![zero.clone(); dim];
        grad[index] = value.lift(1.0);
        Self {
            hess: vec![zero; packed_len(dim)],
            grad,
            value,
        }
    }

    pub fn dim(&self) -> usize {
        self.grad.len()
    }

    pub fn hess_at(&self, i: usize, j: usize) -> T {
        if self.hess.is_empty() {
            return self.value.lift(0.0);
        }
        self.hess[packed_index(self.dim(), i, j)].clone()
    }

    /// Full symmetric Hessian as rows.
    pub fn hessian_rows(&self) -> Vec<Vec<T>> {
        let d = self.dim();
        (0..d)
            .map(|i| (0..d).map(|j| self.hess_at(i, j)).collect())
            .collect()
    }

    pub(crate) fn expanded(&self, d: usize) -> (Vec<T>, Vec<T>) {
        if self.grad.is_empty() && d > 0 {
            let zero = self.value.lift(0.0);
            (vec![zero.clone(); d], vec![zero; packed_len(d)])
        } else {
            (self.grad.clone(), self.hess.clone())
        }
    }

    /// Applies a scalar function given its value and first two derivatives at
    /// `self.value`.
    pub fn chain(&self, f0: T, f1: T, f2: T) -> Self {
        if self.grad.is_empty() {
            return Self::constant(f0);
        }
        let d = self.dim();
        let grad: Vec<T> = self.grad.iter().map(|g| f1.clone() * g.clone()).collect();
        let mut hess = Vec::with_capacity(self.hess.len());
        for i in 0..d {
            for j in i..d {
                let h = f2.clone() * self.grad[i].clone() * self.grad[j].clone()
                    + f1.clone() * self.hess[packed_index(d, i, j)].clone();
                hess.push(h);
            }
        }
        Self {
            value: f0,
            grad,
            hess,
        }
    }

    fn recip(&self) -> Self {
        let one = self.value.lift(1.0);
        let r = one / self.value.clone();
        let r2 = r.clone() * r.clone();
        let r3 = r2.clone() * r.clone();
        self.chain(r, -r2, r3 * 2.0)
    }
}

impl Jet2<f64> {
    pub fn hessian_mat(&self) -> Mat {
        let d = self.dim();
        let rows = self.hessian_rows();
        Mat::new(d, d, rows.concat()).unwrap_or_else(|_| Mat::zeros(d.max(1), d.max(1)))
    }
}

impl<T: Real> Add for Jet2<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let d = self.dim().max(rhs.dim());
        if d == 0 {
            return Self::constant(self.value + rhs.value);
        }
        let (ga, ha) = self.expanded(d);
        let (gb, hb) = rhs.expanded(d);
        Self {
            value: self.value + rhs.value,
            grad: ga.into_iter().zip(gb).map(|(a, b)| a + b).collect(),
            hess: ha.into_iter().zip(hb).map(|(a, b)| a + b).collect(),
        }
    }
}

impl<T: Real> Sub for Jet2<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self + (-rhs)
    }
}

impl<T: Real> Neg for Jet2<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            value: -self.value,
            grad: self.grad.into_iter().map(|g| -g).collect(),
            hess: self.hess.into_iter().map(|h| -h).collect(),
        }
    }
}

impl<T: Real> Mul for Jet2<T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let d = self.dim().max(rhs.dim());
        if d == 0 {
            return Self::constant(self.value * rhs.value);
        }
        if rhs.grad.is_empty() {
            let c = rhs.value;
            return self.scale_by(c);
        }
        if self.grad.is_empty() {
            let c = self.value;
            return rhs.scale_by(c);
        }
        let (a, b) = (&self, &rhs);
        let grad = (0..d)
            .map(|i| a.grad[i].clone() * b.value.clone() + b.grad[i].clone() * a.value.clone())
            .collect();
        let mut hess = Vec::with_capacity(packed_len(d));
        for i in 0..d {
            for j in i..d {
                let k = packed_index(d, i, j);
                hess.push(
                    a.hess[k].clone() * b.value.clone()
                        + a.grad[i].clone() * b.grad[j].clone()
                        + a.grad[j].clone() * b.grad[i].clone()
                        + a.value.clone() * b.hess[k].clone(),
                );
            }
        }
        Self {
            value: a.value.clone() * b.value.clone(),
            grad,
            hess,
        }
    }
}

impl<T: Real> Jet2<T> {
    /// Multiplies every component by a scalar of the underlying type.
    pub fn scale_by(self, c: T) -> Self {
        Self {
            value: self.value * c.clone(),
            grad: self.grad.into_iter().map(|g| g * c.clone()).collect(),
            hess: self.hess.into_iter().map(|h| h * c.clone()).collect(),
        }
    }
}

impl<T: Real> Div for Jet2<T> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        if rhs.grad.is_empty() {
            let inv = rhs.value.lift(1.0) / rhs.value;
            return self.scale_by(inv);
        }
        self * rhs.recip()
    }
}

impl<T: Real> Add<f64> for Jet2<T> {
    type Output = Self;
    fn add(mut self, rhs: f64) -> Self {
        self.value = self.value + rhs;
        self
    }
}

impl<T: Real> Sub<f64> for Jet2<T> {
    type Output = Self;
    fn sub(mut self, rhs: f64) -> Self {
        self.value = self.value - rhs;
        self
    }
}

impl<T: Real> Mul<f64> for Jet2<T> {
    type Output = Self;
    fn mul(self, rhs: f64) -> Self {
        Self {
            value: self.value * rhs,
            grad: self.grad.into_iter().map(|g| g * rhs).collect(),
            hess: self.hess.into_iter().map(|h| h * rhs).collect(),
        }
    }
}

impl<T: Real> Div<f64> for Jet2<T> {
    type Output = Self;
    fn div(self, rhs: f64) -> Self {
        self * (1.0 / rhs)
    }
}

impl<T: Real> Real for Jet2<T> {
    fn value(&self) -> f64 {
        self.value.value()
    }
    fn lift(&self, c: f64) -> Self {
        Self::constant(self.value.lift(c))
    }
    fn sin(&self) -> Self {
        let (s, c) = (self.value.sin(), self.value.cos());
        self.chain(s.clone(), c, -s)
    }
    fn cos(&self) -> Self {
        let (s, c) = (self.value.sin(), self.value.cos());
        self.chain(c.clone(), -s, -c)
    }
    fn tanh(&self) -> Self {
        let t = self.value.tanh();
        let d1 = self.value.lift(1.0) - t.clone() * t.clone();
        let d2 = t.clone() * d1.clone() * -2.0;
        self.chain(t, d1, d2)
    }
    fn exp(&self) -> Self {
        let e = self.value.exp();
        self.chain(e.clone(), e.clone(), e)
    }
    fn sqrt(&self) -> Self {
        let s = self.value.sqrt();
        let d1 = self.value.lift(0.5) / s.clone();
        let d2 = -(d1.clone() / (self.value.clone() * 2.0));
        self.chain(s, d1, d2)
    }
    fn square(&self) -> Self {
        let v = self.value.clone();
        self.chain(v.clone() * v.clone(), v.clone() * 2.0, v.lift(2.0))
    }
    fn relu(&self) -> Self {
        if self.value.value() > 0.0 {
            let v = self.value.clone();
            self.chain(v.clone(), v.lift(1.0), v.lift(0.0))
        } else {
            let z = self.value.lift(0.0);
            self.chain(z.clone(), z.clone(), z)
        }
    }
}

/// Seeds one jet per coordinate of `x`.
pub fn variables<T: Real>(x: &[T]) -> Vec<Jet2<T>> {
    let d = x.len();
    x.iter()
        .enumerate()
        .map(|(i, v)| Jet2::variable(v.clone(), i, d))
        .collect()
}

/// Value, gradient and Hessian of `f` at `x` in one forward pass.
pub fn input_jet<T: Real, F>(f: F, x: &[T]) -> Jet2<T>
where
    F: Fn(&[Jet2<T>]) -> Jet2<T>,
{
    let vars = variables(x);
    let mut out = f(&vars);
    if out.grad.is_empty() {
        let (g, h) = out.expanded(x.len());
        out.grad = g;
        out.hess = h;
    }
    out
}

/// `∂f/∂x`; entries stay on the tape when `T = Var`.
pub fn input_gradient<T: Real, F>(f: F, x: &[T]) -> Vec<T>
where
    F: Fn(&[Jet2<T>]) -> Jet2<T>,
{
    input_jet(f, x).grad
}

/// `∂²f/∂x²` as symmetric rows; entries stay on the tape when `T = Var`.
pub fn input_hessian<T: Real, F>(f: F, x: &[T]) -> Vec<Vec<T>>
where
    F: Fn(&[Jet2<T>]) -> Jet2<T>,
{
    input_jet(f, x).hessian_rows()
}
