//! Reverse-mode automatic differentiation over dense matrices, with a
//! forward-mode layer built from tape operations.
//!
//! Values are evaluated eagerly as nodes are recorded. [`Tape::backward`]
//! sweeps the tape in reverse insertion order. Forward-mode derivatives
//! ([`Dual`]) keep their tangents as ordinary tape nodes, so a derivative
//! with respect to the input can itself be differentiated with respect to
//! the parameters, or differentiated again along another input direction.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Sigmoid(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    /// `W x + b`, with `b` a column broadcast over the columns of `x`.
    Affine {
        w: usize,
        x: usize,
        b: usize,
    },
    /// `s * m` for a 1x1 `s`.
    ScalarMul {
        s: usize,
        m: usize,
    },
    Row(usize, usize),
    Reshape(usize),
    /// `x S^T`: every row of `x` mapped by the sparse matrix `S`.
    SparseCols(usize, Rc<CsrMatrix>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: DMatrix<f64>,
}

/// Append-only computation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    shape: (usize, usize),
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros if `v` does not influence the loss.
    pub fn get(&self, v: Var<'_>) -> DMatrix<f64> {
        match &self.grads[v.index] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.index];
                DMatrix::zeros(r, c)
            }
        }
    }
}

fn same_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { op, lhs: a, rhs: b })
    }
}

fn accumulate(slot: &mut Option<DMatrix<f64>>, g: DMatrix<f64>) {
    match slot {
        Some(acc) => *acc += g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: DMatrix<f64>) -> Var<'_> {
        let shape = value.shape();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var {
            tape: self,
            index: nodes.len() - 1,
            shape,
        }
    }

    /// Records an input or parameter.
    pub fn leaf(&self, value: DMatrix<f64>) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(DMatrix::from_element(1, 1, value))
    }

    /// Reverse sweep from a 1x1 `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if loss.shape != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: loss.shape.0,
                cols: loss.shape.1,
            });
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; loss.index + 1];
        grads[loss.index] = Some(DMatrix::from_element(1, 1, 1.0));
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |k: usize| &nodes[k].value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[*a], g.clone());
                    accumulate(&mut grads[*b], -&g);
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads[*a], g.component_mul(val(*b)));
                    accumulate(&mut grads[*b], g.component_mul(val(*a)));
                }
                Op::Div(a, b) => {
                    let vb = val(*b);
                    accumulate(&mut grads[*a], g.component_div(vb));
                    let gb = -g.component_mul(&node.value).component_div(vb);
                    accumulate(&mut grads[*b], gb);
                }
                Op::MatMul(a, b) => {
                    accumulate(&mut grads[*a], &g * val(*b).transpose());
                    accumulate(&mut grads[*b], val(*a).tr_mul(&g));
                }
                Op::Scale(a, c) => accumulate(&mut grads[*a], &g * *c),
                Op::AddScalar(a) => accumulate(&mut grads[*a], g.clone()),
                Op::Tanh(a) => {
                    let d = node.value.map(|y| 1.0 - y * y);
                    accumulate(&mut grads[*a], g.component_mul(&d));
                }
                Op::Sigmoid(a) => {
                    let d = node.value.map(|y| y * (1.0 - y));
                    accumulate(&mut grads[*a], g.component_mul(&d));
                }
                Op::Square(a) => accumulate(&mut grads[*a], g.component_mul(val(*a)) * 2.0),
                Op::Sum(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    accumulate(&mut grads[*a], DMatrix::from_element(r, c, g[(0, 0)]));
                }
                Op::Mean(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    let n = (r * c) as f64;
                    accumulate(&mut grads[*a], DMatrix::from_element(r, c, g[(0, 0)] / n));
                }
                Op::Affine { w, x, b } => {
                    accumulate(&mut grads[*w], &g * val(*x).transpose());
                    accumulate(&mut grads[*x], val(*w).tr_mul(&g));
                    let gb = DMatrix::from_iterator(g.nrows(), 1, g.column_sum().iter().copied());
                    accumulate(&mut grads[*b], gb);
                }
                Op::ScalarMul { s, m } => {
                    let gs = g.dot(val(*m));
                    accumulate(&mut grads[*s], DMatrix::from_element(1, 1, gs));
                    accumulate(&mut grads[*m], &g * val(*s)[(0, 0)]);
                }
                Op::Row(a, r) => {
                    let (rows, cols) = nodes[*a].value.shape();
                    let mut full = DMatrix::zeros(rows, cols);
                    full.row_mut(*r).copy_from(&g);
                    accumulate(&mut grads[*a], full);
                }
                Op::Reshape(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    accumulate(
                        &mut grads[*a],
                        g.clone().reshape_generic(nalgebra::Dyn(r), nalgebra::Dyn(c)),
                    );
                }
                Op::SparseCols(a, s) => {
                    accumulate(&mut grads[*a], s.apply_transpose_to_rows(&g));
                }
            }
            grads[i] = Some(g);
        }
        let shapes = nodes[..=loss.index].iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    /// Borrow of the cached value.
    pub fn value(&self) -> Ref<'t, DMatrix<f64>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.index].value)
    }

    /// The value of a 1x1 variable.
    pub fn scalar_value(&self) -> f64 {
        self.value()[(0, 0)]
    }

    fn unary(self, op: Op, f: impl FnOnce(&DMatrix<f64>) -> DMatrix<f64>) -> Var<'t> {
        let value = f(&self.value());
        self.tape.push(op, value)
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl FnOnce(&DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64>) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "operands on different tapes");
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.index].value, &nodes[other.index].value)
        };
        self.tape.push(op, value)
    }

    pub fn add(self, o: Var<'t>) -> Result<Var<'t>> {
        same_shape("add", self.shape, o.shape)?;
        Ok(self.binary(o, Op::Add(self.index, o.index), |a, b| a + b))
    }

    pub fn sub(self, o: Var<'t>) -> Result<Var<'t>> {
        same_shape("sub", self.shape, o.shape)?;
        Ok(self.binary(o, Op::Sub(self.index, o.index), |a, b| a - b))
    }

    /// Elementwise product.
    pub fn mul(self, o: Var<'t>) -> Result<Var<'t>> {
        same_shape("mul", self.shape, o.shape)?;
        Ok(self.binary(o, Op::Mul(self.index, o.index), |a, b| a.component_mul(b)))
    }

    /// Elementwise quotient.
    pub fn div(self, o: Var<'t>) -> Result<Var<'t>> {
        same_shape("div", self.shape, o.shape)?;
        Ok(self.binary(o, Op::Div(self.index, o.index), |a, b| a.component_div(b)))
    }

    pub fn matmul(self, o: Var<'t>) -> Result<Var<'t>> {
        if self.shape.1 != o.shape.0 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape,
                rhs: o.shape,
            });
        }
        Ok(self.binary(o, Op::MatMul(self.index, o.index), |a, b| a * b))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.index, c), |a| a * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.index), |a| a.add_scalar(c))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.index), |a| a.map(tanh))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.index), |a| a.map(sigmoid))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.index), |a| a.map(|x| x * x))
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.index), |a| DMatrix::from_element(1, 1, a.sum()))
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(Op::Mean(self.index), |a| DMatrix::from_element(1, 1, a.mean()))
    }

    /// `self * x + b` with `b` a column vector broadcast across columns.
    pub fn affine(self, x: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        if self.shape.1 != x.shape.0 || b.shape != (self.shape.0, 1) {
            return Err(Error::ShapeMismatch {
                op: "affine",
                lhs: self.shape,
                rhs: x.shape,
            });
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let mut out = &nodes[self.index].value * &nodes[x.index].value;
            let bias = nodes[b.index].value.column(0);
            for mut col in out.column_iter_mut() {
                col += bias;
            }
            out
        };
        Ok(self.tape.push(
            Op::Affine {
                w: self.index,
                x: x.index,
                b: b.index,
            },
            value,
        ))
    }

    /// `self * m` for a 1x1 `self`.
    pub fn scalar_mul(self, m: Var<'t>) -> Result<Var<'t>> {
        if self.shape != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "scalar_mul",
                lhs: self.shape,
                rhs: m.shape,
            });
        }
        Ok(self.binary(
            m,
            Op::ScalarMul {
                s: self.index,
                m: m.index,
            },
            |s, m| m * s[(0, 0)],
        ))
    }

    /// Row `r` as a `1 x cols` variable.
    pub fn row(self, r: usize) -> Result<Var<'t>> {
        if r >= self.shape.0 {
            return Err(Error::Dimension(format!("row {r} of a {:?} variable", self.shape)));
        }
        Ok(self.unary(Op::Row(self.index, r), |a| a.rows(r, 1).into_owned()))
    }

    /// Column-major reshape.
    pub fn reshape(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        if rows * cols != self.shape.0 * self.shape.1 {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: (rows, cols),
            });
        }
        Ok(self.unary(Op::Reshape(self.index), |a| {
            a.clone().reshape_generic(nalgebra::Dyn(rows), nalgebra::Dyn(cols))
        }))
    }

    /// `self S^T`: maps each row (length `S.cols()`) to length `S.rows()`.
    pub fn sparse_cols(self, s: &Rc<CsrMatrix>) -> Result<Var<'t>> {
        if self.shape.1 != s.cols() {
            return Err(Error::ShapeMismatch {
                op: "sparse_cols",
                lhs: self.shape,
                rhs: (s.rows(), s.cols()),
            });
        }
        Ok(self.unary(Op::SparseCols(self.index, Rc::clone(s)), |a| s.apply_to_rows(a)))
    }
}

/// Hyperbolic tangent through a single `exp`; absolute error near 1e-16,
/// about twice as fast as the libm routine.
pub fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Arithmetic shared by tape variables and forward-mode duals.
///
/// Operands named `param` are treated as constant with respect to the
/// forward-mode direction (network weights, gates).
pub trait Arith<'t>: Sized + Clone {
    fn tape(&self) -> &'t Tape;
    /// The underlying primal variable.
    fn primal(&self) -> Var<'t>;
    /// `value` lifted with zero tangent.
    fn constant(tape: &'t Tape, value: DMatrix<f64>) -> Self;
    fn shape(&self) -> (usize, usize) {
        self.primal().shape()
    }

    fn add(&self, o: &Self) -> Result<Self>;
    fn sub(&self, o: &Self) -> Result<Self>;
    fn mul(&self, o: &Self) -> Result<Self>;
    fn scale(&self, c: f64) -> Self;
    fn add_scalar(&self, c: f64) -> Self;
    fn square(&self) -> Self;
    fn tanh(&self) -> Self;
    fn sigmoid(&self) -> Self;
    /// `W self + b` for parameters `W`, `b`.
    fn affine_param(&self, w: Var<'t>, b: Var<'t>) -> Result<Self>;
    /// `W self` for a parameter `W`.
    fn matmul_param(&self, w: Var<'t>) -> Result<Self>;
    /// `s self` for a 1x1 parameter expression `s`.
    fn scalar_mul_param(&self, s: Var<'t>) -> Result<Self>;
    fn row(&self, r: usize) -> Result<Self>;
}

impl<'t> Arith<'t> for Var<'t> {
    fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn primal(&self) -> Var<'t> {
        *self
    }

    fn constant(tape: &'t Tape, value: DMatrix<f64>) -> Self {
        tape.leaf(value)
    }

    fn add(&self, o: &Self) -> Result<Self> {
        Var::add(*self, *o)
    }

    fn sub(&self, o: &Self) -> Result<Self> {
        Var::sub(*self, *o)
    }

    fn mul(&self, o: &Self) -> Result<Self> {
        Var::mul(*self, *o)
    }

    fn scale(&self, c: f64) -> Self {
        Var::scale(*self, c)
    }

    fn add_scalar(&self, c: f64) -> Self {
        Var::add_scalar(*self, c)
    }

    fn square(&self) -> Self {
        Var::square(*self)
    }

    fn tanh(&self) -> Self {
        Var::tanh(*self)
    }

    fn sigmoid(&self) -> Self {
        Var::sigmoid(*self)
    }

    fn affine_param(&self, w: Var<'t>, b: Var<'t>) -> Result<Self> {
        w.affine(*self, b)
    }

    fn matmul_param(&self, w: Var<'t>) -> Result<Self> {
        w.matmul(*self)
    }

    fn scalar_mul_param(&self, s: Var<'t>) -> Result<Self> {
        s.scalar_mul(*self)
    }

    fn row(&self, r: usize) -> Result<Self> {
        Var::row(*self, r)
    }
}

/// Value and directional derivative, both carried as `A`.
#[derive(Debug, Clone)]
pub struct Dual<A> {
    pub value: A,
    pub tangent: A,
}

impl<'t, A: Arith<'t>> Arith<'t> for Dual<A> {
    fn tape(&self) -> &'t Tape {
        self.value.tape()
    }

    fn primal(&self) -> Var<'t> {
        self.value.primal()
    }

    fn constant(tape: &'t Tape, value: DMatrix<f64>) -> Self {
        let (r, c) = value.shape();
        Dual {
            value: A::constant(tape, value),
            tangent: A::constant(tape, DMatrix::zeros(r, c)),
        }
    }

    fn add(&self, o: &Self) -> Result<Self> {
        Ok(Dual {
            value: self.value.add(&o.value)?,
            tangent: self.tangent.add(&o.tangent)?,
        })
    }

    fn sub(&self, o: &Self) -> Result<Self> {
        Ok(Dual {
            value: self.value.sub(&o.value)?,
            tangent: self.tangent.sub(&o.tangent)?,
        })
    }

    fn mul(&self, o: &Self) -> Result<Self> {
        let tangent = self.value.mul(&o.tangent)?.add(&self.tangent.mul(&o.value)?)?;
        Ok(Dual {
            value: self.value.mul(&o.value)?,
            tangent,
        })
    }

    fn scale(&self, c: f64) -> Self {
        Dual {
            value: self.value.scale(c),
            tangent: self.tangent.scale(c),
        }
    }

    fn add_scalar(&self, c: f64) -> Self {
        Dual {
            value: self.value.add_scalar(c),
            tangent: self.tangent.clone(),
        }
    }

    fn square(&self) -> Self {
        let tangent = self
            .value
            .mul(&self.tangent)
            .expect("value and tangent share a shape")
            .scale(2.0);
        Dual {
            value: self.value.square(),
            tangent,
        }
    }

    fn tanh(&self) -> Self {
        let y = self.value.tanh();
        let slope = y.square().scale(-1.0).add_scalar(1.0);
        let tangent = self.tangent.mul(&slope).expect("value and tangent share a shape");
        Dual { value: y, tangent }
    }

    fn sigmoid(&self) -> Self {
        let y = self.value.sigmoid();
        let slope = y.sub(&y.square()).expect("same shape");
        let tangent = self.tangent.mul(&slope).expect("value and tangent share a shape");
        Dual { value: y, tangent }
    }

    fn affine_param(&self, w: Var<'t>, b: Var<'t>) -> Result<Self> {
        Ok(Dual {
            value: self.value.affine_param(w, b)?,
            tangent: self.tangent.matmul_param(w)?,
        })
    }

    fn matmul_param(&self, w: Var<'t>) -> Result<Self> {
        Ok(Dual {
            value: self.value.matmul_param(w)?,
            tangent: self.tangent.matmul_param(w)?,
        })
    }

    fn scalar_mul_param(&self, s: Var<'t>) -> Result<Self> {
        Ok(Dual {
            value: self.value.scalar_mul_param(s)?,
            tangent: self.tangent.scalar_mul_param(s)?,
        })
    }

    fn row(&self, r: usize) -> Result<Self> {
        Ok(Dual {
            value: self.value.row(r)?,
            tangent: self.tangent.row(r)?,
        })
    }
}

/// A function expressible in [`Arith`] operations, so it can be evaluated on
/// plain variables or on duals of any nesting depth.
pub trait DiffFn<'t> {
    fn call<A: Arith<'t>>(&self, x: A) -> Result<A>;
}

/// Broadcasts `dir` across `cols` columns.
fn direction_matrix(dir: &[f64], cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(dir.len(), cols, |r, _| dir[r])
}

/// Derivative of `f` along `dir` at every column of `x`.
///
/// The tangent is propagated through `f` as tape nodes; the returned
/// variable can be passed to [`Tape::backward`] (after reduction) or
/// differentiated again.
pub fn input_directional_derivative<'t, F: DiffFn<'t>>(f: &F, x: Var<'t>, dir: &[f64]) -> Result<Var<'t>> {
    Directional { f, dir }.call(x)
}

/// `x -> D_dir f(x)`, itself a [`DiffFn`].
#[derive(Debug, Clone, Copy)]
pub struct Directional<'a, F> {
    pub f: &'a F,
    pub dir: &'a [f64],
}

impl<'t, F: DiffFn<'t>> DiffFn<'t> for Directional<'_, F> {
    fn call<A: Arith<'t>>(&self, x: A) -> Result<A> {
        let (rows, cols) = x.shape();
        if rows != self.dir.len() {
            return Err(Error::ShapeMismatch {
                op: "directional derivative",
                lhs: (rows, cols),
                rhs: (self.dir.len(), 1),
            });
        }
        let lifted = Dual {
            tangent: A::constant(x.tape(), direction_matrix(self.dir, cols)),
            value: x,
        };
        Ok(self.f.call(lifted)?.tangent)
    }
}
