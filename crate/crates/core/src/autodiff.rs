//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation; [`Tape::backward`] walks it in reverse
//! and returns gradients for all nodes. Values are `DMatrix<f64>`; scalars are
//! 1×1 matrices. Time derivatives of a network are built by the caller from
//! ordinary tape ops (tangent propagation), so they are differentiable too.

use std::cell::RefCell;

use nalgebra::DMatrix;

type M = DMatrix<f64>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    /// Elementwise product.
    Mul(usize, usize),
    MatMul(usize, usize),
    /// Matrix plus a 1×n row repeated over every row.
    AddRow(usize, usize),
    /// Matrix times a 1×n row, elementwise per row (column scaling).
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Sin(usize),
    Cos(usize),
    Square(usize),
    /// sqrt(x² + eps²) − eps.
    SmoothAbs(usize, f64),
    Relu(usize),
    Sum(usize),
    /// Selected columns, in order.
    Columns(usize, Vec<usize>),
    /// Horizontal concatenation.
    HCat(Vec<usize>),
    Transpose(usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: M,
    op: Op,
    /// Depends on a differentiable leaf.
    live: bool,
}

/// Recording of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

/// Gradients indexed by node.
pub struct Gradients {
    grads: Vec<Option<M>>,
}

impl Gradients {
    /// Gradient with respect to `v`, zero-filled when `v` did not influence
    /// the output.
    pub fn wrt(&self, v: Var<'_>) -> M {
        match &self.grads[v.idx] {
            Some(g) => g.clone(),
            None => {
                let val = v.value();
                M::zeros(val.nrows(), val.ncols())
            }
        }
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

    fn push(&self, value: M, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let live = match &op {
            Op::Leaf => true,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) => {
                nodes[*a].live || nodes[*b].live
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Tanh(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Square(a)
            | Op::SmoothAbs(a, _)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Columns(a, _)
            | Op::Transpose(a) => nodes[*a].live,
            Op::HCat(parts) => parts.iter().any(|p| nodes[*p].live),
            Op::Const => false,
        };
        nodes.push(Node { value, op, live });
        Var { tape: self, idx: nodes.len() - 1 }
    }

    /// Differentiable input.
    pub fn var(&self, value: M) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Input that never needs a gradient.
    pub fn constant(&self, value: M) -> Var<'_> {
        self.push(value, Op::Const)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.var(M::from_element(1, 1, v))
    }

    /// Gradients of the 1×1 node `out` with respect to every node.
    pub fn backward(&self, out: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[out.idx].value.shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<M>> = vec![None; nodes.len()];
        grads[out.idx] = Some(M::from_element(1, 1, 1.0));
        let acc = |grads: &mut [Option<M>], i: usize, g: M| {
            if !nodes[i].live {
                return;
            }
            match &mut grads[i] {
                Some(x) => *x += g,
                slot @ None => *slot = Some(g),
            }
        };
        for i in (0..=out.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf | Op::Const => {}
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -g.clone());
                }
                Op::Mul(a, b) => {
                    if nodes[*a].live {
                        acc(&mut grads, *a, g.component_mul(&nodes[*b].value));
                    }
                    if nodes[*b].live {
                        acc(&mut grads, *b, g.component_mul(&nodes[*a].value));
                    }
                }
                Op::MatMul(a, b) => {
                    if nodes[*a].live {
                        acc(&mut grads, *a, &g * nodes[*b].value.transpose());
                    }
                    if nodes[*b].live {
                        acc(&mut grads, *b, nodes[*a].value.transpose() * &g);
                    }
                }
                Op::AddRow(a, r) => {
                    if nodes[*r].live {
                        acc(&mut grads, *r, M::from_fn(1, g.ncols(), |_, c| g.column(c).sum()));
                    }
                    acc(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, r) => {
                    let av = &nodes[*a].value;
                    let rv = &nodes[*r].value;
                    if nodes[*r].live {
                        acc(&mut grads, *r, M::from_fn(1, g.ncols(), |_, c| g.column(c).dot(&av.column(c))));
                    }
                    let mut ga = g.clone();
                    for c in 0..ga.ncols() {
                        ga.column_mut(c).scale_mut(rv[(0, c)]);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, &g * *s),
                Op::AddScalar(a) => acc(&mut grads, *a, g.clone()),
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi)));
                }
                Op::Sin(a) => {
                    let x = &nodes[*a].value;
                    acc(&mut grads, *a, g.zip_map(x, |gi, xi| gi * xi.cos()));
                }
                Op::Cos(a) => {
                    let x = &nodes[*a].value;
                    acc(&mut grads, *a, g.zip_map(x, |gi, xi| -gi * xi.sin()));
                }
                Op::Square(a) => {
                    let x = &nodes[*a].value;
                    acc(&mut grads, *a, g.zip_map(x, |gi, xi| 2.0 * gi * xi));
                }
                Op::SmoothAbs(a, eps) => {
                    let x = &nodes[*a].value;
                    let e2 = eps * eps;
                    acc(&mut grads, *a, g.zip_map(x, |gi, xi| gi * xi / (xi * xi + e2).sqrt()));
                }
                Op::Relu(a) => {
                    let x = &nodes[*a].value;
                    acc(&mut grads, *a, g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }));
                }
                Op::Sum(a) => {
                    let s = g[(0, 0)];
                    let (r, c) = nodes[*a].value.shape();
                    acc(&mut grads, *a, M::from_element(r, c, s));
                }
                Op::Columns(a, cols) => {
                    let (r, c) = nodes[*a].value.shape();
                    let mut ga = M::zeros(r, c);
                    for (k, &j) in cols.iter().enumerate() {
                        let mut col = ga.column_mut(j);
                        col += g.column(k);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::HCat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = nodes[p].value.ncols();
                        acc(&mut grads, p, g.columns(off, w).into_owned());
                        off += w;
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> M {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.idx].value.shape()
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self) -> f64 {
        self.tape.nodes.borrow()[self.idx].value[(0, 0)]
    }

    fn unary(self, f: impl Fn(&M) -> M, op: Op) -> Var<'t> {
        let v = f(&self.tape.nodes.borrow()[self.idx].value);
        self.tape.push(v, op)
    }

    fn binary(self, other: Var<'t>, f: impl Fn(&M, &M) -> M, op: Op) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.idx].value, &nodes[other.idx].value)
        };
        self.tape.push(v, op)
    }

    pub fn add(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| a + b, Op::Add(self.idx, o.idx))
    }
    pub fn sub(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| a - b, Op::Sub(self.idx, o.idx))
    }
    pub fn mul(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| a.component_mul(b), Op::Mul(self.idx, o.idx))
    }
    pub fn matmul(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, |a, b| a * b, Op::MatMul(self.idx, o.idx))
    }
    /// Add a 1×n row to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        self.binary(
            row,
            |a, r| {
                let mut out = a.clone();
                for c in 0..out.ncols() {
                    out.column_mut(c).add_scalar_mut(r[(0, c)]);
                }
                out
            },
            Op::AddRow(self.idx, row.idx),
        )
    }
    /// Multiply column c by row[c].
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        self.binary(
            row,
            |a, r| {
                let mut out = a.clone();
                for c in 0..out.ncols() {
                    out.column_mut(c).scale_mut(r[(0, c)]);
                }
                out
            },
            Op::MulRow(self.idx, row.idx),
        )
    }
    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(|a| a * s, Op::Scale(self.idx, s))
    }
    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.unary(|a| a.add_scalar(s), Op::AddScalar(self.idx))
    }
    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
    pub fn tanh(self) -> Var<'t> {
        self.unary(|a| a.map(f64::tanh), Op::Tanh(self.idx))
    }
    pub fn sin(self) -> Var<'t> {
        self.unary(|a| a.map(f64::sin), Op::Sin(self.idx))
    }
    pub fn cos(self) -> Var<'t> {
        self.unary(|a| a.map(f64::cos), Op::Cos(self.idx))
    }
    pub fn square(self) -> Var<'t> {
        self.unary(|a| a.map(|x| x * x), Op::Square(self.idx))
    }
    pub fn smooth_abs(self, eps: f64) -> Var<'t> {
        self.unary(move |a| a.map(|x| (x * x + eps * eps).sqrt() - eps), Op::SmoothAbs(self.idx, eps))
    }
    pub fn relu(self) -> Var<'t> {
        self.unary(|a| a.map(|x| x.max(0.0)), Op::Relu(self.idx))
    }
    pub fn sum(self) -> Var<'t> {
        self.unary(|a| M::from_element(1, 1, a.sum()), Op::Sum(self.idx))
    }
    pub fn mean(self) -> Var<'t> {
        let (r, c) = self.shape();
        self.sum().scale(1.0 / (r * c).max(1) as f64)
    }
    pub fn transpose(self) -> Var<'t> {
        self.unary(|a| a.transpose(), Op::Transpose(self.idx))
    }
    pub fn columns(self, cols: &[usize]) -> Var<'t> {
        let cols = cols.to_vec();
        let v = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.idx].value;
            M::from_fn(a.nrows(), cols.len(), |r, k| a[(r, cols[k])])
        };
        self.tape.push(v, Op::Columns(self.idx, cols))
    }
    pub fn hcat(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let v = {
            let nodes = tape.nodes.borrow();
            let rows = nodes[parts[0].idx].value.nrows();
            let total: usize = parts.iter().map(|p| nodes[p.idx].value.ncols()).sum();
            let mut out = M::zeros(rows, total);
            let mut off = 0;
            for p in parts {
                let m = &nodes[p.idx].value;
                out.columns_mut(off, m.ncols()).copy_from(m);
                off += m.ncols();
            }
            out
        };
        tape.push(v, Op::HCat(parts.iter().map(|p| p.idx).collect()))
    }
}
