//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Tape`] records operations eagerly: each call computes the forward
//! value immediately and appends a node, so node ids are already in
//! topological order and [`Tape::backward`] is a single reverse sweep.
//! The primitive set is deliberately small — matrix product, transpose,
//! full sum, elementwise arithmetic, scalar broadcast, and a symmetric
//! positive definite solve — that last one being what makes closed-form
//! ridge and GP adaptations differentiable end to end.

use crate::error::{Error, Result};
use crate::mat::{Chol, Mat};
use std::collections::HashMap;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Exp,
    Log,
    Square,
    /// Multiply by a fixed constant.
    Scale(f64),
    /// Add a fixed constant.
    Offset(f64),
    /// Clip into [lo, hi]; subgradient 0 outside the open interval.
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    /// Differentiable leaf (a parameter).
    Leaf,
    /// Non-differentiable leaf (data).
    Const,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// Sum of all entries, producing a 1×1 matrix.
    Sum(NodeId),
    /// Elementwise unary function.
    Unary(Unary, NodeId),
    /// Elementwise binary function over equal shapes.
    Binary(Binary, NodeId, NodeId),
    /// Broadcast multiply of a 1×1 scalar node with a matrix node.
    ScaleBy { s: NodeId, x: NodeId },
    /// X = S⁻¹B with S = (A+Aᵀ)/2; the factorization is kept for backward.
    SolveSpd { a: NodeId, b: NodeId, chol: Chol },
}

struct Node {
    op: Op,
    val: Mat,
}

/// Gradients of a scalar loss with respect to the tape's differentiable
/// leaves. Absent entries mean the leaf was not reached (zero gradient).
#[derive(Debug, Default)]
pub struct GradientMap {
    grads: HashMap<usize, Mat>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads.get(&id.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Operation record for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].val
    }

    fn push(&mut self, op: Op, val: Mat, name: &'static str) -> Result<NodeId> {
        if !val.is_finite() {
            return Err(Error::Numerical {
                op: name,
                detail: format!("non-finite value in {:?} output", val.shape()),
            });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, val });
        Ok(id)
    }

    /// Differentiable leaf; its gradient appears in [`Tape::backward`]'s map.
    pub fn var(&mut self, value: Mat) -> Result<NodeId> {
        self.push(Op::Leaf, value, "var")
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Mat) -> Result<NodeId> {
        self.push(Op::Const, value, "constant")
    }

    pub fn scalar_const(&mut self, value: f64) -> Result<NodeId> {
        self.constant(Mat::scalar(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.cols() != bm.rows() {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", am.shape(), bm.shape()),
            });
        }
        let val = am.matmul(bm);
        self.push(Op::MatMul(a, b), val, "matmul")
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let val = self.value(x).transpose();
        self.push(Op::Transpose(x), val, "transpose")
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let val = Mat::scalar(self.value(x).sum());
        self.push(Op::Sum(x), val, "sum")
    }

    fn unary(&mut self, kind: Unary, x: NodeId, name: &'static str) -> Result<NodeId> {
        let xv = self.value(x);
        if matches!(kind, Unary::Log) {
            if let Some(bad) = xv.data().iter().find(|v| **v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("input {} is not strictly positive", bad),
                });
            }
        }
        let val = match kind {
            Unary::Relu => xv.map(|v| v.max(0.0)),
            Unary::Exp => xv.map(f64::exp),
            Unary::Log => xv.map(f64::ln),
            Unary::Square => xv.map(|v| v * v),
            Unary::Scale(c) => xv.map(|v| v * c),
            Unary::Offset(c) => xv.map(|v| v + c),
            Unary::Clamp(lo, hi) => xv.map(|v| v.clamp(lo, hi)),
        };
        self.push(Op::Unary(kind, x), val, name)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Relu, x, "relu")
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Exp, x, "exp")
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Log, x, "log")
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Square, x, "square")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(Unary::Scale(c), x, "scale")
    }

    pub fn offset(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(Unary::Offset(c), x, "offset")
    }

    /// Clip values into [lo, hi]; gradient passes only strictly inside.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo < hi) {
            return Err(Error::Parameter {
                name: "clamp bounds",
                detail: format!("lo {} must be < hi {}", lo, hi),
            });
        }
        self.unary(Unary::Clamp(lo, hi), x, "clamp")
    }

    fn binary(&mut self, kind: Binary, a: NodeId, b: NodeId, name: &'static str) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::Shape {
                op: name,
                detail: format!("{:?} vs {:?}", av.shape(), bv.shape()),
            });
        }
        let val = match kind {
            Binary::Add => av.add(bv),
            Binary::Sub => av.sub(bv),
            Binary::Mul => av.hadamard(bv),
            Binary::Div => av.zip(bv, |x, y| x / y),
        };
        self.push(Op::Binary(kind, a, b), val, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Div, a, b, "div")
    }

    /// Broadcast multiply: s (1×1) times every entry of x.
    pub fn scale_by(&mut self, s: NodeId, x: NodeId) -> Result<NodeId> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "scale_by",
                detail: format!("scale factor has shape {:?}, expected 1x1", sv.shape()),
            });
        }
        let c = sv.scalar_value();
        let val = self.value(x).scale(c);
        self.push(Op::ScaleBy { s, x }, val, "scale_by")
    }

    /// Solve S·X = B with S = (A+Aᵀ)/2 assumed positive definite.
    ///
    /// The explicit symmetrization makes the forward value depend on every
    /// entry of A, so the symmetrized adjoint below is the exact entrywise
    /// gradient (finite differences over single entries agree with it).
    pub fn solve_spd(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (am, bm) = (self.value(a), self.value(b));
        if am.rows() != am.cols() {
            return Err(Error::Shape {
                op: "solve_spd",
                detail: format!("matrix is {:?}, expected square", am.shape()),
            });
        }
        if am.rows() != bm.rows() {
            return Err(Error::Shape {
                op: "solve_spd",
                detail: format!("matrix {:?} vs rhs {:?}", am.shape(), bm.shape()),
            });
        }
        let s = am.symmetrize();
        let chol = s.cholesky()?;
        let mut x = chol.solve(bm);
        // One step of iterative refinement; then enforce the residual
        // contract ‖SX − B‖∞ ≤ 1e-8·‖B‖∞.
        let resid = bm.sub(&s.matmul(&x));
        if resid.max_abs() > 1e-10 * bm.max_abs().max(1.0) {
            x.add_assign(&chol.solve(&resid));
        }
        let resid = bm.sub(&s.matmul(&x)).max_abs();
        if resid > 1e-8 * bm.max_abs().max(f64::MIN_POSITIVE) {
            return Err(Error::Numerical {
                op: "solve_spd",
                detail: format!("residual {} exceeds tolerance; system ill-conditioned", resid),
            });
        }
        self.push(Op::SolveSpd { a, b, chol }, x, "solve_spd")
    }

    /// Gather the given rows of x, in order, as a new node. Implemented as
    /// a constant 0/1 selection matrix times x, so it is differentiable
    /// through the existing matmul rule. An empty row list yields 0×cols.
    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let n = self.value(x).rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Shape {
                op: "select_rows",
                detail: format!("row {} out of bounds for {} rows", bad, n),
            });
        }
        let mut sel = Mat::zeros(rows.len(), n);
        for (i, &r) in rows.iter().enumerate() {
            sel.set(i, r, 1.0);
        }
        let sel = self.constant(sel)?;
        self.matmul(sel, x)
    }

    /// Reverse sweep from a 1×1 loss node; returns gradients for every
    /// reachable differentiable leaf.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss has shape {:?}, expected 1x1", self.value(loss).shape()),
            });
        }
        let mut adj: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Mat::scalar(1.0));

        fn accumulate(adj: &mut [Option<Mat>], id: NodeId, g: Mat) {
            match &mut adj[id.0] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..self.nodes.len()).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {
                    adj[i] = Some(g);
                }
                Op::Const => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.value(*b).transpose());
                    let db = self.value(*a).transpose().matmul(&g);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Transpose(x) => {
                    accumulate(&mut adj, *x, g.transpose());
                }
                Op::Sum(x) => {
                    let (r, c) = self.value(*x).shape();
                    accumulate(&mut adj, *x, Mat::filled(r, c, g.scalar_value()));
                }
                Op::Unary(kind, x) => {
                    let xv = self.value(*x);
                    let out = &self.nodes[i].val;
                    let dx = match kind {
                        Unary::Relu => g.zip(xv, |gv, v| if v > 0.0 { gv } else { 0.0 }),
                        Unary::Exp => g.hadamard(out),
                        Unary::Log => g.zip(xv, |gv, v| gv / v),
                        Unary::Square => g.zip(xv, |gv, v| 2.0 * gv * v),
                        Unary::Scale(c) => g.scale(*c),
                        Unary::Offset(_) => g,
                        Unary::Clamp(lo, hi) => {
                            g.zip(xv, |gv, v| if v > *lo && v < *hi { gv } else { 0.0 })
                        }
                    };
                    accumulate(&mut adj, *x, dx);
                }
                Op::Binary(kind, a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let out = &self.nodes[i].val;
                    match kind {
                        Binary::Add => {
                            accumulate(&mut adj, *a, g.clone());
                            accumulate(&mut adj, *b, g);
                        }
                        Binary::Sub => {
                            accumulate(&mut adj, *a, g.clone());
                            accumulate(&mut adj, *b, g.scale(-1.0));
                        }
                        Binary::Mul => {
                            accumulate(&mut adj, *a, g.hadamard(bv));
                            accumulate(&mut adj, *b, g.hadamard(av));
                        }
                        Binary::Div => {
                            accumulate(&mut adj, *a, g.zip(bv, |gv, y| gv / y));
                            let db = g.hadamard(out).zip(bv, |go, y| -go / y);
                            accumulate(&mut adj, *b, db);
                        }
                    }
                }
                Op::ScaleBy { s, x } => {
                    let ds = Mat::scalar(g.hadamard(self.value(*x)).sum());
                    let c = self.value(*s).scalar_value();
                    accumulate(&mut adj, *s, ds);
                    accumulate(&mut adj, *x, g.scale(c));
                }
                Op::SolveSpd { a, b, chol } => {
                    // X = S⁻¹B, S symmetric: dB = S⁻¹G, and with
                    // R = −(S⁻¹G)·Xᵀ the gradient wrt A is (R+Rᵀ)/2
                    // because A enters through (A+Aᵀ)/2.
                    let gb = chol.solve(&g);
                    let x = &self.nodes[i].val;
                    let r = gb.matmul(&x.transpose()).scale(-1.0);
                    accumulate(&mut adj, *a, r.symmetrize());
                    accumulate(&mut adj, *b, gb);
                }
            }
        }

        let mut grads = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                if let Some(g) = adj[i].take() {
                    grads.insert(i, g);
                }
            }
        }
        Ok(GradientMap { grads })
    }
}
