//! Define-by-run reverse-mode automatic differentiation over matrices.
//!
//! A [`Tape`] is built fresh for every forward pass. Each recorded node
//! caches its forward value; node inputs always point at earlier nodes, so
//! the backward sweep is a single pass in reverse insertion order.
//!
//! Conventions:
//! - `relu` has subgradient 0 at exactly 0.
//! - `clamp_min` passes the gradient only where the input is strictly above
//!   the floor.
//! - Gradients accumulate into [`ParamSet`] by addition; zero them first.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, matmul_acc, matmul_tn_acc, norm, Matrix, ZERO_NORM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation recorded on the tape, with its input node ids.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Leaf that never receives a gradient.
    Constant,
    /// Leaf bound to entry `.0` of a [`ParamSet`].
    Param(usize),
    /// `a * b`
    MatMul(NodeId, NodeId),
    /// `a * b^T`
    MatMulT(NodeId, NodeId),
    /// Adds a `1 x c` row vector to every row.
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    NormalizeRows(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    /// `r x c -> r x 1`
    RowSum(NodeId),
    /// `r x c -> 1 x 1`
    Sum(NodeId),
    ConcatRows(Vec<NodeId>),
    /// `max(x, floor)` elementwise.
    ClampMin(NodeId, f64),
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Constant | Param(_) => vec![],
            MatMul(a, b) | MatMulT(a, b) | AddBias(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b)
            | Div(a, b) => vec![*a, *b],
            Relu(a) | Exp(a) | Log(a) | NormalizeRows(a) | Scale(a, _) | AddScalar(a, _)
            | RowSum(a) | Sum(a) | ClampMin(a, _) => vec![*a],
            ConcatRows(parts) => parts.clone(),
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Constant => "constant",
            Param(_) => "param",
            MatMul(..) => "matmul",
            MatMulT(..) => "matmul_t",
            AddBias(..) => "add_bias",
            Relu(_) => "relu",
            Exp(_) => "exp",
            Log(_) => "log",
            NormalizeRows(_) => "normalize_rows",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Div(..) => "div",
            Scale(..) => "scale",
            AddScalar(..) => "add_scalar",
            RowSum(_) => "row_sum",
            Sum(_) => "sum",
            ConcatRows(_) => "concat_rows",
            ClampMin(..) => "clamp_min",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).get(0, 0)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    /// Records a trainable leaf holding the current value of `params[index]`.
    pub fn param(&mut self, params: &ParamSet, index: usize) -> NodeId {
        self.push(Op::Param(index), params.value(index).clone(), true)
    }

    fn push(&mut self, op: Op, value: Matrix, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a non-leaf operation, computing and caching its value.
    pub fn record(&mut self, op: Op) -> Result<NodeId> {
        let inputs = op.inputs();
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::shape(op.name(), format!("unknown input node {}", bad.0)));
        }
        let value = self.forward(&op)?;
        let needs_grad = inputs.iter().any(|id| self.nodes[id.0].needs_grad);
        Ok(self.push(op, value, needs_grad))
    }

    fn forward(&self, op: &Op) -> Result<Matrix> {
        use Op::*;
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let same_shape = |a: &NodeId, b: &NodeId| -> Result<()> {
            if v(a).shape() != v(b).shape() {
                return Err(Error::shape(
                    op.name(),
                    format!("{:?} vs {:?}", v(a).shape(), v(b).shape()),
                ));
            }
            Ok(())
        };
        Ok(match op {
            Constant | Param(_) => {
                return Err(Error::shape(op.name(), "leaves are created with constant/param"))
            }
            MatMul(a, b) => v(a).matmul(v(b))?,
            MatMulT(a, b) => v(a).matmul_t(v(b))?,
            AddBias(x, b) => {
                let (x, b) = (v(x), v(b));
                if b.rows() != 1 || b.cols() != x.cols() {
                    return Err(Error::shape(
                        "add_bias",
                        format!("bias {:?} for input {:?}", b.shape(), x.shape()),
                    ));
                }
                let mut out = x.clone();
                for i in 0..out.rows() {
                    for (o, bv) in out.row_mut(i).iter_mut().zip(b.as_slice()) {
                        *o += bv;
                    }
                }
                out
            }
            Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Exp(a) => v(a).map(f64::exp),
            Log(a) => v(a).map(f64::ln),
            NormalizeRows(a) => crate::matrix::l2_normalize_rows(v(a))?,
            Add(a, b) => {
                same_shape(a, b)?;
                v(a).zip_map(v(b), |x, y| x + y)?
            }
            Sub(a, b) => {
                same_shape(a, b)?;
                v(a).zip_map(v(b), |x, y| x - y)?
            }
            Mul(a, b) => {
                same_shape(a, b)?;
                v(a).zip_map(v(b), |x, y| x * y)?
            }
            Div(a, b) => {
                same_shape(a, b)?;
                v(a).zip_map(v(b), |x, y| x / y)?
            }
            Scale(a, c) => v(a).map(|x| x * c),
            AddScalar(a, c) => v(a).map(|x| x + c),
            RowSum(a) => {
                let a = v(a);
                Matrix::from_raw(a.rows(), 1, a.iter_rows().map(|r| r.iter().sum()).collect())
            }
            Sum(a) => Matrix::scalar(v(a).sum()),
            ConcatRows(parts) => {
                if parts.is_empty() {
                    return Err(Error::shape("concat_rows", "no blocks"));
                }
                let blocks: Vec<&Matrix> = parts.iter().map(v).collect();
                Matrix::vstack(&blocks)?
            }
            ClampMin(a, floor) => v(a).map(|x| x.max(*floor)),
        })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMulT(a, b))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.record(Op::AddBias(x, bias))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Relu(x))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Log(x))
    }

    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::NormalizeRows(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Div(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.record(Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.record(Op::AddScalar(x, c))
    }

    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::RowSum(x))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.record(Op::Sum(x))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.record(Op::ConcatRows(parts.to_vec()))
    }

    pub fn clamp_min(&mut self, x: NodeId, floor: f64) -> Result<NodeId> {
        self.record(Op::ClampMin(x, floor))
    }

    /// Reverse sweep from a scalar node. Returns the adjoint of every node
    /// that the loss depends on through a trainable leaf.
    pub fn gradients(&self, loss: NodeId) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: shape.0,
                cols: shape.1,
            });
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(&node.op, &node.value, &g, &mut adj);
            }
            adj[i] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, adj: &mut [Option<Matrix>]) {
        use Op::*;
        let v = |id: &NodeId| &self.nodes[id.0].value;
        let wants = |id: &NodeId| self.nodes[id.0].needs_grad;
        let mut send = |id: NodeId, delta: Matrix| match &mut adj[id.0] {
            Some(acc) => acc.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match op {
            Constant | Param(_) => {}
            MatMul(a, b) => {
                if wants(a) {
                    send(*a, g.matmul_t(v(b)).expect("shapes checked on record"));
                }
                if wants(b) {
                    let mut db = Matrix::zeros(v(b).rows(), v(b).cols());
                    matmul_tn_acc(v(a), g, &mut db);
                    send(*b, db);
                }
            }
            MatMulT(a, b) => {
                if wants(a) {
                    let mut da = Matrix::zeros(v(a).rows(), v(a).cols());
                    matmul_acc(g, v(b), &mut da);
                    send(*a, da);
                }
                if wants(b) {
                    let mut db = Matrix::zeros(v(b).rows(), v(b).cols());
                    matmul_tn_acc(g, v(a), &mut db);
                    send(*b, db);
                }
            }
            AddBias(x, b) => {
                if wants(x) {
                    send(*x, g.clone());
                }
                if wants(b) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for row in g.iter_rows() {
                        for (d, r) in db.as_mut_slice().iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    send(*b, db);
                }
            }
            Relu(x) => {
                let d = v(x)
                    .zip_map(g, |xv, gv| if xv > 0.0 { gv } else { 0.0 })
                    .expect("same shape");
                send(*x, d);
            }
            Exp(x) => send(*x, out.zip_map(g, |y, gv| y * gv).expect("same shape")),
            Log(x) => send(*x, v(x).zip_map(g, |xv, gv| gv / xv).expect("same shape")),
            NormalizeRows(x) => {
                // d/dx (x/|x|) applied to g: (g - y (y.g)) / |x|
                let xin = v(x);
                let mut d = Matrix::zeros(xin.rows(), xin.cols());
                for i in 0..xin.rows() {
                    let n = norm(xin.row(i)).max(ZERO_NORM);
                    let y = out.row(i);
                    let gr = g.row(i);
                    let yg = dot(y, gr);
                    for ((dv, &yv), &gv) in d.row_mut(i).iter_mut().zip(y).zip(gr) {
                        *dv = (gv - yv * yg) / n;
                    }
                }
                send(*x, d);
            }
            Add(a, b) => {
                if wants(a) {
                    send(*a, g.clone());
                }
                if wants(b) {
                    send(*b, g.clone());
                }
            }
            Sub(a, b) => {
                if wants(a) {
                    send(*a, g.clone());
                }
                if wants(b) {
                    send(*b, g.map(|x| -x));
                }
            }
            Mul(a, b) => {
                if wants(a) {
                    send(*a, g.zip_map(v(b), |gv, bv| gv * bv).expect("same shape"));
                }
                if wants(b) {
                    send(*b, g.zip_map(v(a), |gv, av| gv * av).expect("same shape"));
                }
            }
            Div(a, b) => {
                if wants(a) {
                    send(*a, g.zip_map(v(b), |gv, bv| gv / bv).expect("same shape"));
                }
                if wants(b) {
                    // d(a/b)/db = -a/b^2 = -out/b
                    let t = out.zip_map(v(b), |o, bv| -o / bv).expect("same shape");
                    send(*b, t.zip_map(g, |t, gv| t * gv).expect("same shape"));
                }
            }
            Scale(x, c) => send(*x, g.map(|gv| gv * c)),
            AddScalar(x, _) => send(*x, g.clone()),
            RowSum(x) => {
                let (r, c) = v(x).shape();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    let gi = g.get(i, 0);
                    d.row_mut(i).iter_mut().for_each(|e| *e = gi);
                }
                send(*x, d);
            }
            Sum(x) => {
                let (r, c) = v(x).shape();
                send(*x, Matrix::filled(r, c, g.get(0, 0)));
            }
            ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = v(p).shape();
                    if wants(p) {
                        let slice = g.as_slice()[offset * c..(offset + r) * c].to_vec();
                        send(*p, Matrix::from_raw(r, c, slice));
                    }
                    offset += r;
                }
            }
            ClampMin(x, floor) => {
                let d = v(x)
                    .zip_map(g, |xv, gv| if xv > *floor { gv } else { 0.0 })
                    .expect("same shape");
                send(*x, d);
            }
        }
    }
}

/// Per-node adjoints from one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Adjoint of `id`, or `None` if the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.adjoints.get(id.0).and_then(Option::as_ref)
    }
}

/// Backpropagates `loss` and adds every parameter gradient into `params`.
pub fn backward(tape: &Tape, loss: NodeId, params: &mut ParamSet) -> Result<()> {
    let grads = tape.gradients(loss)?;
    for (i, node) in tape.nodes.iter().enumerate().take(loss.0 + 1) {
        if let Op::Param(p) = node.op {
            if let Some(g) = grads.adjoints[i].as_ref() {
                params.params[p].grad.add_assign(g);
            }
        }
    }
    Ok(())
}

/// A named trainable tensor and its gradient accumulator. Equality ignores the gradient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    #[serde(skip_serializing)]
    pub grad: Matrix,
}

impl PartialEq for Param {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.value == other.value
    }
}

/// Ordered collection of parameters. Order is declaration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn value(&self, index: usize) -> &Matrix {
        &self.params[index].value
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Matrix {
        &mut self.params[index].value
    }

    pub fn grad(&self, index: usize) -> &Matrix {
        &self.params[index].grad
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.as_mut_slice().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Keeps only the parameters whose name satisfies `keep`.
    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.params.retain(|p| keep(&p.name));
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `f` records a scalar loss on a fresh tape from the given parameters.
/// Returns the maximum over parameters (tensors) of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`, with `|.|` the
/// Euclidean norm over the tensor's entries.
pub fn grad_check<F>(f: F, params: &ParamSet, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<NodeId>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::config(format!("finite-difference step {eps} outside (0, 1e-3]")));
    }
    let mut analytic = params.clone();
    analytic.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &analytic)?;
    backward(&tape, loss, &mut analytic)?;

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, p)?;
        Ok(tape.scalar(loss))
    };

    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for pi in 0..params.len() {
        let (mut diff, mut exact_sq, mut numeric_sq) = (0.0, 0.0, 0.0);
        for e in 0..params.value(pi).len() {
            let orig = params.value(pi).as_slice()[e];
            probe.value_mut(pi).as_mut_slice()[e] = orig + eps;
            let up = eval(&probe)?;
            probe.value_mut(pi).as_mut_slice()[e] = orig - eps;
            let down = eval(&probe)?;
            probe.value_mut(pi).as_mut_slice()[e] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let exact = analytic.grad(pi).as_slice()[e];
            diff += (exact - numeric) * (exact - numeric);
            exact_sq += exact * exact;
            numeric_sq += numeric * numeric;
        }
        let denom = exact_sq.sqrt().max(numeric_sq.sqrt()).max(1e-12);
        worst = worst.max(diff.sqrt() / denom);
    }
    Ok(worst)
}
