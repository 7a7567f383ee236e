//! Tape-based reverse-mode differentiation over dense 2-D tensors.
//!
//! Every value on the tape is an `Array2<f64>`. Scalars are 1x1, batched
//! vectors are BxN. Operations are recorded eagerly: the forward value is
//! computed when the op is pushed, so replaying the trace is just reading
//! back node values. The primitive set is closed and enumerated in [`Op`];
//! anything the engine cannot express must be composed from these.
//!
//! Input-Jacobians are obtained by forward-mode tangent propagation through
//! the recorded trace ([`Tape::jvp`]). The tangent ops are themselves
//! recorded as ordinary primitives, so a gradient taken through a Jacobian
//! accounts for the parameter dependence of the Jacobian (second-order
//! dependence) without a nested engine.

use ndarray::{s, Array2, Axis};

use crate::error::{NhoError, Result};

pub type NodeId = usize;

/// The closed primitive set. Arguments are node ids into the same tape.
#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    /// Elementwise a + b; b may broadcast as (1,c) or (r,1) against a.
    Add(NodeId, NodeId),
    /// Elementwise a - b; b may broadcast.
    Sub(NodeId, NodeId),
    Neg(NodeId),
    /// Elementwise a * b; b may broadcast.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// a + c * b, b may broadcast.
    AddScaled(NodeId, NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    /// Elementwise a^p for constant p.
    Pow(NodeId, f64),
    /// Sum of all entries -> 1x1.
    Sum(NodeId),
    /// Sum along columns -> (r,1).
    RowSum(NodeId),
    /// Trace of a square matrix -> 1x1.
    Trace(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
}

struct Node {
    op: Op,
    value: Array2<f64>,
    requires_grad: bool,
}

/// A recorded trace of primitive operations.
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints per node after a backward pass.
pub struct Gradients {
    adjoints: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Adjoint of `id`, zero-filled if the node was not reached.
    pub fn get(&self, id: NodeId, shape: (usize, usize)) -> Array2<f64> {
        match &self.adjoints[id] {
            Some(a) => a.clone(),
            None => Array2::zeros(shape),
        }
    }

    pub fn try_get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.adjoints.get(id).and_then(|a| a.as_ref())
    }
}

/// Checks that `b` is elementwise-compatible with `a`: equal shape, a
/// broadcast row (1,c), or a broadcast column (r,1).
fn broadcast_ok(a: (usize, usize), b: (usize, usize)) -> bool {
    b == a || (b.0 == 1 && b.1 == a.1) || (b.1 == 1 && b.0 == a.0)
}

fn broadcast_apply<F>(a: &Array2<f64>, b: &Array2<f64>, f: F) -> Array2<f64>
where
    F: Fn(f64, f64) -> f64,
{
    let (r, c) = a.dim();
    let mut out = a.clone();
    if b.dim() == (r, c) {
        out.zip_mut_with(b, |x, &y| *x = f(*x, y));
    } else if b.nrows() == 1 {
        for mut row in out.rows_mut() {
            row.zip_mut_with(&b.row(0), |x, &y| *x = f(*x, y));
        }
    } else {
        for (mut row, &y) in out.rows_mut().into_iter().zip(b.column(0)) {
            row.map_inplace(|x| *x = f(*x, y));
        }
    }
    out
}

/// Reduce an output-shaped gradient back to the shape of a broadcast input.
fn reduce_to(g: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    if g.dim() == shape {
        g.clone()
    } else if shape.0 == 1 {
        g.sum_axis(Axis(0)).insert_axis(Axis(0))
    } else {
        g.sum_axis(Axis(1)).insert_axis(Axis(1))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id].value.dim()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        assert_eq!(self.shape(id), (1, 1), "node is not a scalar");
        self.nodes[id].value[[0, 0]]
    }

    fn push(&mut self, op: Op, value: Array2<f64>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn zeros(&mut self, shape: (usize, usize)) -> NodeId {
        self.constant(Array2::zeros(shape))
    }

    /// A trainable leaf; its adjoint is available after backward.
    pub fn param(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Param, value, true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(broadcast_ok(sa, sb), "add: incompatible {:?} vs {:?}", sa, sb);
        let v = broadcast_apply(&self.nodes[a].value, &self.nodes[b].value, |x, y| x + y);
        let g = self.rg(a) || self.rg(b);
        self.push(Op::Add(a, b), v, g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(broadcast_ok(sa, sb), "sub: incompatible {:?} vs {:?}", sa, sb);
        let v = broadcast_apply(&self.nodes[a].value, &self.nodes[b].value, |x, y| x - y);
        let g = self.rg(a) || self.rg(b);
        self.push(Op::Sub(a, b), v, g)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -&self.nodes[a].value;
        let g = self.rg(a);
        self.push(Op::Neg(a), v, g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(broadcast_ok(sa, sb), "mul: incompatible {:?} vs {:?}", sa, sb);
        let v = broadcast_apply(&self.nodes[a].value, &self.nodes[b].value, |x, y| x * y);
        let g = self.rg(a) || self.rg(b);
        self.push(Op::Mul(a, b), v, g)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        let g = self.rg(a);
        self.push(Op::Scale(a, c), v, g)
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: f64) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(broadcast_ok(sa, sb), "add_scaled: incompatible {:?} vs {:?}", sa, sb);
        let v = broadcast_apply(&self.nodes[a].value, &self.nodes[b].value, |x, y| x + c * y);
        let g = self.rg(a) || self.rg(b);
        self.push(Op::AddScaled(a, b, c), v, g)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.1, sb.0, "matmul: inner dims {:?} vs {:?}", sa, sb);
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        let g = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), v, g)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.t().to_owned();
        let g = self.rg(a);
        self.push(Op::Transpose(a), v, g)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::tanh);
        let g = self.rg(a);
        self.push(Op::Tanh(a), v, g)
    }

    pub fn pow(&mut self, a: NodeId, p: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.powf(p));
        let g = self.rg(a);
        self.push(Op::Pow(a, p), v, g)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.nodes[a].value.sum());
        let g = self.rg(a);
        self.push(Op::Sum(a), v, g)
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        let g = self.rg(a);
        self.push(Op::RowSum(a), v, g)
    }

    pub fn trace(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(r, c, "trace: matrix must be square, got {}x{}", r, c);
        let t: f64 = self.nodes[a].value.diag().sum();
        let v = Array2::from_elem((1, 1), t);
        let g = self.rg(a);
        self.push(Op::Trace(a), v, g)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.0, sb.0, "concat_cols: row counts {:?} vs {:?}", sa, sb);
        let mut v = Array2::zeros((sa.0, sa.1 + sb.1));
        v.slice_mut(s![.., ..sa.1]).assign(&self.nodes[a].value);
        v.slice_mut(s![.., sa.1..]).assign(&self.nodes[b].value);
        let g = self.rg(a) || self.rg(b);
        self.push(Op::ConcatCols(a, b), v, g)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let sa = self.shape(a);
        assert!(start < end && end <= sa.1, "slice_cols: range {}..{} out of {:?}", start, end, sa);
        let v = self.nodes[a].value.slice(s![.., start..end]).to_owned();
        let g = self.rg(a);
        self.push(Op::SliceCols(a, start, end), v, g)
    }

    /// Convenience: squared Frobenius norm of a node -> 1x1.
    pub fn squared_norm(&mut self, a: NodeId) -> NodeId {
        let sq = self.mul(a, a);
        self.sum(sq)
    }

    /// Convenience: per-row squared Euclidean norm -> (r,1).
    pub fn row_squared_norm(&mut self, a: NodeId) -> NodeId {
        let sq = self.mul(a, a);
        self.row_sum(sq)
    }

    /// Convenience: batch mean of a (B,1) column -> 1x1.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.shape(a).0 as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Reverse pass from a scalar objective. Accumulation order is the
    /// fixed reverse node order, so results are bitwise deterministic.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let (r, c) = self.shape(output);
        if (r, c) != (1, 1) {
            return Err(NhoError::NonScalarObjective(r, c));
        }
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        adj[output] = Some(Array2::from_elem((1, 1), 1.0));
        for id in (0..=output).rev() {
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                adj[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut adj);
            adj[id] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn accumulate(&self, adj: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut adj[id] {
            Some(a) => *a += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: NodeId, g: &Array2<f64>, adj: &mut [Option<Array2<f64>>]) {
        match self.nodes[id].op.clone() {
            Op::Constant | Op::Param => {}
            Op::Add(a, b) => {
                self.accumulate(adj, a, g.clone());
                self.accumulate(adj, b, reduce_to(g, self.shape(b)));
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, a, g.clone());
                self.accumulate(adj, b, -reduce_to(g, self.shape(b)));
            }
            Op::Neg(a) => self.accumulate(adj, a, -g),
            Op::Mul(a, b) => {
                let gb_full = broadcast_apply(g, &self.nodes[a].value, |x, y| x * y);
                let ga = broadcast_apply(g, &self.nodes[b].value, |x, y| x * y);
                self.accumulate(adj, a, ga);
                self.accumulate(adj, b, reduce_to(&gb_full, self.shape(b)));
            }
            Op::Scale(a, c) => self.accumulate(adj, a, g * c),
            Op::AddScaled(a, b, c) => {
                self.accumulate(adj, a, g.clone());
                self.accumulate(adj, b, reduce_to(g, self.shape(b)) * c);
            }
            Op::MatMul(a, b) => {
                self.accumulate(adj, a, g.dot(&self.nodes[b].value.t()));
                self.accumulate(adj, b, self.nodes[a].value.t().dot(g));
            }
            Op::Transpose(a) => self.accumulate(adj, a, g.t().to_owned()),
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                let ga = g * &y.mapv(|v| 1.0 - v * v);
                self.accumulate(adj, a, ga);
            }
            Op::Pow(a, p) => {
                let ga = g * &self.nodes[a].value.mapv(|v| p * v.powf(p - 1.0));
                self.accumulate(adj, a, ga);
            }
            Op::Sum(a) => {
                let sa = self.shape(a);
                self.accumulate(adj, a, Array2::from_elem(sa, g[[0, 0]]));
            }
            Op::RowSum(a) => {
                let sa = self.shape(a);
                let ga = g.broadcast(sa).unwrap().to_owned();
                self.accumulate(adj, a, ga);
            }
            Op::Trace(a) => {
                let n = self.shape(a).0;
                let ga = Array2::from_diag_elem(n, g[[0, 0]]);
                self.accumulate(adj, a, ga);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.shape(a).1;
                self.accumulate(adj, a, g.slice(s![.., ..ca]).to_owned());
                self.accumulate(adj, b, g.slice(s![.., ca..]).to_owned());
            }
            Op::SliceCols(a, start, end) => {
                let mut ga = Array2::zeros(self.shape(a));
                ga.slice_mut(s![.., start..end]).assign(g);
                self.accumulate(adj, a, ga);
            }
        }
    }

    /// Gradient of a scalar objective with respect to a set of parameter
    /// leaves. Errors if the objective is not 1x1.
    pub fn grad(&self, output: NodeId, params: &[NodeId]) -> Result<Vec<Array2<f64>>> {
        let grads = self.backward(output)?;
        Ok(params
            .iter()
            .map(|&p| grads.get(p, self.shape(p)))
            .collect())
    }

    /// Forward-mode tangent propagation from `input` (seeded with `seed`)
    /// to `output`. Tangents are recorded as ordinary primitives, so the
    /// result stays differentiable with respect to any parameters that
    /// feed the segment.
    pub fn jvp(&mut self, output: NodeId, input: NodeId, seed: NodeId) -> Result<NodeId> {
        if self.shape(seed) != self.shape(input) {
            return Err(NhoError::shape(
                "jvp seed",
                format!("{:?}", self.shape(input)),
                format!("{:?}", self.shape(seed)),
            ));
        }
        let mut tangents: Vec<Option<NodeId>> = vec![None; output + 1];
        tangents[input] = Some(seed);
        for id in (input + 1)..=output {
            let t = self.tangent_of(id, &tangents);
            tangents[id] = t;
        }
        Ok(match tangents[output] {
            Some(t) => t,
            None => {
                let sh = self.shape(output);
                self.zeros(sh)
            }
        })
    }

    fn tangent_of(&mut self, id: NodeId, tangents: &[Option<NodeId>]) -> Option<NodeId> {
        let t = |n: NodeId| -> Option<NodeId> { tangents.get(n).copied().flatten() };
        match self.nodes[id].op.clone() {
            Op::Constant | Op::Param => None,
            Op::Add(a, b) => match (t(a), t(b)) {
                (Some(ta), Some(tb)) => Some(self.add(ta, tb)),
                (Some(ta), None) => Some(self.lift(ta, id)),
                (None, Some(tb)) => Some(self.lift(tb, id)),
                (None, None) => None,
            },
            Op::Sub(a, b) => match (t(a), t(b)) {
                (Some(ta), Some(tb)) => Some(self.sub(ta, tb)),
                (Some(ta), None) => Some(self.lift(ta, id)),
                (None, Some(tb)) => {
                    let lifted = self.lift(tb, id);
                    Some(self.neg(lifted))
                }
                (None, None) => None,
            },
            Op::Neg(a) => t(a).map(|ta| self.neg(ta)),
            Op::Mul(a, b) => {
                let term_a = t(a).map(|ta| self.mul(ta, b));
                let term_b = t(b).map(|tb| self.mul(a, tb));
                match (term_a, term_b) {
                    (Some(x), Some(y)) => Some(self.add(x, y)),
                    (Some(x), None) => Some(x),
                    (None, Some(y)) => Some(y),
                    (None, None) => None,
                }
            }
            Op::Scale(a, c) => t(a).map(|ta| self.scale(ta, c)),
            Op::AddScaled(a, b, c) => match (t(a), t(b)) {
                (Some(ta), Some(tb)) => Some(self.add_scaled(ta, tb, c)),
                (Some(ta), None) => Some(self.lift(ta, id)),
                (None, Some(tb)) => {
                    let lifted = self.lift(tb, id);
                    Some(self.scale(lifted, c))
                }
                (None, None) => None,
            },
            Op::MatMul(a, b) => {
                let term_a = t(a).map(|ta| self.matmul(ta, b));
                let term_b = t(b).map(|tb| self.matmul(a, tb));
                match (term_a, term_b) {
                    (Some(x), Some(y)) => Some(self.add(x, y)),
                    (Some(x), None) => Some(x),
                    (None, Some(y)) => Some(y),
                    (None, None) => None,
                }
            }
            Op::Transpose(a) => t(a).map(|ta| self.transpose(ta)),
            Op::Tanh(a) => t(a).map(|ta| {
                // tanh'(z) = 1 - tanh(z)^2, expressed through the output node
                let y = id;
                let sq = self.mul(y, y);
                let sh = self.shape(y);
                let ones = self.constant(Array2::ones(sh));
                let d = self.sub(ones, sq);
                self.mul(d, ta)
            }),
            Op::Pow(a, p) => t(a).map(|ta| {
                let dp = self.pow(a, p - 1.0);
                let prod = self.mul(dp, ta);
                self.scale(prod, p)
            }),
            Op::Sum(a) => t(a).map(|ta| self.sum(ta)),
            Op::RowSum(a) => t(a).map(|ta| self.row_sum(ta)),
            Op::Trace(a) => t(a).map(|ta| self.trace(ta)),
            Op::ConcatCols(a, b) => {
                let (ta, tb) = (t(a), t(b));
                if ta.is_none() && tb.is_none() {
                    return None;
                }
                let ta = ta.unwrap_or_else(|| {
                    let sh = self.shape(a);
                    self.zeros(sh)
                });
                let tb = tb.unwrap_or_else(|| {
                    let sh = self.shape(b);
                    self.zeros(sh)
                });
                Some(self.concat_cols(ta, tb))
            }
            Op::SliceCols(a, start, end) => t(a).map(|ta| self.slice_cols(ta, start, end)),
        }
    }

    /// Broadcast a tangent of a broadcast-shaped operand up to the shape of
    /// node `like` (tangent of `full + broadcast` where only the broadcast
    /// side varies).
    fn lift(&mut self, tangent: NodeId, like: NodeId) -> NodeId {
        let sh_t = self.shape(tangent);
        let sh_l = self.shape(like);
        if sh_t == sh_l {
            tangent
        } else {
            let z = self.zeros(sh_l);
            self.add(z, tangent)
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Jacobian of a tape-expressible map at `input`, as an m x d matrix of
/// values. `f` receives the tape and the input node (1 x d) and must return
/// the output node (1 x m).
pub fn jacobian<F>(f: F, input: &[f64]) -> Result<Array2<f64>>
where
    F: Fn(&mut Tape, NodeId) -> NodeId,
{
    let d = input.len();
    let mut tape = Tape::new();
    let x = tape.param(Array2::from_shape_vec((1, d), input.to_vec()).unwrap());
    let y = f(&mut tape, x);
    let m = tape.shape(y);
    if m.0 != 1 {
        return Err(NhoError::shape("jacobian output", "1xM", format!("{}x{}", m.0, m.1)));
    }
    let m = m.1;
    let mut jac = Array2::zeros((m, d));
    for j in 0..d {
        let mut seed = Array2::zeros((1, d));
        seed[[0, j]] = 1.0;
        let seed = tape.constant(seed);
        let col = tape.jvp(y, x, seed)?;
        jac.column_mut(j).assign(&tape.value(col).row(0));
    }
    Ok(jac)
}
