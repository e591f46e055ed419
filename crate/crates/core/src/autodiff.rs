//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value and a reference
//! to its inputs, so nodes are stored in topological order by construction.
//! [`Tape::backward`] walks the nodes once in reverse and adds the resulting
//! gradients into each node's gradient buffer. Calling it twice without
//! [`Tape::zero_grads`] accumulates, which is how a loss and a regulariser
//! can be differentiated in separate passes.
//!
//! Broadcasting follows the trailing-dimension rule only: the smaller operand
//! must either hold a single value or have a shape equal to the trailing
//! dimensions of the larger one.

use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Log,
    Exp,
    Neg,
    Abs,
    Relu,
    /// `ln(1 + e^x)`, evaluated stably.
    Softplus,
    /// `ln Γ(x)`; derivative is the digamma function.
    LnGamma,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    Reduce {
        op: ReduceOp,
        x: Var,
        axis: Option<usize>,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Reshape(Var),
    Slice {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A single recording of a forward computation. One tape per training step;
/// tapes are not `Sync` by contract (they are only ever mutated through
/// `&mut self`).
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// How `small` is laid over `big` for a broadcast binary op.
fn broadcast_ok(big: &[usize], small: &[usize]) -> bool {
    if numel(small) == 1 {
        return true;
    }
    let trimmed: &[usize] = {
        let lead = small.iter().take_while(|&&d| d == 1).count();
        &small[lead..]
    };
    trimmed.len() <= big.len() && big[big.len() - trimmed.len()..] == *trimmed
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

    /// Drops every recorded node.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf carrying the tensor's value and `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a leaf that always requires a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(Error::shape(format!(
                "constant of shape {shape:?} given {} values",
                value.len()
            )));
        }
        Ok(self.push(shape.to_vec(), value, Op::Leaf, false))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Vec::new(), vec![value], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Copies the node's value out as a tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::from_vec(&n.shape, n.value.clone())
            .or_else(|_| Tensor::from_vec(&[n.value.len()], n.value.clone()))
            .expect("node shapes are validated on construction")
    }

    /// Adds this node's gradient into `t`'s gradient buffer. No-op when the
    /// node received no gradient.
    pub fn accumulate_grad_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul of {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape(format!("transpose of rank-{} tensor", s.len())));
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose_raw(self.value(x), r, c);
        let rg = self.rg(&[x]);
        Ok(self.push(vec![c, r], out, Op::Transpose(x), rg))
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let xs = self.value(x);
        let out: Vec<f64> = match op {
            UnaryOp::Log | UnaryOp::LnGamma => {
                if let Some(bad) = xs.iter().find(|&&v| !(v > 0.0)) {
                    return Err(Error::domain(format!("{op:?} of non-positive value {bad}")));
                }
                if op == UnaryOp::Log {
                    xs.iter().map(|v| v.ln()).collect()
                } else {
                    xs.iter().map(|&v| ln_gamma(v)).collect()
                }
            }
            UnaryOp::Sigmoid => xs.iter().map(|&v| sigmoid(v)).collect(),
            UnaryOp::Exp => xs.iter().map(|v| v.exp()).collect(),
            UnaryOp::Neg => xs.iter().map(|v| -v).collect(),
            UnaryOp::Abs => xs.iter().map(|v| v.abs()).collect(),
            UnaryOp::Relu => xs.iter().map(|&v| v.max(0.0)).collect(),
            UnaryOp::Softplus => xs.iter().map(|&v| softplus(v)).collect(),
            UnaryOp::Square => xs.iter().map(|v| v * v).collect(),
        };
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Unary(op, x), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = if sa == sb || (numel(&sa) >= numel(&sb) && broadcast_ok(&sa, &sb)) {
            sa.clone()
        } else if broadcast_ok(&sb, &sa) {
            sb.clone()
        } else {
            return Err(Error::shape(format!("cannot broadcast {sa:?} with {sb:?}")));
        };
        let n = numel(&out_shape);
        let (va, vb) = (self.value(a), self.value(b));
        let (na, nb) = (va.len(), vb.len());
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
            BinaryOp::Div => |x: f64, y: f64| x / y,
        };
        let out: Vec<f64> = if na == n && nb == n {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(va[i % na], vb[i % nb])).collect()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(out_shape, out, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn reduce(&mut self, op: ReduceOp, x: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let xs = self.value(x);
        let (out_shape, out) = match axis {
            None => {
                let s: f64 = xs.iter().sum();
                let v = match op {
                    ReduceOp::Sum => s,
                    ReduceOp::Mean => s / xs.len() as f64,
                };
                (Vec::new(), vec![v])
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::shape(format!(
                        "axis {ax} out of range for shape {shape:?}"
                    )));
                }
                let (outer, len, inner) = axis_split(&shape, ax);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += xs[base + i];
                        }
                    }
                }
                if op == ReduceOp::Mean {
                    out.iter_mut().for_each(|v| *v /= len as f64);
                }
                let mut s = shape.clone();
                s.remove(ax);
                (s, out)
            }
        };
        let rg = self.rg(&[x]);
        Ok(self.push(out_shape, out, Op::Reduce { op, x, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, None)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, None)
    }

    /// `scale * x`.
    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * scale).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, Op::Affine { x, scale }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    /// Contiguous flat range `[start, start + numel(shape))` of `x`, viewed as `shape`.
    pub fn slice(&mut self, x: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let len = numel(shape);
        let total = self.value(x).len();
        if start + len > total {
            return Err(Error::shape(format!(
                "slice [{start}, {}) out of range for {total} values",
                start + len
            )));
        }
        let out = self.value(x)[start..start + len].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), out, Op::Slice { x, start }, rg))
    }

    /// Row `i` of a rank-2 node, as a rank-1 node.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || i >= s[0] {
            return Err(Error::shape(format!("row {i} of shape {s:?}")));
        }
        self.slice(x, i * s[1], &[s[1]])
    }

    /// Flat concatenation of rank-1 (or any) nodes into a rank-1 node.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat of nothing"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        let n = out.len();
        Ok(self.push(vec![n], out, Op::Concat(parts.to_vec()), rg))
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients are added to any
    /// already present from earlier calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = pending[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            for (input, contrib) in self.local_grads(id, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut pending[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` against upstream gradient `g`.
    fn local_grads(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut out = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    // dA = dC · Bᵀ
                    let bt = transpose_raw(self.value(*b), k, n);
                    out.push((*a, matmul_raw(g, &bt, m, n, k)));
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · dC
                    let at = transpose_raw(self.value(*a), m, k);
                    out.push((*b, matmul_raw(&at, g, k, m, n)));
                }
                out
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                vec![(*x, transpose_raw(g, s[1], s[0]))]
            }
            Op::Unary(op, x) => {
                let xs = self.value(*x);
                let ys = &node.value;
                let d: Vec<f64> = match op {
                    UnaryOp::Sigmoid => ys.iter().zip(g).map(|(y, g)| g * y * (1.0 - y)).collect(),
                    UnaryOp::Log => xs.iter().zip(g).map(|(x, g)| g / x).collect(),
                    UnaryOp::Exp => ys.iter().zip(g).map(|(y, g)| g * y).collect(),
                    UnaryOp::Neg => g.iter().map(|g| -g).collect(),
                    UnaryOp::Abs => xs.iter().zip(g).map(|(x, g)| g * sign(*x)).collect(),
                    UnaryOp::Relu => xs
                        .iter()
                        .zip(g)
                        .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    UnaryOp::Softplus => xs.iter().zip(g).map(|(x, g)| g * sigmoid(*x)).collect(),
                    UnaryOp::LnGamma => xs.iter().zip(g).map(|(x, g)| g * digamma(*x)).collect(),
                    UnaryOp::Square => xs.iter().zip(g).map(|(x, g)| 2.0 * g * x).collect(),
                };
                vec![(*x, d)]
            }
            Op::Binary(op, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (na, nb) = (va.len(), vb.len());
                let mut ga = vec![0.0; na];
                let mut gb = vec![0.0; nb];
                for (i, &gi) in g.iter().enumerate() {
                    let (x, y) = (va[i % na], vb[i % nb]);
                    let (dx, dy) = match op {
                        BinaryOp::Add => (gi, gi),
                        BinaryOp::Sub => (gi, -gi),
                        BinaryOp::Mul => (gi * y, gi * x),
                        BinaryOp::Div => (gi / y, -gi * x / (y * y)),
                    };
                    ga[i % na] += dx;
                    gb[i % nb] += dy;
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Reduce { op, x, axis } => {
                let shape = self.shape(*x);
                let n = numel(shape);
                match axis {
                    None => {
                        let v = match op {
                            ReduceOp::Sum => g[0],
                            ReduceOp::Mean => g[0] / n as f64,
                        };
                        vec![(*x, vec![v; n])]
                    }
                    Some(ax) => {
                        let (outer, len, inner) = axis_split(shape, *ax);
                        let div = match op {
                            ReduceOp::Sum => 1.0,
                            ReduceOp::Mean => len as f64,
                        };
                        let mut d = vec![0.0; n];
                        for o in 0..outer {
                            for l in 0..len {
                                let base = (o * len + l) * inner;
                                for i in 0..inner {
                                    d[base + i] = g[o * inner + i] / div;
                                }
                            }
                        }
                        vec![(*x, d)]
                    }
                }
            }
            Op::Affine { x, scale } => vec![(*x, g.iter().map(|g| g * scale).collect())],
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Slice { x, start } => {
                let mut d = vec![0.0; self.value(*x).len()];
                d[*start..*start + g.len()].copy_from_slice(g);
                vec![(*x, d)]
            }
            Op::Concat(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = self.value(p).len();
                        let d = g[off..off + len].to_vec();
                        off += len;
                        (p, d)
                    })
                    .collect()
            }
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn axis_split(shape: &[usize], ax: usize) -> (usize, usize, usize) {
    (
        shape[..ax].iter().product(),
        shape[ax],
        shape[ax + 1..].iter().product(),
    )
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// Central finite-difference gradient check.
///
/// Runs `f` on a fresh tape with `x` as a gradient-carrying leaf, takes the
/// analytic gradient, then compares it per coordinate against
/// `(f(x+eps) - f(x-eps)) / (2 eps)`. Returns the largest relative error,
/// using `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::domain(format!("eps must be positive, got {eps}")));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t);
        let y = f(&mut tape, v)?;
        if tape.value(y).len() != 1 {
            return Err(Error::contract("grad_check needs a scalar-valued function"));
        }
        Ok(tape.item(y))
    };

    let mut tape = Tape::new();
    let xv = tape.param(x);
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let err = (a - numeric).abs() / denom;
        if err.is_nan() {
            return Ok(f64::INFINITY);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_value() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.leaf(&t(&[2, 2], &[3.0, -1.0, 2.5, 7.0]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p), &[3.0, -1.0, 2.5, 7.0]);

        let a = tape.leaf(&t(&[1, 2], &[1.0, 2.0]));
        let b = tape.leaf(&t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
        assert_eq!(tape.shape(c), &[1, 1]);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        let b = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn unary_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[0.0, 1.0, 2.0]));
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s)[0], 0.5);
        assert!((tape.value(s)[2] - 0.880797).abs() < 1e-6);
        let one = tape.leaf(&t(&[1], &[1.0]));
        let l = tape.log(one).unwrap();
        assert_eq!(tape.value(l), &[0.0]);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn binary_values_and_broadcast_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let z = tape.leaf(&t(&[2], &[0.0, 0.0]));
        let s = tape.add(a, z).unwrap();
        assert_eq!(tape.value(s), &[1.0, 2.0]);
        let n = tape.leaf(&t(&[2], &[2.0, 4.0]));
        let d = tape.leaf(&t(&[2], &[2.0, 2.0]));
        let q = tape.div(n, d).unwrap();
        assert_eq!(tape.value(q), &[1.0, 2.0]);

        let m = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        let bad = tape.leaf(&t(&[2], &[0.0; 2]));
        assert!(matches!(tape.add(m, bad), Err(Error::Shape(_))));
        // smaller operand on the left also broadcasts
        let v = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        let r = tape.sub(v, m).unwrap();
        assert_eq!(tape.shape(r), &[2, 3]);
    }

    #[test]
    fn broadcast_gradient_is_column_sum() {
        let mut tape = Tape::new();
        let m = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let v = tape.param(&t(&[3], &[0.5, -0.5, 1.0]));
        let s = tape.add(m, v).unwrap();
        let w = tape
            .constant(&[2, 3], vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0])
            .unwrap();
        let p = tape.mul(s, w).unwrap();
        let loss = tape.sum(p).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[11.0, 22.0, 33.0]);

        let x = Tensor::new(&[3], Fill::Uniform { low: -1.0, high: 1.0, seed: 3 }).unwrap();
        let err = grad_check(
            |tape, v| {
                let m = tape.constant(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 5.0, -6.0])?;
                let s = tape.sub(m, v)?;
                let sq = tape.unary(UnaryOp::Square, s)?;
                tape.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.item(s), 6.0);
        let m = tape.leaf(&t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let r = tape.reduce(ReduceOp::Mean, m, Some(0)).unwrap();
        assert_eq!(tape.value(r), &[3.0, 5.0]);
        let r1 = tape.reduce(ReduceOp::Sum, m, Some(1)).unwrap();
        assert_eq!(tape.value(r1), &[4.0, 12.0]);
        assert!(matches!(
            tape.reduce(ReduceOp::Sum, m, Some(2)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn mean_gradient_is_one_over_n() {
        let mut tape = Tape::new();
        let x = tape.param(&t(&[5], &[1.0, -2.0, 3.0, 0.0, 9.0]));
        let m = tape.mean(x).unwrap();
        tape.backward(m).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 0.2));
    }

    #[test]
    fn backward_simple_rules() {
        let mut tape = Tape::new();
        let x = tape.param(&t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);

        let mut tape = Tape::new();
        let x = tape.param(&t(&[3], &[1.0, -2.0, 3.0]));
        let xx = tape.mul(x, x).unwrap();
        let s = tape.sum(xx).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(&t(&[2], &[1.0, 2.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        tape.zero_grads();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn grad_check_sum_and_sigmoid_at_zero() {
        let x = Tensor::new(&[4, 3], Fill::Uniform { low: -2.0, high: 2.0, seed: 1 }).unwrap();
        let err = grad_check(|tape, v| tape.sum(v), &x, 1e-5).unwrap();
        assert!(err < 1e-9);

        let zero = Tensor::new(&[5], Fill::Zeros).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&zero);
        let s = tape.sigmoid(v).unwrap();
        let l = tape.sum(s).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(v).unwrap().iter().all(|&g| g == 0.25));
        let err = grad_check(
            |tape, v| {
                let s = tape.sigmoid(v)?;
                tape.sum(s)
            },
            &zero,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_flags_near_singular_division() {
        // 1/x at x = 1e-4 with eps = 1e-5 sits close to the pole; the central
        // difference picks up a visible curvature error there.
        let x = t(&[1], &[1e-4]);
        let err = grad_check(
            |tape, v| {
                let one = tape.scalar(1.0);
                let q = tape.div(one, v)?;
                tape.sum(q)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-3, "expected eps sensitivity near the pole, got {err}");

        // Well away from the pole the same check is tight.
        let x = t(&[1], &[1.0]);
        let err = grad_check(
            |tape, v| {
                let one = tape.scalar(1.0);
                let q = tape.div(one, v)?;
                tape.sum(q)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn grad_check_rejects_non_scalar_output() {
        let x = t(&[2], &[1.0, 2.0]);
        assert!(matches!(
            grad_check(|_, v| Ok(v), &x, 1e-5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn slice_concat_reshape_route_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let r = tape.row(x, 1).unwrap();
        assert_eq!(tape.value(r), &[4.0, 5.0, 6.0]);
        let a = tape.slice(x, 0, &[2]).unwrap();
        let c = tape.concat(&[a, r]).unwrap();
        let w = tape.constant(&[5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let p = tape.mul(c, w).unwrap();
        let rs = tape.reshape(p, &[5, 1]).unwrap();
        let l = tape.sum(rs).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0, 0.0, 3.0, 4.0, 5.0]);
    }
}
