//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. It is rebuilt for
//! every training step and is confined to the thread that created it. Values
//! created with [`Tape::constant`] or [`Var::detach`] never receive gradient,
//! so anything computed from them alone is structurally cut off from the
//! parameters.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::exec::{gemm, Exec, MatRef};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MatMul(usize, usize),
    Scale(usize, f64),
    ScaleRows(usize, Vec<f64>),
    Tanh(usize),
    Silu(usize),
    Mse(usize, usize),
    Sum(usize),
    SumSquares(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    SegmentMean(usize, Vec<(usize, usize)>),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation recorder for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Records every parameter of `params` as a differentiable leaf.
    pub fn bind<'t>(&'t self, params: &ParamSet) -> Bound<'t> {
        let vars = params
            .iter()
            .map(|(name, value)| (name.to_string(), self.leaf(value.clone())))
            .collect();
        Bound { vars }
    }

    /// Records every parameter as a constant (no gradient path).
    pub fn bind_frozen<'t>(&'t self, params: &ParamSet) -> Bound<'t> {
        let vars = params
            .iter()
            .map(|(name, value)| (name.to_string(), self.constant(value.clone())))
            .collect();
        Bound { vars }
    }

    fn unary(&self, a: Var<'_>, op_name: &'static str, f: impl Fn(&Tensor) -> Result<Tensor>, op: Op) -> Result<Var<'_>> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.id];
            (f(&n.value)?, n.needs_grad)
        };
        let value = value.ensure_finite(op_name)?;
        Ok(self.push(value, op, needs))
    }

    fn binary(
        &self,
        a: Var<'_>,
        b: Var<'_>,
        op_name: &'static str,
        f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>,
        op: Op,
    ) -> Result<Var<'_>> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.id], &nodes[b.id]);
            (f(&na.value, &nb.value)?, na.needs_grad || nb.needs_grad)
        };
        let value = value.ensure_finite(op_name)?;
        Ok(self.push(value, op, needs))
    }

    fn nary(&self, ids: &[usize], op_name: &'static str, f: impl Fn(&[&Tensor]) -> Result<Tensor>, op: Op) -> Result<Var<'_>> {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor> = ids.iter().map(|&i| &nodes[i].value).collect();
            (f(&vals)?, ids.iter().any(|&i| nodes[i].needs_grad))
        };
        let value = value.ensure_finite(op_name)?;
        Ok(self.push(value, op, needs))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        self.nary(&ids, "concat_cols", concat_cols_values, Op::ConcatCols(ids.clone()))
    }

    /// Stacks tensors along the leading axis.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        self.nary(&ids, "concat_rows", Tensor::concat_rows, Op::ConcatRows(ids.clone()))
    }

    /// Runs the backward pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            // interior gradients are dropped once propagated; leaves keep theirs
            let Some(g) = grads[id].take() else { continue };
            let mut send = |target: usize, contribution: Tensor| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(contribution.data())
                        .for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => unreachable!("leaves are skipped above"),
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    send(*a, g.mul(val(*b))?);
                    send(*b, g.mul(val(*a))?);
                }
                Op::AddRow(a, b) => {
                    send(*a, g.clone());
                    let cols = val(*b).len();
                    let mut acc = vec![0.0; cols];
                    for row in g.data().chunks(cols) {
                        acc.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    send(*b, Tensor::new(val(*b).shape().to_vec(), acc)?);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let gm = MatRef::new(g.data(), m, n);
                    if nodes[*a].needs_grad {
                        let da = gemm(Exec::default(), gm, MatRef::new(bv.data(), k, n).t());
                        send(*a, Tensor::matrix(m, k, da)?);
                    }
                    if nodes[*b].needs_grad {
                        let db = gemm(Exec::default(), MatRef::new(av.data(), m, k).t(), gm);
                        send(*b, Tensor::matrix(k, n, db)?);
                    }
                }
                Op::Scale(a, s) => send(*a, g.scale(*s)),
                Op::ScaleRows(a, f) => send(*a, g.scale_rows(f)?),
                Op::Tanh(a) => {
                    let y = &node.value;
                    send(*a, g.zip_map(y, "tanh'", |gv, yv| gv * (1.0 - yv * yv))?);
                }
                Op::Silu(a) => {
                    send(
                        *a,
                        g.zip_map(val(*a), "silu'", |gv, x| {
                            let s = sigmoid(x);
                            gv * s * (1.0 + x * (1.0 - s))
                        })?,
                    );
                }
                Op::Mse(a, b) => {
                    let n = val(*a).len() as f64;
                    let go = g.item();
                    let d = val(*a).zip_map(val(*b), "mse'", |x, y| 2.0 * (x - y) * go / n)?;
                    send(*b, d.scale(-1.0));
                    send(*a, d);
                }
                Op::Sum(a) => send(*a, Tensor::full(val(*a).shape().to_vec(), g.item())),
                Op::SumSquares(a) => {
                    let go = g.item();
                    send(*a, val(*a).map(|x| 2.0 * x * go));
                }
                Op::ConcatCols(ids) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut off = 0;
                    for &i in ids {
                        let c = val(i).cols();
                        let mut part = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            part.extend_from_slice(&g.data()[r * total + off..r * total + off + c]);
                        }
                        off += c;
                        send(i, Tensor::new(val(i).shape().to_vec(), part)?);
                    }
                }
                Op::ConcatRows(ids) => {
                    let mut start = 0;
                    for &i in ids {
                        let r = val(i).rows();
                        let part = g.slice_rows(start, r)?.reshape(val(i).shape().to_vec())?;
                        start += r;
                        send(i, part);
                    }
                }
                Op::GatherRows(a, idx) => {
                    let src = val(*a);
                    let c = src.cols();
                    let mut acc = Tensor::zeros(src.shape().to_vec());
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut acc.data_mut()[i * c..(i + 1) * c];
                        dst.iter_mut().zip(g.row(r)).for_each(|(d, v)| *d += v);
                    }
                    send(*a, acc);
                }
                Op::SegmentMean(a, segs) => {
                    let src = val(*a);
                    let c = src.cols();
                    let mut acc = Tensor::zeros(src.shape().to_vec());
                    for (s, &(start, len)) in segs.iter().enumerate() {
                        let inv = 1.0 / len as f64;
                        for r in start..start + len {
                            let dst = &mut acc.data_mut()[r * c..(r + 1) * c];
                            dst.iter_mut().zip(g.row(s)).for_each(|(d, v)| *d += v * inv);
                        }
                    }
                    send(*a, acc);
                }
                Op::Reshape(a) => send(*a, g.reshape(val(*a).shape().to_vec())?),
            }
        }
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::NonFinite("backward"));
            }
        }
        Ok(Gradients { grads })
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn concat_cols_values(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_cols of zero tensors"))?;
    let rows = first.rows();
    for p in parts {
        if p.shape().len() != 2 || p.rows() != rows {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: first.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::matrix(rows, total, data)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    /// Whether any differentiable leaf reaches this value.
    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    /// Same value, recorded as a constant: the stop-gradient.
    pub fn detach(&self) -> Var<'t> {
        let v = self.value();
        self.tape.constant(v)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(self, other, "add", |a, b| a.add(b), Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(self, other, "sub", |a, b| a.sub(b), Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(self, other, "mul", |a, b| a.mul(b), Op::Mul(self.id, other.id))
    }

    /// Adds a bias row to every row of `self`.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(
            self,
            bias,
            "add_row",
            |a, b| {
                let c = a.cols();
                if b.len() != c {
                    return Err(Error::ShapeMismatch {
                        op: "add_row",
                        left: a.shape().to_vec(),
                        right: b.shape().to_vec(),
                    });
                }
                let mut out = a.clone();
                for row in out.data_mut().chunks_mut(c) {
                    row.iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
                }
                Ok(out)
            },
            Op::AddRow(self.id, bias.id),
        )
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape
            .binary(self, other, "matmul", |a, b| a.matmul(b), Op::MatMul(self.id, other.id))
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.tape
            .unary(self, "scale", |a| Ok(a.scale(s)), Op::Scale(self.id, s))
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(self, factors: &[f64]) -> Result<Var<'t>> {
        self.tape.unary(
            self,
            "scale_rows",
            |a| a.scale_rows(factors),
            Op::ScaleRows(self.id, factors.to_vec()),
        )
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.tape
            .unary(self, "tanh", |a| Ok(a.map(f64::tanh)), Op::Tanh(self.id))
    }

    pub fn silu(self) -> Result<Var<'t>> {
        self.tape
            .unary(self, "silu", |a| Ok(a.map(|x| x * sigmoid(x))), Op::Silu(self.id))
    }

    /// Mean squared error against `target`; a scalar.
    pub fn mse(self, target: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(
            self,
            target,
            "mse",
            |a, b| Ok(Tensor::scalar(a.mse(b)?)),
            Op::Mse(self.id, target.id),
        )
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.tape
            .unary(self, "sum", |a| Ok(Tensor::scalar(a.sum())), Op::Sum(self.id))
    }

    /// Squared Euclidean norm; a scalar.
    pub fn sum_squares(self) -> Result<Var<'t>> {
        self.tape.unary(
            self,
            "sum_squares",
            |a| Ok(Tensor::scalar(a.data().iter().map(|v| v * v).sum())),
            Op::SumSquares(self.id),
        )
    }

    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        self.tape.unary(
            self,
            "gather_rows",
            |a| a.gather_rows(idx),
            Op::GatherRows(self.id, idx.to_vec()),
        )
    }

    /// Row means over each `(start, len)` segment; one output row per segment.
    pub fn segment_mean(self, segments: &[(usize, usize)]) -> Result<Var<'t>> {
        self.tape.unary(
            self,
            "segment_mean",
            |a| {
                let c = a.cols();
                let mut data = Vec::with_capacity(segments.len() * c);
                for &(start, len) in segments {
                    if len == 0 || start + len > a.rows() {
                        return Err(Error::invalid(format!(
                            "segment {start}+{len} outside {} rows",
                            a.rows()
                        )));
                    }
                    let mut acc = vec![0.0; c];
                    for r in start..start + len {
                        acc.iter_mut().zip(a.row(r)).for_each(|(s, v)| *s += v);
                    }
                    data.extend(acc.into_iter().map(|s| s / len as f64));
                }
                Tensor::matrix(segments.len(), c, data)
            },
            Op::SegmentMean(self.id, segments.to_vec()),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape
            .unary(self, "reshape", |a| a.reshape(shape.to_vec()), Op::Reshape(self.id))
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; `None` when no path exists.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient, or zeros when the loss does not depend on `var`.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

/// Parameters recorded on a tape, addressable by name.
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::scalar(3.0));
        let loss = p.mul(p).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[6.0]);
    }

    #[test]
    fn mse_of_linear_map_at_zero_weights() {
        // loss = mse(W x, y) at W = 0 has gradient -(2/n) y xᵀ
        let tape = Tape::new();
        let w = tape.leaf(Tensor::zeros(vec![2, 3]));
        let x = tape.constant(Tensor::matrix(3, 1, vec![1.0, -2.0, 0.5]).unwrap());
        let y = tape.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let loss = w.matmul(x).unwrap().mse(y).unwrap();
        let g = tape.backward(loss).unwrap();
        let n = 2.0;
        let expect: Vec<f64> = [3.0, 4.0]
            .iter()
            .flat_map(|yi| [1.0, -2.0, 0.5].map(|xj| -(2.0 / n) * yi * xj))
            .collect();
        assert_eq!(g.get(w).unwrap().data(), &expect[..]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::zeros(vec![2]));
        assert!(matches!(tape.backward(p), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn detach_cuts_the_gradient_path() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::scalar(2.0));
        let q = p.mul(p).unwrap();
        let loss = q.detach().mul(p).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        // d/dp [stop(p²)·p] = p² = 4, not 3p² = 12
        assert_eq!(g.get(p).unwrap().data(), &[4.0]);
        assert!(!q.detach().requires_grad());
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let p = tape.leaf(Tensor::scalar(1.0));
        let loss = c.mul(p).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let tape = Tape::new();
            let w = tape.leaf(Tensor::randn(vec![4, 4], &mut rng));
            let x = tape.constant(Tensor::randn(vec![8, 4], &mut rng));
            let loss = x.matmul(w).unwrap().silu().unwrap().sum_squares().unwrap();
            tape.backward(loss).unwrap().get(w).unwrap().clone()
        };
        assert_eq!(run(), run());
    }
}
