//! Closed-world reverse-mode differentiation over rank ≤ 2 `f64` tensors.
//!
//! A [`Tape`] records one forward evaluation into a flat value arena; each
//! record knows its inputs and how to push a cotangent back to them.
//! [`Tape::backward`] walks the records in reverse and accumulates gradients
//! into the [`ParamStore`] the parameters were read from. Only the handful
//! of operations the decoder graph needs exist: matrix-vector product, add,
//! concat, scale, tanh, softmax, weighted sum, L1 distance and entropy.
//!
//! ```
//! use dpars::autodiff::{ParamStore, Tape, Tensor};
//!
//! let mut store = ParamStore::new();
//! let w = store.add("w", Tensor::matrix(1, 2, vec![3.0, -1.0]));
//! let mut tape = Tape::new();
//! let wn = tape.param(&store, w);
//! let x = tape.constant(&[2.0, 5.0]);
//! let y = tape.matvec(wn, x).unwrap();
//! let t = tape.constant(&[0.0]);
//! let loss = tape.l1_loss(y, t).unwrap();
//! tape.backward(loss, &mut store).unwrap();
//! assert_eq!(store.get(w).grad.data(), &[2.0, 5.0]);
//! ```

pub mod kernels;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major tensor; rank 1 (`[n]`) or rank 2 (`[rows, cols]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.len() > 2 || shape.contains(&0) {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("unsupported shape {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} needs {n} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor::new(vec![data.len()], data).expect("non-empty vector")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], data).expect("matrix shape")
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n]).expect("zeros shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `(rows, cols)`, treating a vector as a single column.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (*n, 1),
            [r, c] => (*r, *c),
            _ => unreachable!("rank checked at construction"),
        }
    }
}

/// Learnable tensor plus its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Constant,
    Param(ParamId),
    MatVec { m: usize, n: usize },
    Add,
    Concat,
    Scale(f64),
    Tanh,
    Clamp { lo: f64, hi: f64 },
    Softmax,
    WeightedSum,
    L1,
    Entropy,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatVec { .. } => "matvec",
            Op::Add => "add",
            Op::Concat => "concat",
            Op::Scale(_) => "scale",
            Op::Tanh => "tanh",
            Op::Clamp { .. } => "clamp",
            Op::Softmax => "softmax",
            Op::WeightedSum => "weighted_sum",
            Op::L1 => "l1_loss",
            Op::Entropy => "entropy",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: std::ops::Range<usize>,
    offset: usize,
    len: usize,
    shape: (usize, usize),
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TapeState {
    Recording,
    Consumed,
}

/// One forward evaluation, recorded for a single backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    inputs: Vec<NodeId>,
    values: Vec<f64>,
    grads: Vec<f64>,
    state: TapeState,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            inputs: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            state: TapeState::Recording,
        }
    }

    /// Clears every record; allocations are kept for reuse.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.inputs.clear();
        self.values.clear();
        self.grads.clear();
        self.state = TapeState::Recording;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        let n = &self.nodes[id.0];
        &self.values[n.offset..n.offset + n.len]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[0]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].shape
    }

    fn check_recording(&self) -> Result<()> {
        match self.state {
            TapeState::Recording => Ok(()),
            TapeState::Consumed => Err(Error::Tape(
                "tape already differentiated; reset before recording again".into(),
            )),
        }
    }

    /// Appends a node whose value is written by `fill` into a zeroed slot.
    fn push(
        &mut self,
        op: Op,
        inputs: &[NodeId],
        shape: (usize, usize),
        fill: impl FnOnce(&[f64], &[Node], &mut [f64]),
    ) -> Result<NodeId> {
        self.check_recording()?;
        let offset = self.values.len();
        let len = shape.0 * shape.1;
        let requires_grad = match op {
            Op::Param(_) => true,
            Op::Constant => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.values.resize(offset + len, 0.0);
        {
            let (prev, out) = self.values.split_at_mut(offset);
            fill(prev, &self.nodes, out);
        }
        if self.values[offset..].iter().any(|v| !v.is_finite()) {
            self.values.truncate(offset);
            return Err(Error::NonFinite { op: op.name() });
        }
        let start = self.inputs.len();
        self.inputs.extend_from_slice(inputs);
        self.nodes.push(Node {
            op,
            inputs: start..self.inputs.len(),
            offset,
            len,
            shape,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn slice<'a>(values: &'a [f64], nodes: &[Node], id: NodeId) -> &'a [f64] {
        let n = &nodes[id.0];
        &values[n.offset..n.offset + n.len]
    }

    fn vec_len(&self, op: &'static str, id: NodeId) -> Result<usize> {
        match self.nodes[id.0].shape {
            (n, 1) => Ok(n),
            s => Err(Error::Shape {
                op,
                detail: format!("expected a vector, got {s:?}"),
            }),
        }
    }

    /// Non-differentiable input vector.
    pub fn constant(&mut self, data: &[f64]) -> NodeId {
        self.push(Op::Constant, &[], (data.len(), 1), |_, _, out| {
            out.copy_from_slice(data)
        })
        .expect("finite constant on a recording tape")
    }

    /// Fallible form of [`Tape::constant`].
    pub fn try_constant(&mut self, data: &[f64]) -> Result<NodeId> {
        self.push(Op::Constant, &[], (data.len(), 1), |_, _, out| {
            out.copy_from_slice(data)
        })
    }

    /// Non-differentiable `[rows × cols]` matrix.
    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: &[f64]) -> Result<NodeId> {
        if rows * cols != data.len() || data.is_empty() {
            return Err(Error::Shape {
                op: "constant",
                detail: format!("{rows}x{cols} from {} values", data.len()),
            });
        }
        self.push(Op::Constant, &[], (rows, cols), |_, _, out| {
            out.copy_from_slice(data)
        })
    }

    /// Reads parameter `id` from `store` onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let value = &store.get(id).value;
        self.push(Op::Param(id), &[], value.dims(), |_, _, out| {
            out.copy_from_slice(value.data())
        })
        .expect("finite parameter on a recording tape")
    }

    /// `W x` for `W: [m × n]`, `x: [n]`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.nodes[w.0].shape;
        let xn = self.vec_len("matvec", x)?;
        if xn != n {
            return Err(Error::Shape {
                op: "matvec",
                detail: format!("W is {m}x{n}, x has {xn} entries"),
            });
        }
        self.push(Op::MatVec { m, n }, &[w, x], (m, 1), |v, nodes, out| {
            kernels::matvec(
                Self::slice(v, nodes, w),
                m,
                n,
                Self::slice(v, nodes, x),
                out,
            )
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a.0].shape, self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::Shape {
                op: "add",
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        self.push(Op::Add, &[a, b], sa, |v, nodes, out| {
            kernels::add(Self::slice(v, nodes, a), Self::slice(v, nodes, b), out)
        })
    }

    /// Stacks vectors end to end.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape {
                op: "concat",
                detail: "nothing to concatenate".into(),
            });
        }
        let mut total = 0;
        for &p in parts {
            total += self.vec_len("concat", p)?;
        }
        self.push(Op::Concat, parts, (total, 1), |v, nodes, out| {
            let mut k = 0;
            for &p in parts {
                let s = Self::slice(v, nodes, p);
                out[k..k + s.len()].copy_from_slice(s);
                k += s.len();
            }
        })
    }

    pub fn scale(&mut self, c: f64, x: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape;
        self.push(Op::Scale(c), &[x], shape, |v, nodes, out| {
            for (o, &xi) in out.iter_mut().zip(Self::slice(v, nodes, x)) {
                *o = c * xi;
            }
        })
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape;
        self.push(Op::Tanh, &[x], shape, |v, nodes, out| {
            kernels::tanh(Self::slice(v, nodes, x), out)
        })
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient passes where the input
    /// lies inside the interval.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let shape = self.nodes[x.0].shape;
        self.push(Op::Clamp { lo, hi }, &[x], shape, |v, nodes, out| {
            kernels::clamp(Self::slice(v, nodes, x), lo, hi, out)
        })
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.vec_len("softmax", x)?;
        self.push(Op::Softmax, &[x], (n, 1), |v, nodes, out| {
            kernels::softmax(Self::slice(v, nodes, x), out)
        })
    }

    /// `Σ_j weights[j] · vectors[j]`.
    pub fn weighted_sum(&mut self, weights: NodeId, vectors: &[NodeId]) -> Result<NodeId> {
        let k = self.vec_len("weighted_sum", weights)?;
        if k == 0 || k != vectors.len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                detail: format!("{k} weights for {} vectors", vectors.len()),
            });
        }
        let n = self.vec_len("weighted_sum", vectors[0])?;
        for &v in vectors {
            if self.vec_len("weighted_sum", v)? != n {
                return Err(Error::Shape {
                    op: "weighted_sum",
                    detail: "vectors differ in length".into(),
                });
            }
        }
        let mut ins = Vec::with_capacity(k + 1);
        ins.push(weights);
        ins.extend_from_slice(vectors);
        self.push(Op::WeightedSum, &ins, (n, 1), |v, nodes, out| {
            kernels::weighted_sum(
                Self::slice(v, nodes, weights),
                vectors.iter().map(|&id| Self::slice(v, nodes, id)),
                out,
            )
        })
    }

    /// `Σ |pred − target|`, a scalar.
    pub fn l1_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (sp, st) = (self.nodes[pred.0].shape, self.nodes[target.0].shape);
        if sp != st {
            return Err(Error::Shape {
                op: "l1_loss",
                detail: format!("{sp:?} vs {st:?}"),
            });
        }
        self.push(Op::L1, &[pred, target], (1, 1), |v, nodes, out| {
            out[0] = kernels::l1(Self::slice(v, nodes, pred), Self::slice(v, nodes, target))
        })
    }

    /// `−Σ p ln p` (natural log, `0 ln 0 = 0`), a scalar.
    pub fn entropy(&mut self, p: NodeId) -> Result<NodeId> {
        self.vec_len("entropy", p)?;
        if let Some(&bad) = self.value(p).iter().find(|&&v| v < 0.0) {
            return Err(Error::Tape(format!("entropy of negative probability {bad}")));
        }
        self.push(Op::Entropy, &[p], (1, 1), |v, nodes, out| {
            out[0] = kernels::entropy(Self::slice(v, nodes, p))
        })
    }

    /// Accumulates `d loss / d θ` into every parameter reachable from `loss`.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        self.backward_scaled(loss, 1.0, store)
    }

    /// As [`Tape::backward`] but for `seed · loss`; batch means use
    /// `seed = 1 / batch_size`.
    pub fn backward_scaled(&mut self, loss: NodeId, seed: f64, store: &mut ParamStore) -> Result<()> {
        self.check_recording()?;
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::Tape("backward called before a forward pass".into()));
        }
        if self.nodes[loss.0].len != 1 {
            return Err(Error::Tape(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.state = TapeState::Consumed;
        self.grads.clear();
        self.grads.resize(self.values.len(), 0.0);
        self.grads[self.nodes[loss.0].offset] = seed;

        for idx in (0..=loss.0).rev() {
            let node = self.nodes[idx].clone();
            if !node.requires_grad {
                continue;
            }
            let (before, rest) = self.grads.split_at_mut(node.offset);
            let g = &rest[..node.len];
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            let ins = &self.inputs[node.inputs.clone()];
            let nodes = &self.nodes;
            let values = &self.values;
            let gslot = |_: &mut [f64], id: NodeId| -> (usize, usize) {
                let n = &nodes[id.0];
                (n.offset, n.len)
            };
            match node.op {
                Op::Constant => {}
                Op::Param(pid) => {
                    let acc = store.get_mut(pid).grad.data_mut();
                    for (a, &gi) in acc.iter_mut().zip(g) {
                        *a += gi;
                    }
                }
                Op::MatVec { m, n } => {
                    let (w, x) = (ins[0], ins[1]);
                    if nodes[w.0].requires_grad {
                        let (o, l) = gslot(before, w);
                        kernels::outer_acc(g, Self::slice(values, nodes, x), &mut before[o..o + l]);
                    }
                    if nodes[x.0].requires_grad {
                        let (o, l) = gslot(before, x);
                        kernels::matvec_t_acc(
                            Self::slice(values, nodes, w),
                            m,
                            n,
                            g,
                            &mut before[o..o + l],
                        );
                    }
                }
                Op::Add => {
                    for &i in ins {
                        if nodes[i.0].requires_grad {
                            let (o, l) = gslot(before, i);
                            for (a, &gi) in before[o..o + l].iter_mut().zip(g) {
                                *a += gi;
                            }
                        }
                    }
                }
                Op::Concat => {
                    let mut k = 0;
                    for &i in ins {
                        let (o, l) = gslot(before, i);
                        if nodes[i.0].requires_grad {
                            for (a, &gi) in before[o..o + l].iter_mut().zip(&g[k..k + l]) {
                                *a += gi;
                            }
                        }
                        k += l;
                    }
                }
                Op::Scale(c) => {
                    let (o, l) = gslot(before, ins[0]);
                    for (a, &gi) in before[o..o + l].iter_mut().zip(g) {
                        *a += c * gi;
                    }
                }
                Op::Tanh => {
                    let y = &values[node.offset..node.offset + node.len];
                    let (o, l) = gslot(before, ins[0]);
                    for ((a, &gi), &yi) in before[o..o + l].iter_mut().zip(g).zip(y) {
                        *a += gi * (1.0 - yi * yi);
                    }
                }
                Op::Clamp { lo, hi } => {
                    let x = Self::slice(values, nodes, ins[0]);
                    let (o, l) = gslot(before, ins[0]);
                    for ((a, &gi), &xi) in before[o..o + l].iter_mut().zip(g).zip(x) {
                        if (lo..=hi).contains(&xi) {
                            *a += gi;
                        }
                    }
                }
                Op::Softmax => {
                    let y = &values[node.offset..node.offset + node.len];
                    let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    let (o, l) = gslot(before, ins[0]);
                    for ((a, &gi), &yi) in before[o..o + l].iter_mut().zip(g).zip(y) {
                        *a += yi * (gi - gy);
                    }
                }
                Op::WeightedSum => {
                    let w = ins[0];
                    let wv = Self::slice(values, nodes, w);
                    if nodes[w.0].requires_grad {
                        let (o, _) = gslot(before, w);
                        for (j, &v) in ins[1..].iter().enumerate() {
                            let vv = Self::slice(values, nodes, v);
                            let s: f64 = g.iter().zip(vv).map(|(a, b)| a * b).sum();
                            before[o + j] += s;
                        }
                    }
                    for (j, &v) in ins[1..].iter().enumerate() {
                        if nodes[v.0].requires_grad {
                            let (o, l) = gslot(before, v);
                            for (a, &gi) in before[o..o + l].iter_mut().zip(g) {
                                *a += wv[j] * gi;
                            }
                        }
                    }
                }
                Op::L1 => {
                    let g0 = g[0];
                    let (p, t) = (ins[0], ins[1]);
                    let pv = Self::slice(values, nodes, p);
                    let tv = Self::slice(values, nodes, t);
                    if nodes[p.0].requires_grad {
                        let (o, l) = gslot(before, p);
                        for k in 0..l {
                            before[o + k] += g0 * kernels::sign0(pv[k] - tv[k]);
                        }
                    }
                    if nodes[t.0].requires_grad {
                        let (o, l) = gslot(before, t);
                        for k in 0..l {
                            before[o + k] -= g0 * kernels::sign0(pv[k] - tv[k]);
                        }
                    }
                }
                Op::Entropy => {
                    let g0 = g[0];
                    let p = ins[0];
                    let pv = Self::slice(values, nodes, p);
                    let (o, l) = gslot(before, p);
                    for k in 0..l {
                        if pv[k] > 0.0 {
                            before[o + k] -= g0 * (pv[k].ln() + 1.0);
                        }
                    }
                }
            }
        }
        if let Some(p) = store.iter().find(|p| p.grad.data().iter().any(|g| !g.is_finite())) {
            return Err(Error::Tape(format!("non-finite gradient for parameter {}", p.name)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Value of `build` reduced to a scalar by a fixed linear functional.
    fn reduce(tape: &mut Tape, y: NodeId) -> NodeId {
        let n = tape.value(y).len();
        let c: Vec<f64> = (0..n).map(|i| 0.3 + 0.7 * ((i * 37 % 11) as f64 / 11.0) - 0.4).collect();
        let w = tape.constant_matrix(1, n, &c).unwrap();
        tape.matvec(w, y).unwrap()
    }

    /// Compare tape gradients of every input against central differences.
    fn check_op(inputs: &[Tensor], build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) -> f64 {
        let eval = |vals: &[Tensor]| {
            let mut store = ParamStore::new();
            let ids: Vec<_> = vals.iter().enumerate().map(|(i, t)| store.add(format!("p{i}"), t.clone())).collect();
            let mut tape = Tape::new();
            let nodes: Vec<_> = ids.iter().map(|&id| tape.param(&store, id)).collect();
            let y = build(&mut tape, &nodes);
            let s = reduce(&mut tape, y);
            (tape, s, store, ids)
        };
        let (mut tape, s, mut store, ids) = eval(inputs);
        tape.backward(s, &mut store).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for (k, id) in ids.iter().enumerate() {
            for j in 0..inputs[k].len() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[j] -= h;
                let (tp, sp, ..) = eval(&plus);
                let (tm, sm, ..) = eval(&minus);
                let fd = (tp.scalar(sp) - tm.scalar(sm)) / (2.0 * h);
                let g = store.get(*id).grad.data()[j];
                worst = worst.max((g - fd).abs() / g.abs().max(fd.abs()).max(1.0));
            }
        }
        worst
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let v = |d: &[f64]| Tensor::vector(d.to_vec());
        let x3 = v(&[0.4, -1.1, 0.7]);
        let y3 = v(&[-0.3, 0.9, 1.6]);
        let w = Tensor::matrix(2, 3, vec![0.5, -0.2, 0.1, 0.8, 0.3, -0.6]);
        type Build = Box<dyn Fn(&mut Tape, &[NodeId]) -> NodeId>;
        let cases: Vec<(&str, Vec<Tensor>, Build)> = vec![
            ("matvec", vec![w, x3.clone()], Box::new(|t, n| t.matvec(n[0], n[1]).unwrap())),
            ("add", vec![x3.clone(), y3.clone()], Box::new(|t, n| t.add(n[0], n[1]).unwrap())),
            ("concat", vec![x3.clone(), v(&[2.0])], Box::new(|t, n| t.concat(&[n[0], n[1]]).unwrap())),
            ("scale", vec![x3.clone()], Box::new(|t, n| t.scale(-2.5, n[0]).unwrap())),
            ("tanh", vec![x3.clone()], Box::new(|t, n| t.tanh(n[0]).unwrap())),
            ("clamp", vec![x3.clone()], Box::new(|t, n| t.clamp(n[0], -2.0, 2.0).unwrap())),
            ("softmax", vec![x3.clone()], Box::new(|t, n| t.softmax(n[0]).unwrap())),
            ("entropy", vec![x3.clone()], Box::new(|t, n| {
                let p = t.softmax(n[0]).unwrap();
                t.entropy(p).unwrap()
            })),
            ("weighted_sum", vec![x3.clone(), v(&[1.0, 2.0]), v(&[-0.5, 0.3]), v(&[0.2, 0.9])], Box::new(|t, n| {
                let a = t.softmax(n[0]).unwrap();
                t.weighted_sum(a, &[n[1], n[2], n[3]]).unwrap()
            })),
            ("l1_loss", vec![x3.clone(), y3.clone()], Box::new(|t, n| t.l1_loss(n[0], n[1]).unwrap())),
        ];
        for (name, inputs, build) in cases {
            let err = check_op(&inputs, build);
            assert!(err < 1e-8, "{name}: {err:e}");
        }
    }

    #[test]
    fn identity_matvec_and_zero_weights() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let mut tape = Tape::new();
        let wn = tape.param(&store, w);
        let x = tape.constant(&[3.0, -4.0]);
        let y = tape.matvec(wn, x).unwrap();
        assert_eq!(tape.value(y), &[3.0, -4.0]);
    }

    #[test]
    fn zero_weight_gives_zero_input_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[2, 3]));
        let x = store.add("x", Tensor::vector(vec![1.0, 2.0, 3.0]));
        let mut tape = Tape::new();
        let (wn, xn) = (tape.param(&store, w), tape.param(&store, x));
        let y = tape.matvec(wn, xn).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0]);
        let t = tape.constant(&[1.0, 1.0]);
        let loss = tape.l1_loss(y, t).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(x).grad.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(store.get(w).grad.data(), &[-1.0, -2.0, -3.0, -1.0, -2.0, -3.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(&[1.0, 2.0]);
        let b = tape.constant(&[1.0, 2.0, 3.0]);
        assert!(matches!(tape.add(a, b), Err(Error::Shape { op: "add", .. })));
        assert!(tape.l1_loss(a, b).is_err());
        assert!(tape.weighted_sum(a, &[b]).is_err());
        assert!(tape.concat(&[]).is_err());
    }

    #[test]
    fn clamp_passes_gradient_only_inside() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![-2.0, 0.5, 1.0, 3.0]));
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let y = tape.clamp(x, -1.0, 1.0).unwrap();
        assert_eq!(tape.value(y), &[-1.0, 0.5, 1.0, 1.0]);
        let ones = tape.constant_matrix(1, 4, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = tape.matvec(ones, y).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[0.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(&[0.7; 20]);
        let p = tape.softmax(x).unwrap();
        for &v in tape.value(p) {
            assert!((v - 0.05).abs() < 1e-15);
        }
        let z = tape.constant(&[0.0]);
        let t = tape.tanh(z).unwrap();
        assert_eq!(tape.scalar(t), 0.0);
    }

    #[test]
    fn weighted_sum_selects_and_averages() {
        let mut tape = Tape::new();
        let a = tape.constant(&[1.0, 2.0]);
        let b = tape.constant(&[3.0, 6.0]);
        let c = tape.constant(&[5.0, 1.0]);
        let onehot = tape.constant(&[0.0, 1.0, 0.0]);
        let s = tape.weighted_sum(onehot, &[a, b, c]).unwrap();
        assert_eq!(tape.value(s), &[3.0, 6.0]);
        let third = 1.0 / 3.0;
        let u = tape.constant(&[third; 3]);
        let m = tape.weighted_sum(u, &[a, b, c]).unwrap();
        assert!((tape.value(m)[0] - 3.0).abs() < 1e-12);
        assert!((tape.value(m)[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn l1_values_and_sign_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![1.0, -2.0, 0.0, 0.0, 0.0, 0.0]));
        let mut tape = Tape::new();
        let pn = tape.param(&store, p);
        let t = tape.constant(&[0.0; 6]);
        let loss = tape.l1_loss(pn, t).unwrap();
        assert_eq!(tape.scalar(loss), 3.0);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(p).grad.data(), &[1.0, -1.0, 0.0, 0.0, 0.0, 0.0]);

        let mut tape = Tape::new();
        let a = tape.constant(&[1.5, 2.5]);
        let b = tape.constant(&[1.5, 2.5]);
        let l = tape.l1_loss(a, b).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn entropy_values() {
        let mut tape = Tape::new();
        let onehot = tape.constant(&[0.0, 1.0, 0.0]);
        let h = tape.entropy(onehot).unwrap();
        assert_eq!(tape.scalar(h), 0.0);
        let u = tape.constant(&[1.0 / 11.0; 11]);
        let h = tape.entropy(u).unwrap();
        assert!((tape.scalar(h) - 11f64.ln()).abs() < 1e-12);
        assert!((tape.scalar(h) - 2.3979).abs() < 1e-4);
        let neg = tape.constant(&[-0.1, 1.1]);
        assert!(tape.entropy(neg).is_err());
    }

    #[test]
    fn unreachable_parameter_gets_exact_zero() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![1.0, 2.0]));
        let b = store.add("b", Tensor::vector(vec![5.0, 5.0]));
        let mut tape = Tape::new();
        let an = tape.param(&store, a);
        let _bn = tape.param(&store, b);
        let t = tape.constant(&[0.0, 0.0]);
        let loss = tape.l1_loss(an, t).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(b).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_contract() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        assert!(tape.backward(NodeId(0), &mut store).is_err());

        let an = tape.param(&store, a);
        assert!(tape.backward(an, &mut store).is_err(), "non-scalar root");
        let t = tape.constant(&[0.0, 0.0]);
        let loss = tape.l1_loss(an, t).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert!(tape.backward(loss, &mut store).is_err(), "second backward");
        assert!(tape.try_constant(&[1.0]).is_err(), "recording after backward");
        tape.reset();
        let an = tape.param(&store, a);
        let t = tape.constant(&[0.0, 0.0]);
        let loss = tape.l1_loss(an, t).unwrap();
        assert!(tape.backward(loss, &mut store).is_ok());
    }

    #[test]
    fn non_finite_forward_names_the_op() {
        let mut tape = Tape::new();
        let x = tape.constant(&[1e300]);
        let err = tape.scale(1e300, x).unwrap_err();
        assert!(err.to_string().contains("scale"), "{err}");
    }
}
