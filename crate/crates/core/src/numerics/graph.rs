//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and `backward` is a single reverse sweep.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    MatVecT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Concat { axis: usize, parts: Vec<NodeId> },
    Slice { x: NodeId, axis: usize, start: usize },
    EmbedRow { table: NodeId, id: usize },
    EmbedRows { table: NodeId, ids: Vec<usize> },
    Dropout { x: NodeId, mask: Vec<F> },
    Softmax { x: NodeId, axis: usize },
    LogSoftmax(NodeId),
    CrossEntropy { logits: NodeId, target: usize },
    Sum(NodeId),
    Scale { x: NodeId, factor: F },
    WeightedSum { weights: NodeId, vectors: Vec<NodeId> },
    Energies { query: NodeId, keys: Vec<NodeId> },
    Dot(NodeId, NodeId),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Append-only tape of tensor operations.
#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients indexed by node id; `None` where no gradient reached a node.
pub type Gradients<F> = Vec<Option<Tensor<F>>>;

fn lane_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value computed at `id`.
    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> NodeId {
        debug_assert!(value.is_all_finite(), "non-finite value out of {op:?}");
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a tensor as a leaf (an input or a bound parameter).
    pub fn leaf(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    fn dim_err(op: &'static str, detail: String) -> Error {
        Error::Dimension { op, detail }
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::dim_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                for j in 0..n {
                    out[i * n + j] += av * db[p * n + j];
                }
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// `[r,c] x [c] -> [r]`
    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (sm, sv) = (self.value(m).shape(), self.value(v).shape());
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Self::dim_err("matvec", format!("{sm:?} x {sv:?}")));
        }
        let (r, c) = (sm[0], sm[1]);
        let (dm, dv) = (self.value(m).data(), self.value(v).data());
        let out: Vec<F> = (0..r)
            .map(|i| {
                let row = &dm[i * c..(i + 1) * c];
                row.iter().zip(dv).fold(F::zero(), |acc, (&w, &x)| acc + w * x)
            })
            .collect();
        Ok(self.push(Tensor::from_vec(out), Op::MatVec(m, v)))
    }

    /// Transposed apply: `[r,c]^T x [r] -> [c]`
    pub fn matvec_t(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (sm, sv) = (self.value(m).shape(), self.value(v).shape());
        if sm.len() != 2 || sv.len() != 1 || sm[0] != sv[0] {
            return Err(Self::dim_err("matvec_t", format!("{sm:?}^T x {sv:?}")));
        }
        let (r, c) = (sm[0], sm[1]);
        let (dm, dv) = (self.value(m).data(), self.value(v).data());
        let mut out = vec![F::zero(); c];
        for i in 0..r {
            let vi = dv[i];
            for j in 0..c {
                out[j] += dm[i * c + j] * vi;
            }
        }
        Ok(self.push(Tensor::from_vec(out), Op::MatVecT(m, v)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Self::dim_err("add", format!("{sa:?} vs {sb:?}")));
        }
        let shape = sa.to_vec();
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Self::dim_err("mul", format!("{sa:?} vs {sb:?}")));
        }
        let shape = sa.to_vec();
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b)))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let out: Vec<F> = self.value(x).data().iter().map(|v| v.tanh()).collect();
        self.push(
            Tensor::new(shape, out).expect("tanh preserves shape"),
            Op::Tanh(x),
        )
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let one = F::one();
        let out: Vec<F> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| one / (one + (-v).exp()))
            .collect();
        self.push(
            Tensor::new(shape, out).expect("sigmoid preserves shape"),
            Op::Sigmoid(x),
        )
    }

    /// Concatenate along `axis`; parts must agree on every other dimension.
    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero parts".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Self::dim_err(
                "concat",
                format!("axis {axis} for rank {}", first.len()),
            ));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Self::dim_err("concat", format!("{first:?} vs {s:?}")));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = lane_split(&shape, axis);
        let mut out = vec![F::zero(); outer * axis_total * inner];
        let mut offset = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let alen = s[axis];
            let data = self.value(p).data();
            for o in 0..outer {
                let src = &data[o * alen * inner..(o + 1) * alen * inner];
                let dst_base = o * axis_total * inner + offset * inner;
                out[dst_base..dst_base + alen * inner].copy_from_slice(src);
            }
            offset += alen;
        }
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
        ))
    }

    /// Take `len` indices along `axis` starting at `start`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Self::dim_err(
                "slice",
                format!("[{start}, {start}+{len}) along axis {axis} of {s:?}"),
            ));
        }
        let (outer, alen, inner) = lane_split(&s, axis);
        let data = self.value(x).data();
        let mut shape = s.clone();
        shape[axis] = len;
        let mut out = vec![F::zero(); outer * len * inner];
        for o in 0..outer {
            let src_base = o * alen * inner + start * inner;
            out[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&data[src_base..src_base + len * inner]);
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, axis, start }))
    }

    /// One row of an embedding table: `[v,d][id] -> [d]`.
    pub fn embed_row(&mut self, table: NodeId, id: usize) -> Result<NodeId> {
        let s = self.value(table).shape();
        if s.len() != 2 {
            return Err(Self::dim_err("embedding", format!("table rank {}", s.len())));
        }
        let (v, d) = (s[0], s[1]);
        if id >= v {
            return Err(Error::IdRange { id, size: v });
        }
        let row = self.value(table).data()[id * d..(id + 1) * d].to_vec();
        Ok(self.push(Tensor::from_vec(row), Op::EmbedRow { table, id }))
    }

    /// Gather rows for a sequence of ids: `[v,d] x ids -> [len(ids),d]`.
    pub fn embed_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let s = self.value(table).shape();
        if s.len() != 2 {
            return Err(Self::dim_err("embedding", format!("table rank {}", s.len())));
        }
        let (v, d) = (s[0], s[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::IdRange { id, size: v });
            }
            out.extend_from_slice(&self.value(table).data()[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inverted dropout: scales kept units by `1/(1-p)` so evaluation needs
    /// no rescaling. With `training == false` or `p == 0` this is the
    /// identity and records no node.
    pub fn dropout(
        &mut self,
        x: NodeId,
        p: f64,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must be in [0,1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = F::from_f64c(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    F::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let shape = self.value(x).shape().to_vec();
        let out: Vec<F> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::Dropout { x, mask }))
    }

    /// Softmax along `axis`; outputs are positive and sum to 1 per lane.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        if axis >= s.len() {
            return Err(Self::dim_err(
                "softmax",
                format!("axis {axis} for rank {}", s.len()),
            ));
        }
        let (outer, alen, inner) = lane_split(&s, axis);
        let data = self.value(x).data();
        let mut out = vec![F::zero(); data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * alen * inner + k * inner + i;
                let mut maxv = data[at(0)];
                for k in 1..alen {
                    maxv = maxv.max(data[at(k)]);
                }
                let mut sum = F::zero();
                for k in 0..alen {
                    let e = (data[at(k)] - maxv).exp();
                    out[at(k)] = e;
                    sum += e;
                }
                for k in 0..alen {
                    out[at(k)] /= sum;
                }
            }
        }
        Ok(self.push(Tensor::new(s, out)?, Op::Softmax { x, axis }))
    }

    /// Log-softmax over a vector.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape();
        if s.len() != 1 {
            return Err(Self::dim_err("log_softmax", format!("rank {}", s.len())));
        }
        let data = self.value(x).data();
        let maxv = data.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let lse = maxv
            + data
                .iter()
                .map(|&v| (v - maxv).exp())
                .fold(F::zero(), |a, b| a + b)
                .ln();
        let out: Vec<F> = data.iter().map(|&v| v - lse).collect();
        Ok(self.push(Tensor::from_vec(out), Op::LogSoftmax(x)))
    }

    /// Negative log-likelihood of `target` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let s = self.value(logits).shape();
        if s.len() != 1 {
            return Err(Self::dim_err("cross_entropy", format!("rank {}", s.len())));
        }
        if target >= s[0] {
            return Err(Error::IdRange {
                id: target,
                size: s[0],
            });
        }
        let data = self.value(logits).data();
        let maxv = data.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let lse = maxv
            + data
                .iter()
                .map(|&v| (v - maxv).exp())
                .fold(F::zero(), |a, b| a + b)
                .ln();
        let loss = lse - data[target];
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target }))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self
            .value(x)
            .data()
            .iter()
            .fold(F::zero(), |a, &b| a + b);
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: NodeId, factor: F) -> NodeId {
        let shape = self.value(x).shape().to_vec();
        let out: Vec<F> = self.value(x).data().iter().map(|&v| v * factor).collect();
        self.push(
            Tensor::new(shape, out).expect("scale preserves shape"),
            Op::Scale { x, factor },
        )
    }

    /// `sum_j weights[j] * vectors[j]` over equally sized vectors.
    pub fn weighted_sum(&mut self, weights: NodeId, vectors: &[NodeId]) -> Result<NodeId> {
        let ws = self.value(weights).shape();
        if ws.len() != 1 || ws[0] != vectors.len() {
            return Err(Self::dim_err(
                "weighted_sum",
                format!("{} weights for {} vectors", ws[0], vectors.len()),
            ));
        }
        if vectors.is_empty() {
            return Err(Error::Contract("weighted_sum of zero vectors".into()));
        }
        let d = self.value(vectors[0]).len();
        for &v in vectors {
            let s = self.value(v).shape();
            if s.len() != 1 || s[0] != d {
                return Err(Self::dim_err("weighted_sum", format!("vector {s:?}, want [{d}]")));
            }
        }
        let mut out = vec![F::zero(); d];
        for (j, &v) in vectors.iter().enumerate() {
            let w = self.value(weights).data()[j];
            for (o, &x) in out.iter_mut().zip(self.value(v).data()) {
                *o += w * x;
            }
        }
        Ok(self.push(
            Tensor::from_vec(out),
            Op::WeightedSum {
                weights,
                vectors: vectors.to_vec(),
            },
        ))
    }

    /// Dot products of one query against each key: `y[j] = query . keys[j]`.
    pub fn energies(&mut self, query: NodeId, keys: &[NodeId]) -> Result<NodeId> {
        if keys.is_empty() {
            return Err(Error::Contract("energies over zero keys".into()));
        }
        let d = self.value(query).len();
        if self.value(query).rank() != 1 {
            return Err(Self::dim_err("energies", "query must be a vector".into()));
        }
        for &k in keys {
            let s = self.value(k).shape();
            if s.len() != 1 || s[0] != d {
                return Err(Self::dim_err("energies", format!("key {s:?}, want [{d}]")));
            }
        }
        let q = self.value(query).data().to_vec();
        let out: Vec<F> = keys
            .iter()
            .map(|&k| {
                q.iter()
                    .zip(self.value(k).data())
                    .fold(F::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect();
        Ok(self.push(
            Tensor::from_vec(out),
            Op::Energies {
                query,
                keys: keys.to_vec(),
            },
        ))
    }

    /// Dot product of two vectors, as a scalar node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 1 || sa != sb {
            return Err(Self::dim_err("dot", format!("{sa:?} . {sb:?}")));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .fold(F::zero(), |acc, (&x, &y)| acc + x * y);
        Ok(self.push(Tensor::scalar(out), Op::Dot(a, b)))
    }

    /// Reverse sweep from a scalar `loss` node; returns one gradient slot
    /// per node, accumulated across fan-out.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Gradients<F> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![F::one()],
        )?);

        for id in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let gy_data = gy.data().to_vec();
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = {
                        let s = self.value(*a).shape();
                        (s[0], s[1])
                    };
                    let n = self.value(*b).shape()[1];
                    let (da, db) = (self.value(*a).data(), self.value(*b).data());
                    {
                        let ga = self.grad_slot(&mut grads, *a);
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = F::zero();
                                for j in 0..n {
                                    acc += gy_data[i * n + j] * db[p * n + j];
                                }
                                ga[i * k + p] += acc;
                            }
                        }
                    }
                    let gb = self.grad_slot(&mut grads, *b);
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = F::zero();
                            for i in 0..m {
                                acc += da[i * k + p] * gy_data[i * n + j];
                            }
                            gb[p * n + j] += acc;
                        }
                    }
                }
                Op::MatVec(mn, vn) => {
                    let (r, c) = {
                        let s = self.value(*mn).shape();
                        (s[0], s[1])
                    };
                    let (dm, dv) = (self.value(*mn).data(), self.value(*vn).data());
                    {
                        let gm = self.grad_slot(&mut grads, *mn);
                        for i in 0..r {
                            for j in 0..c {
                                gm[i * c + j] += gy_data[i] * dv[j];
                            }
                        }
                    }
                    let gv = self.grad_slot(&mut grads, *vn);
                    for i in 0..r {
                        for j in 0..c {
                            gv[j] += dm[i * c + j] * gy_data[i];
                        }
                    }
                }
                Op::MatVecT(mn, vn) => {
                    let (r, c) = {
                        let s = self.value(*mn).shape();
                        (s[0], s[1])
                    };
                    let (dm, dv) = (self.value(*mn).data(), self.value(*vn).data());
                    {
                        let gm = self.grad_slot(&mut grads, *mn);
                        for i in 0..r {
                            for j in 0..c {
                                gm[i * c + j] += dv[i] * gy_data[j];
                            }
                        }
                    }
                    let gv = self.grad_slot(&mut grads, *vn);
                    for i in 0..r {
                        for j in 0..c {
                            gv[i] += dm[i * c + j] * gy_data[j];
                        }
                    }
                }
                Op::Add(a, b) => {
                    for &src in &[*a, *b] {
                        let g = self.grad_slot(&mut grads, src);
                        for (gi, &gyi) in g.iter_mut().zip(&gy_data) {
                            *gi += gyi;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (da, db) = (
                        self.value(*a).data().to_vec(),
                        self.value(*b).data().to_vec(),
                    );
                    {
                        let ga = self.grad_slot(&mut grads, *a);
                        for ((gi, &gyi), &bv) in ga.iter_mut().zip(&gy_data).zip(&db) {
                            *gi += gyi * bv;
                        }
                    }
                    let gb = self.grad_slot(&mut grads, *b);
                    for ((gi, &gyi), &av) in gb.iter_mut().zip(&gy_data).zip(&da) {
                        *gi += gyi * av;
                    }
                }
                Op::Tanh(x) => {
                    let y = self.nodes[id].value.data().to_vec();
                    let gx = self.grad_slot(&mut grads, *x);
                    for ((gi, &gyi), &yi) in gx.iter_mut().zip(&gy_data).zip(&y) {
                        *gi += gyi * (F::one() - yi * yi);
                    }
                }
                Op::Sigmoid(x) => {
                    let y = self.nodes[id].value.data().to_vec();
                    let gx = self.grad_slot(&mut grads, *x);
                    for ((gi, &gyi), &yi) in gx.iter_mut().zip(&gy_data).zip(&y) {
                        *gi += gyi * yi * (F::one() - yi);
                    }
                }
                Op::Concat { axis, parts } => {
                    let parts = parts.clone();
                    let axis = *axis;
                    let out_shape = self.nodes[id].value.shape().to_vec();
                    let (outer, axis_total, inner) = lane_split(&out_shape, axis);
                    let mut offset = 0;
                    for &p in &parts {
                        let alen = self.value(p).shape()[axis];
                        let gp = self.grad_slot(&mut grads, p);
                        for o in 0..outer {
                            let src_base = o * axis_total * inner + offset * inner;
                            let dst_base = o * alen * inner;
                            for t in 0..alen * inner {
                                gp[dst_base + t] += gy_data[src_base + t];
                            }
                        }
                        offset += alen;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let (x, axis, start) = (*x, *axis, *start);
                    let in_shape = self.value(x).shape().to_vec();
                    let out_shape = self.nodes[id].value.shape().to_vec();
                    let (outer, alen, inner) = lane_split(&in_shape, axis);
                    let len = out_shape[axis];
                    let gx = self.grad_slot(&mut grads, x);
                    for o in 0..outer {
                        let dst_base = o * alen * inner + start * inner;
                        let src_base = o * len * inner;
                        for t in 0..len * inner {
                            gx[dst_base + t] += gy_data[src_base + t];
                        }
                    }
                }
                Op::EmbedRow { table, id: row } => {
                    let d = self.value(*table).shape()[1];
                    let gt = self.grad_slot(&mut grads, *table);
                    for (j, &gyi) in gy_data.iter().enumerate() {
                        gt[row * d + j] += gyi;
                    }
                    debug_assert_eq!(gy_data.len(), d);
                }
                Op::EmbedRows { table, ids } => {
                    let ids = ids.clone();
                    let d = self.value(*table).shape()[1];
                    let gt = self.grad_slot(&mut grads, *table);
                    for (k, &row) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[row * d + j] += gy_data[k * d + j];
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    let mask = mask.clone();
                    let gx = self.grad_slot(&mut grads, *x);
                    for ((gi, &gyi), &mi) in gx.iter_mut().zip(&gy_data).zip(&mask) {
                        *gi += gyi * mi;
                    }
                }
                Op::Softmax { x, axis } => {
                    let (x, axis) = (*x, *axis);
                    let shape = self.nodes[id].value.shape().to_vec();
                    let y = self.nodes[id].value.data().to_vec();
                    let (outer, alen, inner) = lane_split(&shape, axis);
                    let gx = self.grad_slot(&mut grads, x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * alen * inner + k * inner + i;
                            let mut dot = F::zero();
                            for k in 0..alen {
                                dot += gy_data[at(k)] * y[at(k)];
                            }
                            for k in 0..alen {
                                gx[at(k)] += y[at(k)] * (gy_data[at(k)] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmax(x) => {
                    let y = self.nodes[id].value.data().to_vec();
                    let gsum = gy_data.iter().fold(F::zero(), |a, &b| a + b);
                    let gx = self.grad_slot(&mut grads, *x);
                    for ((gi, &gyi), &yi) in gx.iter_mut().zip(&gy_data).zip(&y) {
                        *gi += gyi - yi.exp() * gsum;
                    }
                }
                Op::CrossEntropy { logits, target } => {
                    let (logits, target) = (*logits, *target);
                    let data = self.value(logits).data().to_vec();
                    let maxv = data.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
                    let sum = data
                        .iter()
                        .map(|&v| (v - maxv).exp())
                        .fold(F::zero(), |a, b| a + b);
                    let g = gy_data[0];
                    let gx = self.grad_slot(&mut grads, logits);
                    for (j, gi) in gx.iter_mut().enumerate() {
                        let p = (data[j] - maxv).exp() / sum;
                        let delta = if j == target { F::one() } else { F::zero() };
                        *gi += g * (p - delta);
                    }
                }
                Op::Sum(x) => {
                    let g = gy_data[0];
                    let gx = self.grad_slot(&mut grads, *x);
                    for gi in gx.iter_mut() {
                        *gi += g;
                    }
                }
                Op::Scale { x, factor } => {
                    let factor = *factor;
                    let gx = self.grad_slot(&mut grads, *x);
                    for (gi, &gyi) in gx.iter_mut().zip(&gy_data) {
                        *gi += gyi * factor;
                    }
                }
                Op::WeightedSum { weights, vectors } => {
                    let vectors = vectors.clone();
                    let w = self.value(*weights).data().to_vec();
                    {
                        let gw = self.grad_slot(&mut grads, *weights);
                        for (j, &v) in vectors.iter().enumerate() {
                            let mut acc = F::zero();
                            for (&gyi, &vi) in gy_data.iter().zip(self.value(v).data()) {
                                acc += gyi * vi;
                            }
                            gw[j] += acc;
                        }
                    }
                    for (j, &v) in vectors.iter().enumerate() {
                        let gv = self.grad_slot(&mut grads, v);
                        for (gi, &gyi) in gv.iter_mut().zip(&gy_data) {
                            *gi += w[j] * gyi;
                        }
                    }
                }
                Op::Energies { query, keys } => {
                    let keys = keys.clone();
                    let q = self.value(*query).data().to_vec();
                    {
                        let gq = self.grad_slot(&mut grads, *query);
                        for (j, &k) in keys.iter().enumerate() {
                            for (gi, &ki) in gq.iter_mut().zip(self.value(k).data()) {
                                *gi += gy_data[j] * ki;
                            }
                        }
                    }
                    for (j, &k) in keys.iter().enumerate() {
                        let gk = self.grad_slot(&mut grads, k);
                        for (gi, &qi) in gk.iter_mut().zip(&q) {
                            *gi += gy_data[j] * qi;
                        }
                    }
                }
                Op::Dot(a, b) => {
                    let g = gy_data[0];
                    let db = self.value(*b).data().to_vec();
                    let da = self.value(*a).data().to_vec();
                    {
                        let ga = self.grad_slot(&mut grads, *a);
                        for (gi, &bv) in ga.iter_mut().zip(&db) {
                            *gi += g * bv;
                        }
                    }
                    let gb = self.grad_slot(&mut grads, *b);
                    for (gi, &av) in gb.iter_mut().zip(&da) {
                        *gi += g * av;
                    }
                }
            }
            grads[id] = Some(gy);
        }
        Ok(grads)
    }

    fn grad_slot<'g>(&self, grads: &'g mut Gradients<F>, id: NodeId) -> &'g mut [F] {
        if grads[id.0].is_none() {
            grads[id.0] = Some(Tensor::zeros(self.value(id).shape().to_vec()));
        }
        grads[id.0].as_mut().unwrap().data_mut()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn softmax64(xs: &[f64]) -> Vec<f64> {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let es: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = es.iter().sum();
        es.iter().map(|e| e / s).collect()
    }

    #[test]
    fn softmax_of_equal_energies_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_matches_direct_exp_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let y = g.softmax(x, 0).unwrap();
        let oracle = softmax64(&[1.0, 2.0, 3.0]);
        for (a, b) in g.value(y).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let xs = [0.3, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = xs.iter().map(|v| v + 7.5).collect();
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_vec(xs.to_vec()));
        let b = g.leaf(Tensor::from_vec(shifted));
        let ya = g.softmax(a, 0).unwrap();
        let yb = g.softmax(b, 0).unwrap();
        for (x, y) in g.value(ya).data().iter().zip(g.value(yb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let eye = g.leaf(
            Tensor::new(
                vec![3, 3],
                vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            )
            .unwrap(),
        );
        let x = g.leaf(Tensor::new(vec![3, 2], (1..=6).map(f64::from).collect()).unwrap());
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]));
        let b = g.leaf(Tensor::zeros(vec![2, 3]));
        match g.matmul(a, b) {
            Err(Error::Dimension { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_certain_prediction_is_near_zero() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(Tensor::from_vec(vec![20.0, 0.0, 0.0]));
        let loss = g.cross_entropy(logits, 0).unwrap();
        assert!(g.value(loss).item() < 1e-8);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        // loss = sum(x * x), x = [3] -> grad 6
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(vec![3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads[x.0].as_ref().unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_constant_wrt_unused_input() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(vec![2.0]));
        let c = g.leaf(Tensor::scalar(5.0));
        let loss = g.sum(c);
        let grads = g.backward(loss).unwrap();
        assert!(grads[x.0].is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn concat_then_complementary_slice_is_identity() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.leaf(Tensor::from_vec(vec![3.0, 4.0, 5.0]));
        let cat = g.concat(0, &[a, b]).unwrap();
        let sa = g.slice(cat, 0, 0, 2).unwrap();
        let sb = g.slice(cat, 0, 2, 3).unwrap();
        assert_eq!(g.value(sa), g.value(a));
        assert_eq!(g.value(sb), g.value(b));
    }

    #[test]
    fn concat_axis1_blocks() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let b = g.leaf(Tensor::new(vec![2, 2], vec![10.0, 11.0, 30.0, 31.0]).unwrap());
        let cat = g.concat(1, &[a, b]).unwrap();
        assert_eq!(g.value(cat).shape(), &[2, 3]);
        assert_eq!(
            g.value(cat).data(),
            &[1.0, 10.0, 11.0, 3.0, 30.0, 31.0]
        );
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, -2.0]));
        let y = g.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(x, y);
        let z = g.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(x, z);
    }

    #[test]
    fn dropout_preserves_expectation() {
        // inverted scaling: E[dropout(x)] == x, checked over 10^4 samples
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let mut total = 0.0;
        for _ in 0..n {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(Tensor::from_vec(vec![1.0]));
            let y = g.dropout(x, 0.3, true, &mut rng).unwrap();
            total += g.value(y).data()[0];
        }
        let mean = total / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn embed_row_out_of_range() {
        let mut g = Graph::<f64>::new();
        let table = g.leaf(Tensor::zeros(vec![4, 3]));
        assert!(matches!(
            g.embed_row(table, 4),
            Err(Error::IdRange { id: 4, size: 4 })
        ));
    }

    // loss built from a parameter slice, for finite-difference spot checks
    fn fd_check(build: impl Fn(&[f64]) -> f64, theta: &mut [f64], analytic: &[f64]) {
        let h = 1e-5;
        for i in 0..theta.len() {
            let orig = theta[i];
            theta[i] = orig + h;
            let up = build(theta);
            theta[i] = orig - h;
            let down = build(theta);
            theta[i] = orig;
            let num = (up - down) / (2.0 * h);
            let denom = analytic[i].abs().max(num.abs()).max(1.0);
            assert!(
                (analytic[i] - num).abs() / denom < 1e-4,
                "component {i}: analytic {} vs numeric {num}",
                analytic[i]
            );
        }
    }

    #[test]
    fn gradcheck_lstm_like_cell_step() {
        // one gated recurrent step over a 12-parameter cell
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut theta: Vec<f64> = (0..12).map(|_| rng.random_range(-0.8..0.8)).collect();
        let build = |t: &[f64]| -> f64 {
            let mut g = Graph::<f64>::new();
            let w_ih = g.leaf(Tensor::new(vec![4, 1], t[0..4].to_vec()).unwrap());
            let w_hh = g.leaf(Tensor::new(vec![4, 1], t[4..8].to_vec()).unwrap());
            let bias = g.leaf(Tensor::from_vec(t[8..12].to_vec()));
            let x = g.leaf(Tensor::from_vec(vec![0.7]));
            let h = g.leaf(Tensor::from_vec(vec![-0.4]));
            let c = g.leaf(Tensor::from_vec(vec![0.2]));
            let ih = g.matvec(w_ih, x).unwrap();
            let hh = g.matvec(w_hh, h).unwrap();
            let pre = g.add(ih, hh).unwrap();
            let gates = g.add(pre, bias).unwrap();
            let i_g = g.slice(gates, 0, 0, 1).unwrap();
            let f_g = g.slice(gates, 0, 1, 1).unwrap();
            let g_g = g.slice(gates, 0, 2, 1).unwrap();
            let o_g = g.slice(gates, 0, 3, 1).unwrap();
            let i_s = g.sigmoid(i_g);
            let f_s = g.sigmoid(f_g);
            let g_t = g.tanh(g_g);
            let o_s = g.sigmoid(o_g);
            let fc = g.mul(f_s, c).unwrap();
            let ig = g.mul(i_s, g_t).unwrap();
            let c2 = g.add(fc, ig).unwrap();
            let c2t = g.tanh(c2);
            let h2 = g.mul(o_s, c2t).unwrap();
            let loss = g.sum(h2);
            g.value(loss).item()
        };
        // analytic gradients via one tape
        let mut g = Graph::<f64>::new();
        let w_ih = g.leaf(Tensor::new(vec![4, 1], theta[0..4].to_vec()).unwrap());
        let w_hh = g.leaf(Tensor::new(vec![4, 1], theta[4..8].to_vec()).unwrap());
        let bias = g.leaf(Tensor::from_vec(theta[8..12].to_vec()));
        let x = g.leaf(Tensor::from_vec(vec![0.7]));
        let h = g.leaf(Tensor::from_vec(vec![-0.4]));
        let c = g.leaf(Tensor::from_vec(vec![0.2]));
        let ih = g.matvec(w_ih, x).unwrap();
        let hh = g.matvec(w_hh, h).unwrap();
        let pre = g.add(ih, hh).unwrap();
        let gates = g.add(pre, bias).unwrap();
        let i_g = g.slice(gates, 0, 0, 1).unwrap();
        let f_g = g.slice(gates, 0, 1, 1).unwrap();
        let g_g = g.slice(gates, 0, 2, 1).unwrap();
        let o_g = g.slice(gates, 0, 3, 1).unwrap();
        let i_s = g.sigmoid(i_g);
        let f_s = g.sigmoid(f_g);
        let g_t = g.tanh(g_g);
        let o_s = g.sigmoid(o_g);
        let fc = g.mul(f_s, c).unwrap();
        let ig = g.mul(i_s, g_t).unwrap();
        let c2 = g.add(fc, ig).unwrap();
        let c2t = g.tanh(c2);
        let h2 = g.mul(o_s, c2t).unwrap();
        let loss = g.sum(h2);
        let grads = g.backward(loss).unwrap();
        let mut analytic = Vec::new();
        analytic.extend_from_slice(grads[w_ih.0].as_ref().unwrap().data());
        analytic.extend_from_slice(grads[w_hh.0].as_ref().unwrap().data());
        analytic.extend_from_slice(grads[bias.0].as_ref().unwrap().data());
        fd_check(build, &mut theta, &analytic);
    }
}
