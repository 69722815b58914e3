//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamSet`] rather than copied, and their gradients are
//! accumulated directly into a [`ParamSet`]-shaped buffer on the way back.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::scalar::{c, Scalar};

pub type NodeId = usize;

/// Named collection of parameter matrices. Vectors are stored as `1 × n`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Array2<T>>,
}

impl<T> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Array2<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: usize) -> &Array2<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Array2<T> {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Array2<T>> {
        self.tensors.iter_mut()
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
        }
    }

    /// Total number of scalar coordinates.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Maps a flat coordinate onto `(tensor id, row, col)`.
    pub fn coord(&self, mut k: usize) -> (usize, usize, usize) {
        for (id, t) in self.tensors.iter().enumerate() {
            if k < t.len() {
                let cols = t.ncols();
                return (id, k / cols, k % cols);
            }
            k -= t.len();
        }
        panic!("coordinate out of range");
    }

    pub fn add_assign(&mut self, other: &ParamSet<T>) {
        for (a, b) in self.tensors.iter_mut().zip(other.tensors.iter()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: T) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.mapv(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN))))
                .collect(),
        }
    }
}

/// Attention visibility pattern for [`Tape::softmax_rows`].
#[derive(Clone, Debug)]
pub enum Mask {
    None,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Query `i` sees key `j` iff both carry the same segment id.
    Segments(Vec<usize>),
}

impl Mask {
    fn allows(&self, i: usize, j: usize) -> bool {
        match self {
            Mask::None => true,
            Mask::Causal => j <= i,
            Mask::Segments(seg) => seg[i] == seg[j],
        }
    }
}

enum Op<T> {
    Const,
    Param(usize),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Array2<T>, inv_std: Vec<T> },
    Softmax(NodeId),
    Gather { table: usize, ids: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    MeanRows(NodeId),
    Nll { logits: NodeId, targets: Vec<(usize, usize)>, probs: Array2<T> },
}

enum Value<T> {
    Owned(Array2<T>),
    Param(usize),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
}

const LN_EPS: f64 = 1e-5;

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Tape { params, nodes: Vec::with_capacity(256) }
    }

    pub fn value(&self, id: NodeId) -> ArrayView2<'_, T> {
        match &self.nodes[id].value {
            Value::Owned(a) => a.view(),
            Value::Param(p) => self.params.get(*p).view(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad)
            || matches!(op, Op::Gather { .. });
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Array2<T>) -> NodeId {
        self.nodes.push(Node { value: Value::Owned(value), op: Op::Const, needs_grad: false });
        self.nodes.len() - 1
    }

    pub fn param(&mut self, id: usize) -> NodeId {
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id), needs_grad: true });
        self.nodes.len() - 1
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.value(a) + &self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = &self.value(a) + &self.value(row);
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let v = self.value(a).mapv(|x| x * factor);
        self.push(v, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let n = c::<T>(cols as f64);
        let mut xhat = Array2::<T>::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + c(LN_EPS)).sqrt();
            inv_std.push(is);
            Zip::from(xhat.row_mut(r)).and(&row).for_each(|o, &v| *o = (v - mean) * is);
        }
        let out = &(&xhat * &self.value(gain)) + &self.value(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias])
    }

    /// Row-wise softmax; masked entries get probability zero and a row with
    /// no visible entry is all zeros.
    pub fn softmax_rows(&mut self, a: NodeId, mask: &Mask) -> NodeId {
        let av = self.value(a);
        let mut out = Array2::<T>::zeros(av.raw_dim());
        for (i, row) in av.rows().into_iter().enumerate() {
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if mask.allows(i, j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if mask.allows(i, j) {
                    let e = (v - max).exp();
                    out[[i, j]] = e;
                    sum = sum + e;
                }
            }
            out.row_mut(i).mapv_inplace(|e| e / sum);
        }
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Looks up rows of an embedding table parameter.
    pub fn gather(&mut self, table: usize, ids: &[usize]) -> NodeId {
        let t = self.params.get(table);
        let mut out = Array2::<T>::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(id));
        }
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, &[])
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let n = c::<T>(av.nrows() as f64);
        let out = av.sum_axis(Axis(0)).mapv(|v| v / n).insert_axis(Axis(0));
        self.push(out, Op::MeanRows(a), &[a])
    }

    /// Summed negative log-likelihood of `targets` as `(row, class)` pairs.
    pub fn nll(&mut self, logits: NodeId, targets: &[(usize, usize)]) -> NodeId {
        let lv = self.value(logits);
        let mut probs = Array2::<T>::zeros((targets.len(), lv.ncols()));
        let mut total = T::zero();
        for (k, &(row, class)) in targets.iter().enumerate() {
            let r = lv.row(row);
            let max = r.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (j, &v) in r.iter().enumerate() {
                let e = (v - max).exp();
                probs[[k, j]] = e;
                sum = sum + e;
            }
            probs.row_mut(k).mapv_inplace(|e| e / sum);
            total = total + (sum.ln() + max - r[class]);
        }
        let out = Array2::from_elem((1, 1), total);
        self.push(out, Op::Nll { logits, targets: targets.to_vec(), probs }, &[logits])
    }

    /// Reverse pass from a `1 × 1` node, returning parameter gradients.
    pub fn backward(&self, loss: NodeId) -> ParamSet<T> {
        let mut pgrad = self.params.zeros_like();
        self.backward_into(loss, T::one(), &mut pgrad);
        pgrad
    }

    /// Reverse pass seeded with `seed`, accumulating into `pgrad`.
    pub fn backward_into(&self, loss: NodeId, seed: T, pgrad: &mut ParamSet<T>) {
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Array2::from_elem(self.value(loss).raw_dim(), seed));

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Const => {}
                Op::Param(p) => *pgrad.get_mut(*p) += &g,
                Op::MatMul(a, b) => {
                    if self.nodes[*a].needs_grad {
                        let d = g.dot(&self.value(*b).t());
                        accumulate(&mut grads, *a, d);
                    }
                    if self.nodes[*b].needs_grad {
                        let d = self.value(*a).t().dot(&g);
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.nodes[*a].needs_grad {
                        let d = g.dot(&self.value(*b));
                        accumulate(&mut grads, *a, d);
                    }
                    if self.nodes[*b].needs_grad {
                        let d = g.t().dot(&self.value(*a));
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    if self.nodes[*row].needs_grad {
                        let d = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, d);
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    accumulate(&mut grads, *a, g.mapv(|v| v * f));
                }
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(&self.value(*a)).for_each(|d, &x| {
                        if x <= T::zero() {
                            *d = T::zero();
                        }
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    if self.nodes[*gain].needs_grad {
                        let dg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *gain, dg);
                    }
                    if self.nodes[*bias].needs_grad {
                        let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *bias, db);
                    }
                    if self.nodes[*x].needs_grad {
                        let gain_v = self.value(*gain);
                        let dxhat = &g * &gain_v;
                        let n = c::<T>(xhat.ncols() as f64);
                        let mut dx = Array2::<T>::zeros(xhat.raw_dim());
                        for r in 0..xhat.nrows() {
                            let dh = dxhat.row(r);
                            let xh = xhat.row(r);
                            let mean_dh = dh.sum() / n;
                            let mean_dh_xh = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
                            let is = inv_std[r];
                            Zip::from(dx.row_mut(r)).and(&dh).and(&xh).for_each(|o, &d, &h| {
                                *o = is * (d - mean_dh - h * mean_dh_xh);
                            });
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Softmax(a) => {
                    let p = match &node.value {
                        Value::Owned(v) => v,
                        Value::Param(_) => unreachable!(),
                    };
                    let mut d = &g * p;
                    for r in 0..d.nrows() {
                        let dot = d.row(r).sum();
                        let pr = p.row(r);
                        Zip::from(d.row_mut(r)).and(&pr).for_each(|o, &pv| *o = *o - pv * dot);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Gather { table, ids } => {
                    let t = pgrad.get_mut(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = t.row_mut(id);
                        dst += &g.row(r);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).nrows();
                        if self.nodes[p].needs_grad {
                            accumulate(&mut grads, p, g.slice(s![start..start + rows, ..]).to_owned());
                        }
                        start += rows;
                    }
                }
                Op::MeanRows(a) => {
                    let rows = self.value(*a).nrows();
                    let f = T::one() / c::<T>(rows as f64);
                    let row = g.row(0).mapv(|v| v * f);
                    let d = row.broadcast((rows, row.len())).expect("broadcast").to_owned();
                    accumulate(&mut grads, *a, d);
                }
                Op::Nll { logits, targets, probs } => {
                    let lv = self.value(*logits);
                    let scale = g[[0, 0]];
                    let mut d = Array2::<T>::zeros(lv.raw_dim());
                    for (k, &(row, class)) in targets.iter().enumerate() {
                        let mut dr = d.row_mut(row);
                        Zip::from(&mut dr).and(&probs.row(k)).for_each(|o, &p| *o = *o + scale * p);
                        dr[class] = dr[class] - scale;
                    }
                    accumulate(&mut grads, *logits, d);
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Array2<T>>], id: NodeId, d: Array2<T>) {
    match &mut grads[id] {
        Some(existing) => *existing += &d,
        slot @ None => *slot = Some(d),
    }
}

/// Row-wise log-softmax outside any tape.
pub fn log_softmax_rows<T: Scalar>(logits: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}
