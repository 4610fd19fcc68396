//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! A [`Tape`] records every operation of a forward pass. Parameters are read
//! from a borrowed [`ParamStore`]; [`Tape::backward`] returns their gradients,
//! which the caller folds into the store with [`ParamStore::accumulate`].

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use super::params::{ParamId, ParamStore};
use super::{NnError, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Embed { param: ParamId, ids: Vec<usize> },
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Gelu(usize),
    Abs(usize),
    Log(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNormRows(usize, f64),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    MeanRows(usize),
    SumAll(usize),
    Pick(usize, usize),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.by_param.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Sum another gradient set into this one.
    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.by_param {
            match self.by_param.get_mut(&id) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    self.by_param.insert(id, g);
                }
            }
        }
    }

    fn add(&mut self, id: ParamId, len: usize) -> &mut Vec<f64> {
        self.by_param.entry(id).or_insert_with(|| vec![0.0; len])
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(values: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (row, o) in values.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (x, y) in row.iter().zip(o.iter_mut()) {
            *y = (x - max).exp();
            sum += *y;
        }
        o.iter_mut().for_each(|y| *y /= sum);
    }
    out
}

pub fn log_softmax_rows(values: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (row, o) in values.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        for (x, y) in row.iter().zip(o.iter_mut()) {
            *y = x - lse;
        }
    }
    out
}

/// Normalise each row to zero mean and unit variance.
pub fn layer_norm_rows(values: &[f64], cols: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (row, o) in values.chunks(cols).zip(out.chunks_mut(cols)) {
        let n = cols as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for (x, y) in row.iter().zip(o.iter_mut()) {
            *y = (x - mean) * inv;
        }
    }
    out
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
        None => *slot = Some(g.to_vec()),
    }
}

pub struct Tape<'p> {
    id: u64,
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, usize>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Tape<'p> {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "variable recorded on another tape");
        &self.nodes[v.idx]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shape")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.values().to_vec(), Op::Leaf)
    }

    pub fn constant_row(&mut self, values: Vec<f64>) -> Var {
        let n = values.len();
        self.push(1, n, values, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&idx) = self.param_nodes.get(&id) {
            return Var { tape: self.id, idx };
        }
        let t = self.params.get(id);
        let v = self.push(t.rows(), t.cols(), t.values().to_vec(), Op::Param(id));
        self.param_nodes.insert(id, v.idx);
        v
    }

    /// Gather rows `ids` of a parameter table without copying the whole table.
    pub fn embed(&mut self, id: ParamId, ids: &[usize]) -> Result<Var, NnError> {
        let table = self.params.get(id);
        let cols = table.cols();
        let mut value = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= table.rows() {
                return Err(NnError::ShapeMismatch(format!(
                    "row {i} out of range for table of {} rows",
                    table.rows()
                )));
            }
            value.extend_from_slice(&table.values()[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(ids.len(), cols, value, Op::Embed { param: id, ids: ids.to_vec() }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize), NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NnError::ShapeMismatch(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(NnError::ShapeMismatch(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let v = matmul(self.value(a), self.value(b), m, k, n);
        Ok(self.push(m, n, v, Op::MatMul(a.idx, b.idx)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = transpose(self.value(a), r, c);
        self.push(c, r, v, Op::Transpose(a.idx))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Result<Var, NnError> {
        let (r, c) = self.same_shape(a, b, what)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        Ok(self.push(r, c, v, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a.idx, b.idx), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a.idx, b.idx), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a.idx, b.idx), "mul")
    }

    fn row_broadcast(&mut self, a: Var, row: Var, mul: bool) -> Result<Var, NnError> {
        let ((r, c), (rr, rc)) = (self.shape(a), self.shape(row));
        if rr != 1 || rc != c {
            return Err(NnError::ShapeMismatch(format!("row broadcast {rr}x{rc} onto {r}x{c}")));
        }
        let b = self.value(row);
        let v = self
            .value(a)
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(b).map(move |(x, y)| if mul { x * y } else { x + y }))
            .collect();
        let op = if mul { Op::MulRow(a.idx, row.idx) } else { Op::AddRow(a.idx, row.idx) };
        Ok(self.push(r, c, v, op))
    }

    /// `a + row` with `row` (1 x c) broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        self.row_broadcast(a, row, false)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, NnError> {
        self.row_broadcast(a, row, true)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        let v = self.value(a).iter().map(|x| f(*x)).collect();
        self.push(r, c, v, op)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a.idx, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a.idx))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a.idx))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a.idx))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a.idx))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a.idx))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = softmax_rows(self.value(a), c);
        self.push(r, c, v, Op::SoftmaxRows(a.idx))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let v = log_softmax_rows(self.value(a), c);
        self.push(r, c, v, Op::LogSoftmaxRows(a.idx))
    }

    /// Per-row normalisation without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let (r, c) = self.shape(a);
        let v = layer_norm_rows(self.value(a), c, eps);
        self.push(r, c, v, Op::LayerNormRows(a.idx, eps))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NnError> {
        let (r, c) = self.shape(a);
        if start >= end || end > r {
            return Err(NnError::ShapeMismatch(format!("rows {start}..{end} of {r}")));
        }
        let v = self.value(a)[start * c..end * c].to_vec();
        Ok(self.push(end - start, c, v, Op::SliceRows(a.idx, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NnError> {
        let (r, c) = self.shape(a);
        if start >= end || end > c {
            return Err(NnError::ShapeMismatch(format!("cols {start}..{end} of {c}")));
        }
        let v = self.value(a).chunks(c).flat_map(|row| row[start..end].iter().copied()).collect();
        Ok(self.push(r, end - start, v, Op::SliceCols(a.idx, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|p| self.shape(*p).0 != rows) {
            return Err(NnError::ShapeMismatch("concat_cols with differing row counts".into()));
        }
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut v = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let pc = self.shape(*p).1;
                v.extend_from_slice(&self.value(*p)[r * pc..(r + 1) * pc]);
            }
        }
        let ids = parts.iter().map(|p| p.idx).collect();
        Ok(self.push(rows, cols, v, Op::ConcatCols(ids)))
    }

    /// Column means, giving a single row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut v = vec![0.0; c];
        for row in self.value(a).chunks(c) {
            v.iter_mut().zip(row).for_each(|(s, x)| *s += x);
        }
        v.iter_mut().for_each(|s| *s /= r as f64);
        self.push(1, c, v, Op::MeanRows(a.idx))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(1, 1, vec![s], Op::SumAll(a.idx))
    }

    /// Select element `(r, c)` as a 1 x 1 value.
    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Result<Var, NnError> {
        let (rows, cols) = self.shape(a);
        if r >= rows || c >= cols {
            return Err(NnError::ShapeMismatch(format!("pick ({r},{c}) of {rows}x{cols}")));
        }
        let v = self.value(a)[r * cols + c];
        Ok(self.push(1, 1, vec![v], Op::Pick(a.idx, r * cols + c)))
    }

    /// Affine map `x W + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var, NnError> {
        let wv = self.param(w);
        let bv = self.param(b);
        let xw = self.matmul(x, wv)?;
        self.add_row(xw, bv)
    }

    /// Backpropagate from a scalar node and collect parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(NnError::GraphNotRecorded);
        }
        let ln = &self.nodes[loss.idx];
        if ln.rows * ln.cols != 1 {
            return Err(NnError::ShapeMismatch(format!(
                "backward needs a scalar loss, got {}x{}",
                ln.rows, ln.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let (rows, cols) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let buf = out.add(*id, g.len());
                    buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x);
                }
                Op::Embed { param, ids } => {
                    let table = self.params.get(*param);
                    let buf = out.add(*param, table.len());
                    for (r, &row) in ids.iter().enumerate() {
                        let dst = &mut buf[row * cols..(row + 1) * cols];
                        dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(b, x)| *b += x);
                    }
                }
                Op::MatMul(a, b) => {
                    let (na, nb) = (&self.nodes[*a], &self.nodes[*b]);
                    let (m, k, n) = (na.rows, na.cols, nb.cols);
                    let bt = transpose(&nb.value, k, n);
                    let ga = matmul(&g, &bt, m, n, k);
                    let at = transpose(&na.value, m, k);
                    let gb = matmul(&at, &g, k, m, n);
                    accumulate(&mut grads[*a], &ga);
                    accumulate(&mut grads[*b], &gb);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads[*a], &transpose(&g, rows, cols));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], &g);
                    accumulate(&mut grads[*b], &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[*a], &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    accumulate(&mut grads[*b], &neg);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let ga: Vec<f64> = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(va).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads[*a], &ga);
                    accumulate(&mut grads[*b], &gb);
                }
                Op::AddRow(a, r) => {
                    accumulate(&mut grads[*a], &g);
                    let mut gr = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        gr.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                    }
                    accumulate(&mut grads[*r], &gr);
                }
                Op::MulRow(a, r) => {
                    let (va, vr) = (&self.nodes[*a].value, &self.nodes[*r].value);
                    let mut ga = vec![0.0; g.len()];
                    let mut gr = vec![0.0; cols];
                    for (j, (gx, ax)) in g.iter().zip(va).enumerate() {
                        ga[j] = gx * vr[j % cols];
                        gr[j % cols] += gx * ax;
                    }
                    accumulate(&mut grads[*a], &ga);
                    accumulate(&mut grads[*r], &gr);
                }
                Op::Scale(a, s) => {
                    let ga: Vec<f64> = g.iter().map(|x| x * s).collect();
                    accumulate(&mut grads[*a], &ga);
                }
                Op::Tanh(a) => {
                    let ga: Vec<f64> = g.iter().zip(&node.value).map(|(x, y)| x * (1.0 - y * y)).collect();
                    accumulate(&mut grads[*a], &ga);
                }
                Op::Sigmoid(a) => {
                    let ga: Vec<f64> = g.iter().zip(&node.value).map(|(x, y)| x * y * (1.0 - y)).collect();
                    accumulate(&mut grads[*a], &ga);
                }
                Op::Gelu(a) => {
                    let va = &self.nodes[*a].value;
                    let ga: Vec<f64> = g.iter().zip(va).map(|(x, z)| x * gelu_grad(*z)).collect();
                    accumulate(&mut grads[*a], &ga);
                }
                Op::Abs(a) => {
                    let va = &self.nodes[*a].value;
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(va)
                        .map(|(x, z)| if *z > 0.0 { *x } else if *z < 0.0 { -x } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[*a], &ga);
                }
                Op::Log(a) => {
                    let va = &self.nodes[*a].value;
                    let ga: Vec<f64> = g.iter().zip(va).map(|(x, z)| x / z).collect();
                    accumulate(&mut grads[*a], &ga);
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, yr), out_r) in g.chunks(cols).zip(node.value.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((o, x), y) in out_r.iter_mut().zip(gr).zip(yr) {
                            *o = y * (x - dot);
                        }
                    }
                    accumulate(&mut grads[*a], &ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, yr), out_r) in g.chunks(cols).zip(node.value.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let total: f64 = gr.iter().sum();
                        for ((o, x), y) in out_r.iter_mut().zip(gr).zip(yr) {
                            *o = x - y.exp() * total;
                        }
                    }
                    accumulate(&mut grads[*a], &ga);
                }
                Op::LayerNormRows(a, eps) => {
                    let va = &self.nodes[*a].value;
                    let mut ga = vec![0.0; g.len()];
                    let n = cols as f64;
                    for r in 0..rows {
                        let x = &va[r * cols..(r + 1) * cols];
                        let y = &node.value[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mean = x.iter().sum::<f64>() / n;
                        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                        for j in 0..cols {
                            ga[r * cols + j] = inv * (gr[j] - mean_g - y[j] * mean_gy);
                        }
                    }
                    accumulate(&mut grads[*a], &ga);
                }
                Op::SliceRows(a, start) => {
                    let na = &self.nodes[*a];
                    let mut ga = vec![0.0; na.value.len()];
                    ga[start * cols..start * cols + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads[*a], &ga);
                }
                Op::SliceCols(a, start) => {
                    let na = &self.nodes[*a];
                    let mut ga = vec![0.0; na.value.len()];
                    for r in 0..rows {
                        ga[r * na.cols + start..r * na.cols + start + cols].copy_from_slice(&g[r * cols..(r + 1) * cols]);
                    }
                    accumulate(&mut grads[*a], &ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.nodes[*p].cols;
                        let mut gp = vec![0.0; rows * pc];
                        for r in 0..rows {
                            gp[r * pc..(r + 1) * pc].copy_from_slice(&g[r * cols + offset..r * cols + offset + pc]);
                        }
                        accumulate(&mut grads[*p], &gp);
                        offset += pc;
                    }
                }
                Op::MeanRows(a) => {
                    let na = &self.nodes[*a];
                    let inv = 1.0 / na.rows as f64;
                    let ga: Vec<f64> = (0..na.value.len()).map(|j| g[j % cols] * inv).collect();
                    accumulate(&mut grads[*a], &ga);
                }
                Op::SumAll(a) => {
                    let ga = vec![g[0]; self.nodes[*a].value.len()];
                    accumulate(&mut grads[*a], &ga);
                }
                Op::Pick(a, flat) => {
                    let mut ga = vec![0.0; self.nodes[*a].value.len()];
                    ga[*flat] = g[0];
                    accumulate(&mut grads[*a], &ga);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(name, t).unwrap();
        (s, id)
    }

    #[test]
    fn sum_gives_ones() {
        let (mut store, id) = store_with("w", Tensor::row(vec![0.3, -1.0, 2.5]));
        let grads = {
            let mut tape = Tape::new(&store);
            let w = tape.param(id);
            let loss = tape.sum(w);
            tape.backward(loss).unwrap()
        };
        store.accumulate(&grads).unwrap();
        assert_eq!(store.get(id).grad().unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_square_gives_value() {
        let v = vec![0.5, -2.0, 3.0, 0.0];
        let (store, id) = store_with("w", Tensor::matrix(2, 2, v.clone()).unwrap());
        let mut tape = Tape::new(&store);
        let w = tape.param(id);
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(id).unwrap(), v.as_slice());
    }

    #[test]
    fn backward_errors() {
        let (store, id) = store_with("w", Tensor::row(vec![1.0, 2.0]));
        let mut t1 = Tape::new(&store);
        let w = t1.param(id);
        assert!(matches!(t1.backward(w), Err(NnError::ShapeMismatch(_))));
        let s = t1.sum(w);
        let t2 = Tape::new(&store);
        assert!(matches!(t2.backward(s), Err(NnError::GraphNotRecorded)));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let v: Vec<f64> = (0..12).map(|i| (i as f64 * 1.7).sin() * 30.0).collect();
        let s = softmax_rows(&v, 4);
        for row in s.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_moments() {
        let v: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).cos() * 5.0 + i as f64).collect();
        let y = layer_norm_rows(&v, 8, 1e-12);
        for row in y.chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }
}
