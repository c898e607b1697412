//! Dynamically recorded computation tape with reverse-mode accumulation.

use std::cell::{Ref, RefCell};

use rand::Rng;

use super::kernels::{dot, matmul_nn, matmul_nt, matmul_tn};
use super::params::Gradients;
use super::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Key sets for a fused attention op: `keys[i]` lists the (sorted) key
/// positions query `i` may attend to. An empty list yields a zero output row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionRows {
    keys: Vec<Vec<usize>>,
    offsets: Vec<usize>,
}

impl AttentionRows {
    pub fn new(keys: Vec<Vec<usize>>) -> Self {
        let mut offsets = Vec::with_capacity(keys.len() + 1);
        let mut total = 0;
        offsets.push(0);
        for k in &keys {
            total += k.len();
            offsets.push(total);
        }
        Self { keys, offsets }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self, row: usize) -> &[usize] {
        &self.keys[row]
    }

    /// Total number of (query, key) pairs scored.
    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Relu(usize),
    Gelu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: usize,
        keep: Vec<f64>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    MeanRows {
        x: usize,
        mask: Vec<bool>,
        count: usize,
    },
    MaxRows {
        x: usize,
        argmax: Vec<usize>,
    },
    L2NormalizeRows {
        x: usize,
        norms: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
    BceWithLogits {
        logits: usize,
        targets: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        rows: AttentionRows,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::Gather { .. } => "gather",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::MeanRows { .. } => "mean_rows",
            Op::MaxRows { .. } => "max_rows",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::Attention { .. } => "attention",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// A single forward graph. Not `Sync`; build one tape per worker.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
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

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Leaf that receives a gradient when `requires_grad` is set.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_node(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Handle to node `id`, if it exists.
    pub fn var(&self, id: usize) -> Option<Var<'_>> {
        (id < self.len()).then_some(Var { tape: self, id })
    }

    pub fn value(&self, var: Var<'_>) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[var.id].value)
    }

    fn push_node(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite(format!("{} produced a non-finite value", op.name())));
        }
        let tracked = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].tracked)
        };
        Ok(self.push_node(value, op, tracked))
    }

    fn shape_of(&self, id: usize) -> [usize; 2] {
        self.nodes.borrow()[id].value.shape()
    }

    fn check_same(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa != sb {
            return Err(Error::shape(op, &[sa, sb]));
        }
        Ok(())
    }

    fn map(&self, x: usize, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'_>> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x].value;
            Tensor {
                rows: xv.rows,
                cols: xv.cols,
                data: xv.data.iter().map(|&v| f(v)).collect(),
            }
        };
        self.push(value, op, &[x])
    }

    fn zip(&self, a: usize, b: usize, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'_>> {
        let name = op.name();
        self.check_same(name, a, b)?;
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            Tensor {
                rows: av.rows,
                cols: av.cols,
                data: av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect(),
            }
        };
        self.push(value, op, &[a, b])
    }

    /// Stacks vars with equal column counts vertically.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_rows of nothing".into()));
        }
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let cols = nodes[ids[0]].value.cols;
            let mut data = Vec::new();
            let mut rows = 0;
            for &i in &ids {
                let v = &nodes[i].value;
                if v.cols != cols {
                    let shapes: Vec<_> = ids.iter().map(|&j| nodes[j].value.shape()).collect();
                    return Err(Error::shape("concat_rows", &shapes));
                }
                rows += v.rows;
                data.extend_from_slice(&v.data);
            }
            Tensor { rows, cols, data }
        };
        self.push(value, Op::ConcatRows(ids.clone()), &ids)
    }

    /// Joins vars with equal row counts side by side.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of nothing".into()));
        }
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[ids[0]].value.rows;
            if ids.iter().any(|&i| nodes[i].value.rows != rows) {
                let shapes: Vec<_> = ids.iter().map(|&j| nodes[j].value.shape()).collect();
                return Err(Error::shape("concat_cols", &shapes));
            }
            let cols: usize = ids.iter().map(|&i| nodes[i].value.cols).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &i in &ids {
                    data.extend_from_slice(nodes[i].value.row(r));
                }
            }
            Tensor { rows, cols, data }
        };
        self.push(value, Op::ConcatCols(ids.clone()), &ids)
    }

    /// Embedding lookup: row `i` of the result is `table[ids[i]]`.
    pub fn gather<'t>(&'t self, table: Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.id].value;
            let mut data = Vec::with_capacity(ids.len() * t.cols);
            for &i in ids {
                if i >= t.rows {
                    return Err(Error::InvalidArgument(format!(
                        "gather index {i} out of range for table with {} rows",
                        t.rows
                    )));
                }
                data.extend_from_slice(t.row(i));
            }
            Tensor {
                rows: ids.len(),
                cols: t.cols,
                data,
            }
        };
        self.push(
            value,
            Op::Gather {
                table: table.id,
                ids: ids.to_vec(),
            },
            &[table.id],
        )
    }

    /// Multi-head attention over explicit per-query key sets.
    ///
    /// `q`, `k`, `v` are `L x d` with heads laid out as contiguous column
    /// blocks of width `d / heads`. Only the listed (query, key) pairs are
    /// scored, so memory is proportional to `rows.total()`.
    pub fn attention<'t>(
        &'t self,
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        heads: usize,
        rows: AttentionRows,
    ) -> Result<Var<'t>> {
        let (sq, sk, sv) = (q.shape(), k.shape(), v.shape());
        if sq != sk || sq != sv || heads == 0 || sq[1] % heads != 0 || rows.len() != sq[0] {
            return Err(Error::shape("attention", &[sq, sk, sv, [rows.len(), heads]]));
        }
        if rows.keys.iter().flatten().any(|&j| j >= sq[0]) {
            return Err(Error::InvalidArgument("attention key index out of range".into()));
        }
        let (len, dim) = (sq[0], sq[1]);
        let hd = dim / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let total = rows.total();
        let mut probs = vec![0.0; heads * total];
        let mut out = vec![0.0; len * dim];
        {
            let nodes = self.nodes.borrow();
            let (qv, kv, vv) = (&nodes[q.id].value.data, &nodes[k.id].value.data, &nodes[v.id].value.data);
            for h in 0..heads {
                let c0 = h * hd;
                for i in 0..len {
                    let keys = &rows.keys[i];
                    if keys.is_empty() {
                        continue;
                    }
                    let p = &mut probs[h * total + rows.offsets[i]..h * total + rows.offsets[i + 1]];
                    let qi = &qv[i * dim + c0..i * dim + c0 + hd];
                    let mut max = f64::NEG_INFINITY;
                    for (slot, &j) in p.iter_mut().zip(keys) {
                        *slot = dot(qi, &kv[j * dim + c0..j * dim + c0 + hd]) * scale;
                        max = max.max(*slot);
                    }
                    let mut z = 0.0;
                    for slot in p.iter_mut() {
                        *slot = (*slot - max).exp();
                        z += *slot;
                    }
                    let out_i = &mut out[i * dim + c0..i * dim + c0 + hd];
                    for (slot, &j) in p.iter_mut().zip(keys) {
                        *slot /= z;
                        let vj = &vv[j * dim + c0..j * dim + c0 + hd];
                        for (o, &x) in out_i.iter_mut().zip(vj) {
                            *o += *slot * x;
                        }
                    }
                }
            }
        }
        let value = Tensor {
            rows: len,
            cols: dim,
            data: out,
        };
        self.push(
            value,
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                heads,
                rows,
                probs,
            },
            &[q.id, k.id, v.id],
        )
    }

    /// Attention probabilities recorded by an attention node, as
    /// `(head, query) -> [(key, prob)]`. `None` if `var` is not attention.
    pub fn attention_probs(&self, var: Var<'_>) -> Option<Vec<Vec<Vec<(usize, f64)>>>> {
        let nodes = self.nodes.borrow();
        match &nodes[var.id].op {
            Op::Attention { heads, rows, probs, .. } => {
                let total = rows.total();
                Some(
                    (0..*heads)
                        .map(|h| {
                            (0..rows.len())
                                .map(|i| {
                                    rows.keys[i]
                                        .iter()
                                        .enumerate()
                                        .map(|(s, &j)| (j, probs[h * total + rows.offsets[i] + s]))
                                        .collect()
                                })
                                .collect()
                        })
                        .collect(),
                )
            }
            _ => None,
        }
    }

    /// Reverse-mode sweep from a `1 x 1` loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape();
        if shape != [1, 1] {
            return Err(Error::shape("backward (loss must be scalar)", &[shape]));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients::new(grads))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, f: impl FnOnce(&mut Tensor)) {
    if !nodes[id].tracked {
        return;
    }
    let slot = &mut grads[id];
    if slot.is_none() {
        let [r, c] = nodes[id].value.shape();
        *slot = Some(Tensor::zeros(r, c));
    }
    f(slot.as_mut().unwrap());
}

fn backprop_elementwise(
    grads: &mut [Option<Tensor>],
    nodes: &[Node],
    x: usize,
    g: &Tensor,
    deriv: impl Fn(f64, f64) -> f64,
    y: &Tensor,
) {
    let xv = &nodes[x].value;
    accumulate(grads, nodes, x, |gx| {
        for i in 0..gx.data.len() {
            gx.data[i] += g.data[i] * deriv(xv.data[i], y.data[i]);
        }
    });
}

fn backprop_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let y = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |ga| ga.add_assign(g));
            accumulate(grads, nodes, *b, |gb| gb.add_assign(g));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |ga| ga.add_assign(g));
            accumulate(grads, nodes, *b, |gb| {
                gb.data.iter_mut().zip(&g.data).for_each(|(o, v)| *o -= v)
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..g.data.len() {
                    ga.data[i] += g.data[i] * bv.data[i];
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for i in 0..g.data.len() {
                    gb.data[i] += g.data[i] * av.data[i];
                }
            });
        }
        Op::AddRow(a, b) => {
            accumulate(grads, nodes, *a, |ga| ga.add_assign(g));
            accumulate(grads, nodes, *b, |gb| {
                for r in 0..g.rows {
                    for (o, v) in gb.data.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            });
        }
        Op::Scale(a, c) => {
            accumulate(grads, nodes, *a, |ga| {
                ga.data.iter_mut().zip(&g.data).for_each(|(o, v)| *o += c * v)
            });
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows, av.cols, bv.cols);
            accumulate(grads, nodes, *a, |ga| matmul_nt(&g.data, &bv.data, &mut ga.data, m, n, k));
            accumulate(grads, nodes, *b, |gb| matmul_tn(&av.data, &g.data, &mut gb.data, k, m, n));
        }
        Op::MatMulNt(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows, av.cols, bv.rows);
            accumulate(grads, nodes, *a, |ga| matmul_nn(&g.data, &bv.data, &mut ga.data, m, n, k));
            accumulate(grads, nodes, *b, |gb| matmul_tn(&g.data, &av.data, &mut gb.data, n, m, k));
        }
        Op::Transpose(a) => {
            accumulate(grads, nodes, *a, |ga| ga.add_assign(&g.transpose()));
        }
        Op::Relu(x) => backprop_elementwise(grads, nodes, *x, g, |x, _| if x > 0.0 { 1.0 } else { 0.0 }, y),
        Op::Gelu(x) => backprop_elementwise(grads, nodes, *x, g, |x, _| gelu_grad(x), y),
        Op::Tanh(x) => backprop_elementwise(grads, nodes, *x, g, |_, y| 1.0 - y * y, y),
        Op::Sigmoid(x) => backprop_elementwise(grads, nodes, *x, g, |_, y| y * (1.0 - y), y),
        Op::Exp(x) => backprop_elementwise(grads, nodes, *x, g, |_, y| y, y),
        Op::Log(x) => backprop_elementwise(grads, nodes, *x, g, |x, _| 1.0 / x, y),
        Op::Softmax(x) => {
            accumulate(grads, nodes, *x, |gx| {
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s = dot(yr, gr);
                    for (o, (&yv, &gv)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o += yv * (gv - s);
                    }
                }
            });
        }
        Op::LogSoftmax(x) => {
            accumulate(grads, nodes, *x, |gx| {
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s: f64 = gr.iter().sum();
                    for (o, (&yv, &gv)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o += gv - yv.exp() * s;
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gam = &nodes[*gamma].value.data;
            let (rows, n) = (y.rows, y.cols);
            accumulate(grads, nodes, *gamma, |gg| {
                for r in 0..rows {
                    for c in 0..n {
                        gg.data[c] += g.data[r * n + c] * xhat[r * n + c];
                    }
                }
            });
            accumulate(grads, nodes, *beta, |gb| {
                for r in 0..rows {
                    for (o, v) in gb.data.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            });
            accumulate(grads, nodes, *x, |gx| {
                let mut dxhat = vec![0.0; n];
                for r in 0..rows {
                    let xh = &xhat[r * n..(r + 1) * n];
                    for c in 0..n {
                        dxhat[c] = g.data[r * n + c] * gam[c];
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx = dot(&dxhat, xh);
                    let k = inv_std[r] / n as f64;
                    for c in 0..n {
                        gx.data[r * n + c] += k * (n as f64 * dxhat[c] - sum_d - xh[c] * sum_dx);
                    }
                }
            });
        }
        Op::Dropout { x, keep } => {
            accumulate(grads, nodes, *x, |gx| {
                for i in 0..keep.len() {
                    gx.data[i] += g.data[i] * keep[i];
                }
            });
        }
        Op::Gather { table, ids } => {
            accumulate(grads, nodes, *table, |gt| {
                for (r, &i) in ids.iter().enumerate() {
                    for (o, v) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            });
        }
        Op::SliceRows { x, start } => {
            accumulate(grads, nodes, *x, |gx| {
                for r in 0..g.rows {
                    for (o, v) in gx.row_mut(start + r).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            });
        }
        Op::SliceCols { x, start } => {
            accumulate(grads, nodes, *x, |gx| {
                for r in 0..g.rows {
                    let dst = &mut gx.row_mut(r)[*start..start + g.cols];
                    for (o, v) in dst.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
            });
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            for &i in ids {
                let rows = nodes[i].value.rows;
                accumulate(grads, nodes, i, |gi| {
                    for r in 0..rows {
                        for (o, v) in gi.row_mut(r).iter_mut().zip(g.row(offset + r)) {
                            *o += v;
                        }
                    }
                });
                offset += rows;
            }
        }
        Op::ConcatCols(ids) => {
            let mut offset = 0;
            for &i in ids {
                let cols = nodes[i].value.cols;
                accumulate(grads, nodes, i, |gi| {
                    for r in 0..g.rows {
                        for (o, v) in gi.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + cols]) {
                            *o += v;
                        }
                    }
                });
                offset += cols;
            }
        }
        Op::MeanRows { x, mask, count } => {
            let inv = 1.0 / *count as f64;
            accumulate(grads, nodes, *x, |gx| {
                for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for (o, v) in gx.row_mut(r).iter_mut().zip(&g.data) {
                        *o += v * inv;
                    }
                }
            });
        }
        Op::MaxRows { x, argmax } => {
            let cols = g.cols;
            accumulate(grads, nodes, *x, |gx| {
                for (c, &r) in argmax.iter().enumerate() {
                    gx.data[r * cols + c] += g.data[c];
                }
            });
        }
        Op::L2NormalizeRows { x, norms } => {
            accumulate(grads, nodes, *x, |gx| {
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s = dot(yr, gr);
                    let inv = 1.0 / norms[r];
                    for (o, (&yv, &gv)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o += (gv - yv * s) * inv;
                    }
                }
            });
        }
        Op::Sum(x) => {
            let gv = g.data[0];
            accumulate(grads, nodes, *x, |gx| gx.data.iter_mut().for_each(|o| *o += gv));
        }
        Op::Mean(x) => {
            let gv = g.data[0] / nodes[*x].value.len() as f64;
            accumulate(grads, nodes, *x, |gx| gx.data.iter_mut().for_each(|o| *o += gv));
        }
        Op::BceWithLogits { logits, targets } => {
            let z = &nodes[*logits].value.data;
            let scale = g.data[0] / z.len() as f64;
            accumulate(grads, nodes, *logits, |gz| {
                for i in 0..z.len() {
                    gz.data[i] += scale * (sigmoid(z[i]) - targets[i]);
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            rows,
            probs,
        } => {
            let (qv, kv, vv) = (&nodes[*q].value, &nodes[*k].value, &nodes[*v].value);
            let (len, dim) = (qv.rows, qv.cols);
            let hd = dim / heads;
            let scale = 1.0 / (hd as f64).sqrt();
            let total = rows.total();
            let mut dq = vec![0.0; len * dim];
            let mut dk = vec![0.0; len * dim];
            let mut dv = vec![0.0; len * dim];
            let mut dscore = Vec::new();
            for h in 0..*heads {
                let c0 = h * hd;
                for i in 0..len {
                    let keys = &rows.keys[i];
                    if keys.is_empty() {
                        continue;
                    }
                    let p = &probs[h * total + rows.offsets[i]..h * total + rows.offsets[i + 1]];
                    let gi = &g.data[i * dim + c0..i * dim + c0 + hd];
                    dscore.clear();
                    let mut weighted = 0.0;
                    for (&pj, &j) in p.iter().zip(keys) {
                        let dp = dot(gi, &vv.data[j * dim + c0..j * dim + c0 + hd]);
                        weighted += pj * dp;
                        dscore.push(dp);
                        for (o, &gv) in dv[j * dim + c0..j * dim + c0 + hd].iter_mut().zip(gi) {
                            *o += pj * gv;
                        }
                    }
                    let qi = &qv.data[i * dim + c0..i * dim + c0 + hd];
                    for ((&pj, &j), ds) in p.iter().zip(keys).zip(dscore.iter_mut()) {
                        *ds = pj * (*ds - weighted) * scale;
                        let kj = &kv.data[j * dim + c0..j * dim + c0 + hd];
                        for (o, &kx) in dq[i * dim + c0..i * dim + c0 + hd].iter_mut().zip(kj) {
                            *o += *ds * kx;
                        }
                        for (o, &qx) in dk[j * dim + c0..j * dim + c0 + hd].iter_mut().zip(qi) {
                            *o += *ds * qx;
                        }
                    }
                }
            }
            for (node, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                accumulate(grads, nodes, node, |gx| {
                    gx.data.iter_mut().zip(&d).for_each(|(o, x)| *o += x)
                });
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> [usize; 2] {
        self.tape.shape_of(self.id)
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.value(*self).clone()
    }

    /// Forward value of a `1 x 1` var.
    pub fn item(&self) -> Result<f64> {
        self.tape.value(*self).item()
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.zip(self.id, other.id, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.zip(self.id, other.id, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.zip(self.id, other.id, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), row.shape());
        if sb[0] != 1 || sa[1] != sb[1] {
            return Err(Error::shape("add_row", &[sa, sb]));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (av, bv) = (&nodes[self.id].value, &nodes[row.id].value);
            let mut out = av.clone();
            for r in 0..out.rows {
                out.row_mut(r).iter_mut().zip(&bv.data).for_each(|(o, b)| *o += b);
            }
            out
        };
        self.tape.push(value, Op::AddRow(self.id, row.id), &[self.id, row.id])
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        self.tape.map(self.id, Op::Scale(self.id, factor), |v| v * factor)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa[1] != sb[0] {
            return Err(Error::shape("matmul", &[sa, sb]));
        }
        let mut out = Tensor::zeros(sa[0], sb[1]);
        {
            let nodes = self.tape.nodes.borrow();
            matmul_nn(&nodes[self.id].value.data, &nodes[other.id].value.data, &mut out.data, sa[0], sa[1], sb[1]);
        }
        self.tape.push(out, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    /// `self * other^T`.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa[1] != sb[1] {
            return Err(Error::shape("matmul_nt", &[sa, sb]));
        }
        let mut out = Tensor::zeros(sa[0], sb[0]);
        {
            let nodes = self.tape.nodes.borrow();
            matmul_nt(&nodes[self.id].value.data, &nodes[other.id].value.data, &mut out.data, sa[0], sa[1], sb[0]);
        }
        self.tape.push(out, Op::MatMulNt(self.id, other.id), &[self.id, other.id])
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = self.tape.value(self).transpose();
        self.tape.push(value, Op::Transpose(self.id), &[self.id])
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.tape.map(self.id, Op::Relu(self.id), |v| v.max(0.0))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Result<Var<'t>> {
        self.tape.map(self.id, Op::Gelu(self.id), gelu)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.tape.map(self.id, Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.tape.map(self.id, Op::Sigmoid(self.id), sigmoid)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.tape.map(self.id, Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.tape.map(self.id, Op::Log(self.id), f64::ln)
    }

    /// Row-wise softmax. Where `mask` is given (same shape, `true` = keep),
    /// masked entries get exactly zero probability; a fully masked row is
    /// all zeros.
    pub fn softmax(self, mask: Option<&[bool]>) -> Result<Var<'t>> {
        let shape = self.shape();
        if let Some(m) = mask {
            if m.len() != shape[0] * shape[1] {
                return Err(Error::shape("softmax (mask)", &[shape, [1, m.len()]]));
            }
        }
        let value = {
            let x = self.tape.value(self);
            let mut out = Tensor::zeros(shape[0], shape[1]);
            for r in 0..shape[0] {
                let keep = |c: usize| mask.map_or(true, |m| m[r * shape[1] + c]);
                let xr = x.row(r);
                let max = (0..shape[1])
                    .filter(|&c| keep(c))
                    .map(|c| xr[c])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let orow = out.row_mut(r);
                let mut z = 0.0;
                for c in 0..shape[1] {
                    if keep(c) {
                        orow[c] = (xr[c] - max).exp();
                        z += orow[c];
                    }
                }
                orow.iter_mut().for_each(|v| *v /= z);
            }
            out
        };
        self.tape.push(value, Op::Softmax(self.id), &[self.id])
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        let value = {
            let mut out = self.tape.value(self).clone();
            for r in 0..out.rows {
                let row = out.row_mut(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            out
        };
        self.tape.push(value, Op::LogSoftmax(self.id), &[self.id])
    }

    /// Per-row layer normalization with `1 x n` scale and shift.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        let (sx, sg, sb) = (self.shape(), gamma.shape(), beta.shape());
        if sg != [1, sx[1]] || sb != [1, sx[1]] {
            return Err(Error::shape("layer_norm", &[sx, sg, sb]));
        }
        let (rows, n) = (sx[0], sx[1]);
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = Tensor::zeros(rows, n);
        {
            let nodes = self.tape.nodes.borrow();
            let (x, gv, bv) = (&nodes[self.id].value, &nodes[gamma.id].value.data, &nodes[beta.id].value.data);
            for r in 0..rows {
                let xr = x.row(r);
                let mean = xr.iter().sum::<f64>() / n as f64;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std[r] = inv;
                for c in 0..n {
                    let h = (xr[c] - mean) * inv;
                    xhat[r * n + c] = h;
                    out.data[r * n + c] = h * gv[c] + bv[c];
                }
            }
        }
        self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
            &[self.id, gamma.id, beta.id],
        )
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)`. `p == 0`
    /// returns `self` unchanged.
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, rng: &mut R) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(self);
        }
        let scale = 1.0 / (1.0 - p);
        let (value, keep) = {
            let x = self.tape.value(self);
            let keep: Vec<f64> = (0..x.len())
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
                .collect();
            let data = x.data.iter().zip(&keep).map(|(v, k)| v * k).collect();
            (
                Tensor {
                    rows: x.rows,
                    cols: x.cols,
                    data,
                },
                keep,
            )
        };
        self.tape.push(value, Op::Dropout { x: self.id, keep }, &[self.id])
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if start + len > s[0] || len == 0 {
            return Err(Error::shape("slice_rows", &[s, [start, len]]));
        }
        let value = {
            let x = self.tape.value(self);
            Tensor {
                rows: len,
                cols: s[1],
                data: x.data[start * s[1]..(start + len) * s[1]].to_vec(),
            }
        };
        self.tape.push(value, Op::SliceRows { x: self.id, start }, &[self.id])
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if start + len > s[1] || len == 0 {
            return Err(Error::shape("slice_cols", &[s, [start, len]]));
        }
        let value = {
            let x = self.tape.value(self);
            let mut data = Vec::with_capacity(s[0] * len);
            for r in 0..s[0] {
                data.extend_from_slice(&x.row(r)[start..start + len]);
            }
            Tensor {
                rows: s[0],
                cols: len,
                data,
            }
        };
        self.tape.push(value, Op::SliceCols { x: self.id, start }, &[self.id])
    }

    /// Mean over the rows whose mask entry is `true`; yields `1 x n`.
    pub fn mean_rows(self, mask: &[bool]) -> Result<Var<'t>> {
        let s = self.shape();
        if mask.len() != s[0] {
            return Err(Error::shape("mean_rows (mask)", &[s, [mask.len(), 1]]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::InvalidArgument("mean_rows: every row is masked".into()));
        }
        let value = {
            let x = self.tape.value(self);
            let mut out = vec![0.0; s[1]];
            for r in (0..s[0]).filter(|&r| mask[r]) {
                out.iter_mut().zip(x.row(r)).for_each(|(o, v)| *o += v);
            }
            out.iter_mut().for_each(|v| *v /= count as f64);
            Tensor::row_vector(&out)
        };
        self.tape.push(
            value,
            Op::MeanRows {
                x: self.id,
                mask: mask.to_vec(),
                count,
            },
            &[self.id],
        )
    }

    /// Elementwise max over the rows whose mask entry is `true`; ties go to
    /// the lowest row.
    pub fn max_rows(self, mask: &[bool]) -> Result<Var<'t>> {
        let s = self.shape();
        if mask.len() != s[0] {
            return Err(Error::shape("max_rows (mask)", &[s, [mask.len(), 1]]));
        }
        let Some(first) = mask.iter().position(|&m| m) else {
            return Err(Error::InvalidArgument("max_rows: every row is masked".into()));
        };
        let (value, argmax) = {
            let x = self.tape.value(self);
            let mut best = x.row(first).to_vec();
            let mut argmax = vec![first; s[1]];
            for r in (first + 1..s[0]).filter(|&r| mask[r]) {
                for (c, &v) in x.row(r).iter().enumerate() {
                    if v > best[c] {
                        best[c] = v;
                        argmax[c] = r;
                    }
                }
            }
            (Tensor::row_vector(&best), argmax)
        };
        self.tape.push(value, Op::MaxRows { x: self.id, argmax }, &[self.id])
    }

    /// Scales each row to unit Euclidean norm. Zero rows are an error.
    pub fn l2_normalize_rows(self) -> Result<Var<'t>> {
        let (value, norms) = {
            let mut out = self.tape.value(self).clone();
            let mut norms = Vec::with_capacity(out.rows);
            for r in 0..out.rows {
                let row = out.row_mut(r);
                let norm = dot(row, row).sqrt();
                if norm == 0.0 || !norm.is_finite() {
                    return Err(Error::InvalidArgument(format!("row {r} has zero or non-finite norm")));
                }
                row.iter_mut().for_each(|v| *v /= norm);
                norms.push(norm);
            }
            (out, norms)
        };
        self.tape.push(value, Op::L2NormalizeRows { x: self.id, norms }, &[self.id])
    }

    /// Pairwise cosine similarities between rows: `m x n` for `m x d`, `n x d`.
    pub fn cosine_matrix(self, other: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa[1] != sb[1] {
            return Err(Error::shape("cosine_matrix", &[sa, sb]));
        }
        self.l2_normalize_rows()?.matmul_nt(other.l2_normalize_rows()?)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let v: f64 = self.tape.value(self).data.iter().sum();
        self.tape.push(Tensor::scalar(v), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let v = {
            let x = self.tape.value(self);
            x.data.iter().sum::<f64>() / x.len() as f64
        };
        self.tape.push(Tensor::scalar(v), Op::Mean(self.id), &[self.id])
    }

    /// Mean binary cross-entropy of sigmoid(self) against `targets`.
    pub fn bce_with_logits(self, targets: &Tensor) -> Result<Var<'t>> {
        let s = self.shape();
        if targets.shape() != s {
            return Err(Error::shape("bce_with_logits", &[s, targets.shape()]));
        }
        let v = {
            let z = self.tape.value(self);
            z.data
                .iter()
                .zip(&targets.data)
                .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
                .sum::<f64>()
                / z.len() as f64
        };
        self.tape.push(
            Tensor::scalar(v),
            Op::BceWithLogits {
                logits: self.id,
                targets: targets.data.clone(),
            },
            &[self.id],
        )
    }
}
