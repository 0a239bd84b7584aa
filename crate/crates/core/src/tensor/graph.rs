//! Recorded-graph reverse-mode differentiation.
//!
//! Operations append nodes to a tape in execution order; `backward` replays
//! the tape in reverse. Each call to `backward` runs a full reverse pass into
//! scratch buffers and then adds the result into the persistent per-node
//! gradients, so repeated calls accumulate (two calls double every gradient).
//!
//! A graph and its `Var` handles are confined to one thread (`Rc` inside).
//! Detached `Tensor` values are plain data and move freely. The op bodies
//! read their inputs through scoped borrows of the tape; only the final
//! `push` takes the mutable borrow.

use std::cell::RefCell;
use std::rc::Rc;

use super::{
    broadcast_shape, sigmoid, silu, softplus, BroadcastIter, Result, Tensor, TensorError,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnKind {
    Neg,
    Exp,
    Softplus,
    Silu,
    Sigmoid,
    Relu,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    Bin(BinKind, usize, usize),
    Un(UnKind, usize),
    Scale(usize, f64),
    /// Depthwise causal conv over axis 0 with left zero padding.
    CausalConv1d {
        x: usize,
        w: usize,
        b: usize,
    },
    /// Row gather from a 2-d table (embedding lookup).
    Lookup {
        table: usize,
        rows: Vec<usize>,
    },
    /// Inserted token rows occupy `positions` in the output.
    InsertRows {
        seq: usize,
        tokens: usize,
        positions: Vec<usize>,
    },
    /// Surviving row indices of the input, in order.
    DropRows {
        seq: usize,
        kept: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    SliceRows {
        a: usize,
        start: usize,
    },
    SliceCols {
        a: usize,
        start: usize,
    },
    PadCols {
        a: usize,
        before: usize,
    },
    ConcatCols(usize, usize),
    Reshape(usize),
    SumAll(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
}

struct Tape {
    nodes: Vec<Node>,
}

/// A recording graph. Cloning is cheap (shared tape).
#[derive(Clone)]
pub struct Graph {
    tape: Rc<RefCell<Tape>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a graph.
#[derive(Clone)]
pub struct Var {
    id: usize,
    graph: Graph,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            tape: Rc::new(RefCell::new(Tape { nodes: Vec::new() })),
        }
    }

    fn same_graph(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.tape, &other.tape)
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var> {
        #[cfg(debug_assertions)]
        {
            // Forward ops must not silently produce NaN/Inf from finite inputs.
            if !value.all_finite() {
                return Err(TensorError::NonFinite { op: op_name(&op) });
            }
        }
        let grad = vec![0.0; value.numel()];
        let mut tape = self.tape.borrow_mut();
        tape.nodes.push(Node { value, grad, op });
        Ok(Var {
            id: tape.nodes.len() - 1,
            graph: self.clone(),
        })
    }

    /// Registers a tensor as a leaf (input or parameter).
    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf)
            .expect("leaf insertion cannot fail on finite data")
    }

    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse pass from a scalar loss. Adds this pass's gradients on top of
    /// whatever previous passes accumulated.
    pub fn backward(&self, loss: &Var) -> Result<()> {
        if !self.same_graph(&loss.graph) {
            return Err(TensorError::GraphMismatch);
        }
        let mut scratch: Vec<Vec<f64>>;
        {
            let tape = self.tape.borrow();
            let nodes = &tape.nodes;
            if nodes[loss.id].value.numel() != 1 {
                return Err(TensorError::NonScalarLoss {
                    shape: nodes[loss.id].value.shape().to_vec(),
                });
            }
            scratch = nodes.iter().map(|n| vec![0.0; n.value.numel()]).collect();
            scratch[loss.id][0] = 1.0;
            for id in (0..=loss.id).rev() {
                if scratch[id].iter().all(|&g| g == 0.0) {
                    continue;
                }
                let g = std::mem::take(&mut scratch[id]);
                let value_shape = nodes[id].value.shape();
                match &nodes[id].op {
                    Op::Leaf => {}
                    Op::Matmul(a, b) => {
                        let (a, b) = (*a, *b);
                        let (m, k) = (nodes[a].value.shape()[0], nodes[a].value.shape()[1]);
                        let n = nodes[b].value.shape()[1];
                        // a.grad += g . b^T
                        {
                            let bv = nodes[b].value.data();
                            let da = &mut scratch[a];
                            for i in 0..m {
                                let grow = &g[i * n..(i + 1) * n];
                                let da_row = &mut da[i * k..(i + 1) * k];
                                for p in 0..k {
                                    let brow = &bv[p * n..(p + 1) * n];
                                    let mut acc = 0.0;
                                    for j in 0..n {
                                        acc += grow[j] * brow[j];
                                    }
                                    da_row[p] += acc;
                                }
                            }
                        }
                        // b.grad += a^T . g
                        {
                            let av = nodes[a].value.data();
                            let db = &mut scratch[b];
                            for i in 0..m {
                                let grow = &g[i * n..(i + 1) * n];
                                for p in 0..k {
                                    let aip = av[i * k + p];
                                    if aip == 0.0 {
                                        continue;
                                    }
                                    let db_row = &mut db[p * n..(p + 1) * n];
                                    for j in 0..n {
                                        db_row[j] += aip * grow[j];
                                    }
                                }
                            }
                        }
                    }
                    Op::Bin(kind, a, b) => {
                        let (kind, a, b) = (*kind, *a, *b);
                        let it = BroadcastIter::new(
                            value_shape,
                            nodes[a].value.shape(),
                            nodes[b].value.shape(),
                        );
                        match kind {
                            BinKind::Add => {
                                it.for_each(|i, ao, bo| {
                                    scratch[a][ao] += g[i];
                                    scratch[b][bo] += g[i];
                                });
                            }
                            BinKind::Sub => {
                                it.for_each(|i, ao, bo| {
                                    scratch[a][ao] += g[i];
                                    scratch[b][bo] -= g[i];
                                });
                            }
                            BinKind::Mul => {
                                let av = nodes[a].value.data();
                                let bv = nodes[b].value.data();
                                it.for_each(|i, ao, bo| {
                                    scratch[a][ao] += g[i] * bv[bo];
                                    scratch[b][bo] += g[i] * av[ao];
                                });
                            }
                        }
                    }
                    Op::Un(kind, a) => {
                        let (kind, a) = (*kind, *a);
                        let xv = nodes[a].value.data();
                        let out = nodes[id].value.data();
                        let da = &mut scratch[a];
                        for i in 0..g.len() {
                            let d = match kind {
                                UnKind::Neg => -1.0,
                                UnKind::Exp => out[i],
                                UnKind::Softplus => sigmoid(xv[i]),
                                UnKind::Silu => {
                                    let s = sigmoid(xv[i]);
                                    s * (1.0 + xv[i] * (1.0 - s))
                                }
                                UnKind::Sigmoid => out[i] * (1.0 - out[i]),
                                UnKind::Relu => {
                                    if xv[i] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                            };
                            da[i] += g[i] * d;
                        }
                    }
                    Op::Scale(a, c) => {
                        let (a, c) = (*a, *c);
                        let da = &mut scratch[a];
                        for i in 0..g.len() {
                            da[i] += g[i] * c;
                        }
                    }
                    Op::CausalConv1d { x, w, b } => {
                        let (x, w, b) = (*x, *w, *b);
                        let t_len = nodes[x].value.shape()[0];
                        let l = nodes[x].value.shape()[1];
                        let k_len = nodes[w].value.shape()[0];
                        let xv = nodes[x].value.data();
                        let wv = nodes[w].value.data();
                        for t in 0..t_len {
                            for c in 0..l {
                                let gv = g[t * l + c];
                                if gv == 0.0 {
                                    continue;
                                }
                                scratch[b][c] += gv;
                                for k in 0..k_len {
                                    let src = t as i64 - (k_len as i64 - 1) + k as i64;
                                    if src >= 0 && (src as usize) < t_len {
                                        let s = src as usize;
                                        scratch[w][k * l + c] += gv * xv[s * l + c];
                                        scratch[x][s * l + c] += gv * wv[k * l + c];
                                    }
                                }
                            }
                        }
                    }
                    Op::Lookup { table, rows } => {
                        let table = *table;
                        let cols = nodes[table].value.shape()[1];
                        for (i, &r) in rows.iter().enumerate() {
                            let dst = &mut scratch[table][r * cols..(r + 1) * cols];
                            let src = &g[i * cols..(i + 1) * cols];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    Op::InsertRows {
                        seq,
                        tokens,
                        positions,
                    } => {
                        let (seq, tokens) = (*seq, *tokens);
                        let cols: usize = value_shape.iter().skip(1).product();
                        let out_rows = value_shape[0];
                        let mut tok_i = 0usize;
                        let mut seq_i = 0usize;
                        for r in 0..out_rows {
                            let src = &g[r * cols..(r + 1) * cols];
                            if tok_i < positions.len() && positions[tok_i] == r {
                                let dst =
                                    &mut scratch[tokens][tok_i * cols..(tok_i + 1) * cols];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += s;
                                }
                                tok_i += 1;
                            } else {
                                let dst = &mut scratch[seq][seq_i * cols..(seq_i + 1) * cols];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += s;
                                }
                                seq_i += 1;
                            }
                        }
                    }
                    Op::DropRows { seq, kept } => {
                        let seq = *seq;
                        let cols: usize = value_shape.iter().skip(1).product();
                        for (i, &r) in kept.iter().enumerate() {
                            let dst = &mut scratch[seq][r * cols..(r + 1) * cols];
                            let src = &g[i * cols..(i + 1) * cols];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    Op::ConcatRows(parts) => {
                        let mut offset = 0usize;
                        for &p in parts {
                            let n = nodes[p].value.numel();
                            let dst = &mut scratch[p];
                            let src = &g[offset..offset + n];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                            offset += n;
                        }
                    }
                    Op::SliceRows { a, start } => {
                        let (a, start) = (*a, *start);
                        let cols: usize = nodes[a].value.shape().iter().skip(1).product();
                        let dst = &mut scratch[a][start * cols..start * cols + g.len()];
                        for (d, s) in dst.iter_mut().zip(&g) {
                            *d += s;
                        }
                    }
                    Op::SliceCols { a, start } => {
                        let (a, start) = (*a, *start);
                        let in_cols = nodes[a].value.shape()[1];
                        let out_cols = value_shape[1];
                        for r in 0..value_shape[0] {
                            let dst = &mut scratch[a]
                                [r * in_cols + start..r * in_cols + start + out_cols];
                            let src = &g[r * out_cols..(r + 1) * out_cols];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    Op::PadCols { a, before } => {
                        let (a, before) = (*a, *before);
                        let in_cols = nodes[a].value.shape()[1];
                        let out_cols = value_shape[1];
                        for r in 0..value_shape[0] {
                            let dst = &mut scratch[a][r * in_cols..(r + 1) * in_cols];
                            let src = &g[r * out_cols + before..r * out_cols + before + in_cols];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    Op::ConcatCols(a, b) => {
                        let (a, b) = (*a, *b);
                        let ac = nodes[a].value.shape()[1];
                        let bc = nodes[b].value.shape()[1];
                        let out_cols = ac + bc;
                        for r in 0..value_shape[0] {
                            {
                                let dst = &mut scratch[a][r * ac..(r + 1) * ac];
                                let src = &g[r * out_cols..r * out_cols + ac];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                            let dst = &mut scratch[b][r * bc..(r + 1) * bc];
                            let src = &g[r * out_cols + ac..(r + 1) * out_cols];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    Op::Reshape(a) => {
                        let dst = &mut scratch[*a];
                        for (d, s) in dst.iter_mut().zip(&g) {
                            *d += s;
                        }
                    }
                    Op::SumAll(a) => {
                        let gv = g[0];
                        for s in scratch[*a].iter_mut() {
                            *s += gv;
                        }
                    }
                    Op::SoftmaxCrossEntropy { logits, labels } => {
                        let logits = *logits;
                        let gv = g[0];
                        let batch = nodes[logits].value.shape()[0];
                        let classes = nodes[logits].value.shape()[1];
                        let lv = nodes[logits].value.data();
                        for i in 0..batch {
                            let row = &lv[i * classes..(i + 1) * classes];
                            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
                            let dst = &mut scratch[logits][i * classes..(i + 1) * classes];
                            for c in 0..classes {
                                let sm = (row[c] - m).exp() / denom;
                                let onehot = if c == labels[i] { 1.0 } else { 0.0 };
                                dst[c] += gv * (sm - onehot) / batch as f64;
                            }
                        }
                    }
                }
                scratch[id] = g;
            }
        }
        let mut tape = self.tape.borrow_mut();
        for (node, s) in tape.nodes.iter_mut().zip(scratch.into_iter()) {
            for (dst, src) in node.grad.iter_mut().zip(s.into_iter()) {
                *dst += src;
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul(..) => "matmul",
        Op::Bin(BinKind::Add, ..) => "add",
        Op::Bin(BinKind::Sub, ..) => "sub",
        Op::Bin(BinKind::Mul, ..) => "mul",
        Op::Un(UnKind::Neg, ..) => "neg",
        Op::Un(UnKind::Exp, ..) => "exp",
        Op::Un(UnKind::Softplus, ..) => "softplus",
        Op::Un(UnKind::Silu, ..) => "silu",
        Op::Un(UnKind::Sigmoid, ..) => "sigmoid",
        Op::Un(UnKind::Relu, ..) => "relu",
        Op::Scale(..) => "scale",
        Op::CausalConv1d { .. } => "causal_conv1d",
        Op::Lookup { .. } => "lookup",
        Op::InsertRows { .. } => "insert_rows",
        Op::DropRows { .. } => "drop_rows",
        Op::ConcatRows(..) => "concat_rows",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::PadCols { .. } => "pad_cols",
        Op::ConcatCols(..) => "concat_cols",
        Op::Reshape(..) => "reshape",
        Op::SumAll(..) => "sum_all",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
    }
}

/// Output index of each original row after inserting tokens at `positions`
/// (positions are indices in the lengthened sequence).
pub fn insert_mapping(orig_len: usize, positions: &[usize]) -> Vec<usize> {
    let out_len = orig_len + positions.len();
    let mut map = Vec::with_capacity(orig_len);
    let mut tok_i = 0usize;
    for r in 0..out_len {
        if tok_i < positions.len() && positions[tok_i] == r {
            tok_i += 1;
        } else {
            map.push(r);
        }
    }
    map
}

fn validate_positions(op: &'static str, positions: &[usize], out_len: usize) -> Result<()> {
    for w in positions.windows(2) {
        if w[1] <= w[0] {
            return Err(TensorError::PositionsNotIncreasing { op });
        }
    }
    if let Some(&last) = positions.last() {
        if last >= out_len {
            return Err(TensorError::PositionOutOfRange {
                op,
                pos: last,
                len: out_len,
            });
        }
    }
    Ok(())
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    /// The graph this handle records into.
    pub fn graph(&self) -> Graph {
        self.graph.clone()
    }

    pub fn value(&self) -> Tensor {
        self.graph.tape.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.tape.borrow().nodes[self.id]
            .value
            .shape()
            .to_vec()
    }

    /// Accumulated gradient (zeros before any backward pass touches it).
    pub fn grad(&self) -> Tensor {
        let tape = self.graph.tape.borrow();
        let node = &tape.nodes[self.id];
        Tensor::new(node.value.shape().to_vec(), node.grad.clone())
            .expect("grad buffer matches value shape")
    }

    fn binary(&self, other: &Var, kind: BinKind, name: &'static str) -> Result<Var> {
        if !self.graph.same_graph(&other.graph) {
            return Err(TensorError::GraphMismatch);
        }
        let (out_shape, out) = {
            let tape = self.graph.tape.borrow();
            let av = &tape.nodes[self.id].value;
            let bv = &tape.nodes[other.id].value;
            let out_shape = broadcast_shape(name, av.shape(), bv.shape())?;
            let mut out = vec![0.0; out_shape.iter().product()];
            let it = BroadcastIter::new(&out_shape, av.shape(), bv.shape());
            let (ad, bd) = (av.data(), bv.data());
            match kind {
                BinKind::Add => it.for_each(|i, ao, bo| out[i] = ad[ao] + bd[bo]),
                BinKind::Sub => it.for_each(|i, ao, bo| out[i] = ad[ao] - bd[bo]),
                BinKind::Mul => it.for_each(|i, ao, bo| out[i] = ad[ao] * bd[bo]),
            }
            (out_shape, out)
        };
        self.graph
            .push(Tensor::new(out_shape, out)?, Op::Bin(kind, self.id, other.id))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, BinKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, BinKind::Mul, "mul")
    }

    fn unary(&self, kind: UnKind) -> Result<Var> {
        let (shape, out) = {
            let tape = self.graph.tape.borrow();
            let v = &tape.nodes[self.id].value;
            let out: Vec<f64> = v
                .data()
                .iter()
                .map(|&x| match kind {
                    UnKind::Neg => -x,
                    UnKind::Exp => x.exp(),
                    UnKind::Softplus => softplus(x),
                    UnKind::Silu => silu(x),
                    UnKind::Sigmoid => sigmoid(x),
                    UnKind::Relu => x.max(0.0),
                })
                .collect();
            (v.shape().to_vec(), out)
        };
        self.graph
            .push(Tensor::new(shape, out)?, Op::Un(kind, self.id))
    }

    pub fn neg(&self) -> Result<Var> {
        self.unary(UnKind::Neg)
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary(UnKind::Exp)
    }

    pub fn softplus(&self) -> Result<Var> {
        self.unary(UnKind::Softplus)
    }

    pub fn silu(&self) -> Result<Var> {
        self.unary(UnKind::Silu)
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.unary(UnKind::Sigmoid)
    }

    pub fn relu(&self) -> Result<Var> {
        self.unary(UnKind::Relu)
    }

    pub fn scale(&self, c: f64) -> Result<Var> {
        let (shape, out) = {
            let tape = self.graph.tape.borrow();
            let v = &tape.nodes[self.id].value;
            (
                v.shape().to_vec(),
                v.data().iter().map(|&x| x * c).collect::<Vec<f64>>(),
            )
        };
        self.graph
            .push(Tensor::new(shape, out)?, Op::Scale(self.id, c))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        if !self.graph.same_graph(&other.graph) {
            return Err(TensorError::GraphMismatch);
        }
        let (m, n, out) = {
            let tape = self.graph.tape.borrow();
            let av = &tape.nodes[self.id].value;
            let bv = &tape.nodes[other.id].value;
            if av.shape().len() != 2 {
                return Err(TensorError::Rank {
                    op: "matmul",
                    expected: 2,
                    shape: av.shape().to_vec(),
                });
            }
            if bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: av.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                });
            }
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let (ad, bd) = (av.data(), bv.data());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (p, &aip) in arow.iter().enumerate() {
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    for j in 0..n {
                        orow[j] += aip * brow[j];
                    }
                }
            }
            (m, n, out)
        };
        self.graph
            .push(Tensor::new(vec![m, n], out)?, Op::Matmul(self.id, other.id))
    }

    /// Depthwise causal convolution over axis 0.
    /// `self`: `[T, L]`, `w`: `[K, L]`, `b`: `[L]`. Output `[T, L]` where
    /// position `t` sees only inputs at `t-K+1..=t` (zeros before the start).
    pub fn causal_conv1d(&self, w: &Var, b: &Var) -> Result<Var> {
        if !self.graph.same_graph(&w.graph) || !self.graph.same_graph(&b.graph) {
            return Err(TensorError::GraphMismatch);
        }
        let (t_len, l, out) = {
            let tape = self.graph.tape.borrow();
            let xv = &tape.nodes[self.id].value;
            let wv = &tape.nodes[w.id].value;
            let bv = &tape.nodes[b.id].value;
            if xv.shape().len() != 2 || wv.shape().len() != 2 {
                return Err(TensorError::Rank {
                    op: "causal_conv1d",
                    expected: 2,
                    shape: xv.shape().to_vec(),
                });
            }
            let (t_len, l) = (xv.shape()[0], xv.shape()[1]);
            let k_len = wv.shape()[0];
            if k_len == 0 {
                return Err(TensorError::EmptyKernel);
            }
            if wv.shape()[1] != l || bv.numel() != l {
                return Err(TensorError::ShapeMismatch {
                    op: "causal_conv1d",
                    lhs: xv.shape().to_vec(),
                    rhs: wv.shape().to_vec(),
                });
            }
            let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
            let mut out = vec![0.0; t_len * l];
            for t in 0..t_len {
                let orow = &mut out[t * l..(t + 1) * l];
                orow.copy_from_slice(bd);
                for k in 0..k_len {
                    let src = t as i64 - (k_len as i64 - 1) + k as i64;
                    if src >= 0 && (src as usize) < t_len {
                        let xrow = &xd[src as usize * l..(src as usize + 1) * l];
                        let wrow = &wd[k * l..(k + 1) * l];
                        for c in 0..l {
                            orow[c] += wrow[c] * xrow[c];
                        }
                    }
                }
            }
            (t_len, l, out)
        };
        self.graph.push(
            Tensor::new(vec![t_len, l], out)?,
            Op::CausalConv1d {
                x: self.id,
                w: w.id,
                b: b.id,
            },
        )
    }

    /// Gathers rows of a 2-d table: `self[rows[i], :]` stacked along axis 0.
    pub fn lookup(&self, rows: &[usize]) -> Result<Var> {
        let (cols, out) = {
            let tape = self.graph.tape.borrow();
            let table = &tape.nodes[self.id].value;
            if table.shape().len() != 2 {
                return Err(TensorError::Rank {
                    op: "lookup",
                    expected: 2,
                    shape: table.shape().to_vec(),
                });
            }
            let (n_rows, cols) = (table.shape()[0], table.shape()[1]);
            let mut out = Vec::with_capacity(rows.len() * cols);
            for &r in rows {
                if r >= n_rows {
                    return Err(TensorError::PositionOutOfRange {
                        op: "lookup",
                        pos: r,
                        len: n_rows,
                    });
                }
                out.extend_from_slice(&table.data()[r * cols..(r + 1) * cols]);
            }
            (cols, out)
        };
        self.graph.push(
            Tensor::new(vec![rows.len(), cols], out)?,
            Op::Lookup {
                table: self.id,
                rows: rows.to_vec(),
            },
        )
    }

    /// Inserts `tokens` rows so they land at `positions` of the output
    /// (strictly increasing, in output coordinates). `drop_rows` at the same
    /// positions is the exact inverse.
    pub fn insert_rows(&self, tokens: &Var, positions: &[usize]) -> Result<Var> {
        if !self.graph.same_graph(&tokens.graph) {
            return Err(TensorError::GraphMismatch);
        }
        let (shape, out) = {
            let tape = self.graph.tape.borrow();
            let seq = &tape.nodes[self.id].value;
            let tok = &tape.nodes[tokens.id].value;
            let cols = seq.row_size();
            if tok.row_size() != cols || tok.rows() != positions.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "insert_rows",
                    lhs: seq.shape().to_vec(),
                    rhs: tok.shape().to_vec(),
                });
            }
            let out_rows = seq.rows() + positions.len();
            validate_positions("insert_rows", positions, out_rows)?;
            let mut out = vec![0.0; out_rows * cols];
            let mut tok_i = 0usize;
            let mut seq_i = 0usize;
            for r in 0..out_rows {
                let dst = &mut out[r * cols..(r + 1) * cols];
                if tok_i < positions.len() && positions[tok_i] == r {
                    dst.copy_from_slice(&tok.data()[tok_i * cols..(tok_i + 1) * cols]);
                    tok_i += 1;
                } else {
                    dst.copy_from_slice(&seq.data()[seq_i * cols..(seq_i + 1) * cols]);
                    seq_i += 1;
                }
            }
            let mut shape = seq.shape().to_vec();
            shape[0] = out_rows;
            (shape, out)
        };
        self.graph.push(
            Tensor::new(shape, out)?,
            Op::InsertRows {
                seq: self.id,
                tokens: tokens.id,
                positions: positions.to_vec(),
            },
        )
    }

    /// Removes the rows at `positions`; gradients flow only to survivors.
    pub fn drop_rows(&self, positions: &[usize]) -> Result<Var> {
        let (shape, out, kept) = {
            let tape = self.graph.tape.borrow();
            let seq = &tape.nodes[self.id].value;
            validate_positions("drop_rows", positions, seq.rows())?;
            let cols = seq.row_size();
            let kept: Vec<usize> = (0..seq.rows())
                .filter(|r| !positions.contains(r))
                .collect();
            let mut out = Vec::with_capacity(kept.len() * cols);
            for &r in &kept {
                out.extend_from_slice(&seq.data()[r * cols..(r + 1) * cols]);
            }
            let mut shape = seq.shape().to_vec();
            shape[0] = kept.len();
            (shape, out, kept)
        };
        self.graph.push(
            Tensor::new(shape, out)?,
            Op::DropRows { seq: self.id, kept },
        )
    }

    /// Stacks parts along axis 0. All trailing dims must agree.
    pub fn concat_rows(parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let graph = parts[0].graph.clone();
        let (shape, out) = {
            let tape = graph.tape.borrow();
            let first = &tape.nodes[parts[0].id].value;
            let cols = first.row_size();
            let mut shape = first.shape().to_vec();
            let mut rows = 0usize;
            let mut out = Vec::new();
            for p in parts {
                if !graph.same_graph(&p.graph) {
                    return Err(TensorError::GraphMismatch);
                }
                let v = &tape.nodes[p.id].value;
                if v.row_size() != cols || v.shape().len() != shape.len() {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_rows",
                        lhs: shape,
                        rhs: v.shape().to_vec(),
                    });
                }
                rows += v.rows();
                out.extend_from_slice(v.data());
            }
            shape[0] = rows;
            (shape, out)
        };
        graph.push(
            Tensor::new(shape, out)?,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        )
    }

    /// Contiguous rows `start..start+len` along axis 0 (any rank).
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var> {
        let (shape, out) = {
            let tape = self.graph.tape.borrow();
            let v = &tape.nodes[self.id].value;
            if start + len > v.rows() {
                return Err(TensorError::SliceOutOfRange {
                    op: "slice_rows",
                    start,
                    len,
                    size: v.rows(),
                });
            }
            let cols = v.row_size();
            let out = v.data()[start * cols..(start + len) * cols].to_vec();
            let mut shape = v.shape().to_vec();
            shape[0] = len;
            (shape, out)
        };
        self.graph.push(
            Tensor::new(shape, out)?,
            Op::SliceRows { a: self.id, start },
        )
    }

    /// Columns `start..start+len` of a 2-d tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var> {
        let (rows, out) = {
            let tape = self.graph.tape.borrow();
            let v = &tape.nodes[self.id].value;
            if v.shape().len() != 2 {
                return Err(TensorError::Rank {
                    op: "slice_cols",
                    expected: 2,
                    shape: v.shape().to_vec(),
                });
            }
            let (rows, cols) = (v.shape()[0], v.shape()[1]);
            if start + len > cols {
                return Err(TensorError::SliceOutOfRange {
                    op: "slice_cols",
                    start,
                    len,
                    size: cols,
                });
            }
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&v.data()[r * cols + start..r * cols + start + len]);
            }
            (rows, out)
        };
        self.graph.push(
            Tensor::new(vec![rows, len], out)?,
            Op::SliceCols { a: self.id, start },
        )
    }

    /// Zero-pads a 2-d tensor with `before` columns on the left and `after`
    /// on the right. Inverse of `slice_cols` for gradient routing.
    pub fn pad_cols(&self, before: usize, after: usize) -> Result<Var> {
        let (rows, out_cols, out) = {
            let tape = self.graph.tape.borrow();
            let v = &tape.nodes[self.id].value;
            if v.shape().len() != 2 {
                return Err(TensorError::Rank {
                    op: "pad_cols",
                    expected: 2,
                    shape: v.shape().to_vec(),
                });
            }
            let (rows, cols) = (v.shape()[0], v.shape()[1]);
            let out_cols = before + cols + after;
            let mut out = vec![0.0; rows * out_cols];
            for r in 0..rows {
                out[r * out_cols + before..r * out_cols + before + cols]
                    .copy_from_slice(&v.data()[r * cols..(r + 1) * cols]);
            }
            (rows, out_cols, out)
        };
        self.graph.push(
            Tensor::new(vec![rows, out_cols], out)?,
            Op::PadCols {
                a: self.id,
                before,
            },
        )
    }

    /// Concatenates two 2-d tensors along columns.
    pub fn concat_cols(&self, other: &Var) -> Result<Var> {
        if !self.graph.same_graph(&other.graph) {
            return Err(TensorError::GraphMismatch);
        }
        let (rows, total, out) = {
            let tape = self.graph.tape.borrow();
            let a = &tape.nodes[self.id].value;
            let b = &tape.nodes[other.id].value;
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[0] != b.shape()[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let rows = a.shape()[0];
            let (ac, bc) = (a.shape()[1], b.shape()[1]);
            let mut out = Vec::with_capacity(rows * (ac + bc));
            for r in 0..rows {
                out.extend_from_slice(&a.data()[r * ac..(r + 1) * ac]);
                out.extend_from_slice(&b.data()[r * bc..(r + 1) * bc]);
            }
            (rows, ac + bc, out)
        };
        self.graph.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(self.id, other.id),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let t = {
            let tape = self.graph.tape.borrow();
            tape.nodes[self.id].value.reshaped(shape.to_vec())?
        };
        self.graph.push(t, Op::Reshape(self.id))
    }

    pub fn sum_all(&self) -> Result<Var> {
        let s: f64 = {
            let tape = self.graph.tape.borrow();
            tape.nodes[self.id].value.data().iter().sum()
        };
        self.graph.push(Tensor::scalar(s), Op::SumAll(self.id))
    }

    /// Mean negative log-likelihood over the batch with log-sum-exp
    /// stabilization. `self` is `[B, C]` logits.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var> {
        let total = {
            let tape = self.graph.tape.borrow();
            let v = &tape.nodes[self.id].value;
            if v.shape().len() != 2 {
                return Err(TensorError::Rank {
                    op: "softmax_cross_entropy",
                    expected: 2,
                    shape: v.shape().to_vec(),
                });
            }
            let (batch, classes) = (v.shape()[0], v.shape()[1]);
            if classes < 2 {
                return Err(TensorError::TooFewClasses { classes });
            }
            if labels.len() != batch {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_cross_entropy",
                    lhs: v.shape().to_vec(),
                    rhs: vec![labels.len()],
                });
            }
            let mut total = 0.0;
            for (i, &label) in labels.iter().enumerate() {
                if label >= classes {
                    return Err(TensorError::LabelOutOfRange { label, classes });
                }
                let row = &v.data()[i * classes..(i + 1) * classes];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                total += lse - row[label];
            }
            total / batch as f64
        };
        self.graph.push(
            Tensor::scalar(total),
            Op::SoftmaxCrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let g = Graph::new();
        let eye = g.leaf(&t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let v = g.leaf(&t2(2, 1, &[5.0, 7.0]));
        assert_eq!(eye.matmul(&v).unwrap().value().data(), &[5.0, 7.0]);

        // [[1,2],[3,4]] . [[1],[1]] = [[3],[7]] by hand arithmetic.
        let a = g.leaf(&t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(&t2(2, 1, &[1.0, 1.0]));
        assert_eq!(a.matmul(&b).unwrap().value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let g = Graph::new();
        let a = g.leaf(&t2(2, 3, &[0.0; 6]));
        let b = g.leaf(&t2(2, 2, &[0.0; 4]));
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_backward_hand_derivative() {
        // y = w*x at w=2, x=3 with upstream 1: w.grad=3, x.grad=2.
        let g = Graph::new();
        let w = g.leaf(&t2(1, 1, &[2.0]));
        let x = g.leaf(&t2(1, 1, &[3.0]));
        let y = w.matmul(&x).unwrap();
        let loss = y.sum_all().unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(w.grad().data(), &[3.0]);
        assert_eq!(x.grad().data(), &[2.0]);
    }

    #[test]
    fn exp_backward_analytic() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::new(vec![1], vec![1.0]).unwrap());
        let y = x.exp().unwrap().sum_all().unwrap();
        g.backward(&y).unwrap();
        assert!((x.grad().data()[0] - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn backward_accumulates_exact_doubles() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::new(vec![1], vec![3.0]).unwrap());
        // y = x^2: grad 6 at x=3.
        let y = x.mul(&x).unwrap().sum_all().unwrap();
        g.backward(&y).unwrap();
        assert_eq!(x.grad().data(), &[6.0]);
        g.backward(&y).unwrap();
        assert_eq!(x.grad().data(), &[12.0]);
    }

    #[test]
    fn unrelated_tensor_gets_zero_grad() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let z = g.leaf(&Tensor::new(vec![2], vec![5.0, 5.0]).unwrap());
        let loss = x.sum_all().unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(z.grad().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            g.backward(&x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn conv_identity_kernel() {
        let g = Graph::new();
        let x = g.leaf(&t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = g.leaf(&t2(1, 2, &[1.0, 1.0]));
        let b = g.leaf(&Tensor::zeros(vec![2]));
        let y = x.causal_conv1d(&w, &b).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn conv_hand_case_and_zero_kernel() {
        // x=[1,2,3], K=2, w=[1,1], b=0 -> [1,3,5] by hand.
        let g = Graph::new();
        let x = g.leaf(&t2(3, 1, &[1.0, 2.0, 3.0]));
        let w = g.leaf(&t2(2, 1, &[1.0, 1.0]));
        let b = g.leaf(&Tensor::zeros(vec![1]));
        let y = x.causal_conv1d(&w, &b).unwrap();
        assert_eq!(y.value().data(), &[1.0, 3.0, 5.0]);

        let wz = g.leaf(&t2(2, 1, &[0.0, 0.0]));
        let yz = x.causal_conv1d(&wz, &b).unwrap();
        assert_eq!(yz.value().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_kernel_longer_than_sequence_is_padding_only() {
        let g = Graph::new();
        let x = g.leaf(&t2(2, 1, &[1.0, 2.0]));
        let w = g.leaf(&t2(5, 1, &[1.0, 1.0, 1.0, 1.0, 1.0]));
        let b = g.leaf(&Tensor::zeros(vec![1]));
        let y = x.causal_conv1d(&w, &b).unwrap();
        assert_eq!(y.value().data(), &[1.0, 3.0]);
    }

    #[test]
    fn insert_then_drop_is_identity() {
        let g = Graph::new();
        let seq = g.leaf(&t2(5, 2, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]));
        let tok = g.leaf(&t2(2, 2, &[-1.0, -1.0, -2.0, -2.0]));
        let ins = seq.insert_rows(&tok, &[0, 1]).unwrap();
        assert_eq!(ins.shape(), vec![7, 2]);
        let back = ins.drop_rows(&[0, 1]).unwrap();
        assert!(back.value().bit_eq(&seq.value()));
    }

    #[test]
    fn insert_zero_tokens_is_noop() {
        let g = Graph::new();
        let seq = g.leaf(&t2(5, 1, &[1.0, 2.0, 3.0, 4.0, 5.0]));
        let tok = g.leaf(&Tensor::zeros(vec![0, 1]));
        let out = seq.insert_rows(&tok, &[]).unwrap();
        assert!(out.value().bit_eq(&seq.value()));
    }

    #[test]
    fn dropped_rows_get_no_gradient() {
        let g = Graph::new();
        let seq = g.leaf(&t2(3, 1, &[1.0, 2.0, 3.0]));
        let tok = g.leaf(&t2(1, 1, &[9.0]));
        let ins = seq.insert_rows(&tok, &[1]).unwrap();
        let kept = ins.drop_rows(&[1]).unwrap();
        let loss = kept.sum_all().unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(tok.grad().data(), &[0.0]);
        assert_eq!(seq.grad().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn insert_positions_validated() {
        let g = Graph::new();
        let seq = g.leaf(&t2(2, 1, &[1.0, 2.0]));
        let tok = g.leaf(&t2(2, 1, &[0.0, 0.0]));
        assert!(seq.insert_rows(&tok, &[1, 1]).is_err());
        assert!(seq.insert_rows(&tok, &[1, 9]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let g = Graph::new();
        let logits = g.leaf(&t2(1, 4, &[0.5, 0.5, 0.5, 0.5]));
        let loss = logits.softmax_cross_entropy(&[2]).unwrap();
        assert!((loss.value().as_scalar().unwrap() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_margin_drives_loss_to_zero() {
        let g = Graph::new();
        let mut prev = f64::INFINITY;
        for margin in [1.0, 4.0, 16.0, 64.0] {
            let logits = g.leaf(&t2(1, 3, &[margin, 0.0, 0.0]));
            let loss = logits
                .softmax_cross_entropy(&[0])
                .unwrap()
                .value()
                .as_scalar()
                .unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn cross_entropy_backward_hand_case() {
        // B=1, logits=[0,0], label=0 -> grad [-0.5, 0.5].
        let g = Graph::new();
        let logits = g.leaf(&t2(1, 2, &[0.0, 0.0]));
        let loss = logits.softmax_cross_entropy(&[0]).unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(logits.grad().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_label_range_checked() {
        let g = Graph::new();
        let logits = g.leaf(&t2(1, 2, &[0.0, 0.0]));
        assert!(matches!(
            logits.softmax_cross_entropy(&[2]),
            Err(TensorError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn broadcast_mul_reduces_gradient() {
        // [2,1] * [1,3]: grad of the [2,1] side sums over 3 columns.
        let g = Graph::new();
        let a = g.leaf(&t2(2, 1, &[2.0, 3.0]));
        let b = g.leaf(&t2(1, 3, &[1.0, 10.0, 100.0]));
        let loss = a.mul(&b).unwrap().sum_all().unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(a.grad().data(), &[111.0, 111.0]);
        assert_eq!(b.grad().data(), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn slice_and_pad_cols_round_trip() {
        let g = Graph::new();
        let a = g.leaf(&t2(2, 4, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]));
        let mid = a.slice_cols(1, 2).unwrap();
        assert_eq!(mid.value().data(), &[1.0, 2.0, 5.0, 6.0]);
        let padded = mid.pad_cols(1, 1).unwrap();
        assert_eq!(padded.shape(), vec![2, 4]);
        let loss = padded.sum_all().unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(a.grad().data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn lookup_gathers_and_scatters() {
        let g = Graph::new();
        let table = g.leaf(&t2(3, 2, &[0.0, 1.0, 10.0, 11.0, 20.0, 21.0]));
        let got = table.lookup(&[2, 0, 2]).unwrap();
        assert_eq!(got.value().data(), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
        let loss = got.sum_all().unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(table.grad().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn replay_is_deterministic() {
        let run = || {
            let g = Graph::new();
            let a = g.leaf(&t2(2, 2, &[0.3, -1.7, 2.9, 0.01]));
            let b = g.leaf(&t2(2, 2, &[1.1, 0.2, -0.4, 0.9]));
            a.matmul(&b)
                .unwrap()
                .silu()
                .unwrap()
                .softplus()
                .unwrap()
                .sum_all()
                .unwrap()
                .value()
                .as_scalar()
                .unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn concat_cols_values_and_gradient() {
        let g = Graph::new();
        let a = g.leaf(&t2(2, 1, &[1.0, 2.0]));
        let b = g.leaf(&t2(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let c = a.concat_cols(&b).unwrap();
        assert_eq!(c.value().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let loss = c.slice_cols(0, 1).unwrap().sum_all().unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(a.grad().data(), &[1.0, 1.0]);
        assert_eq!(b.grad().data(), &[0.0, 0.0, 0.0, 0.0]);
    }
}
