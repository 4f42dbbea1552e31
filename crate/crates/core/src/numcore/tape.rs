//! Reverse-mode autodiff on a linear tape of recorded ops.
//!
//! Every forward op appends one node (value + provenance); `backward` walks
//! the tape in reverse and accumulates gradients into nodes that require
//! them. Parents always precede children, so the reverse walk is a valid
//! topological order. One backward pass per tape.

use crate::error::{Error, Result};
use crate::numcore::kernels;
use crate::numcore::tensor::{ensure_finite, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    /// Row-broadcast bias add: a is [r, c], bias is [c].
    AddBias { a: TensorId, bias: TensorId },
    /// Add a constant buffer (e.g. an attention mask); gradient passes through.
    AddConst { a: TensorId },
    Scale { a: TensorId, factor: f64 },
    /// Elementwise multiply by a constant buffer; gradient scales by it.
    MulConst { a: TensorId, weights: Vec<f64> },
    Matmul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    Transpose { a: TensorId, rows: usize, cols: usize },
    Softmax { a: TensorId, axis: usize },
    LayerNorm { a: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    Gelu { a: TensorId },
    /// Vertical stack of 2-D parts sharing a column width.
    ConcatRows { parts: Vec<(TensorId, usize)>, cols: usize },
    SliceRows { a: TensorId, start: usize, cols: usize },
    /// Row gather from a [v, c] table; backward scatter-adds.
    GatherRows { table: TensorId, ids: Vec<usize> },
    /// Space-to-depth over a G x G grid stored as [G*G, d].
    PixelShuffle { a: TensorId, g: usize, d: usize, r: usize },
    SumAll { a: TensorId },
    /// Mean next-token cross-entropy over rows with Some(target).
    MaskedCrossEntropy { logits: TensorId, targets: Vec<Option<usize>> },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Records the forward graph and replays it in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        let tensor = Tensor::new(data, shape, requires_grad)?;
        Ok(self.push(tensor, Op::Leaf))
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar_leaf(&mut self, v: f64, requires_grad: bool) -> Result<TensorId> {
        self.leaf(vec![v], vec![1], requires_grad)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { tensor, op });
        id
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    fn record(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op, what: &str) -> Result<TensorId> {
        ensure_finite(&data, what)?;
        let mut tensor = Tensor::new(data, shape, requires_grad)?;
        tensor.requires_grad = requires_grad;
        Ok(self.push(tensor, op))
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        self.record(data, shape, rg, Op::Add { a, b }, "add")
    }

    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.value(a).dims2()?;
        if self.shape(bias) != [cols] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match row width {cols}",
                self.shape(bias)
            )));
        }
        let mut data = self.data(a).to_vec();
        let b = self.data(bias);
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += b[c];
            }
        }
        let rg = self.requires(a) || self.requires(bias);
        self.record(data, vec![rows, cols], rg, Op::AddBias { a, bias }, "add_bias")
    }

    pub fn add_const(&mut self, a: TensorId, constant: &[f64]) -> Result<TensorId> {
        if constant.len() != self.data(a).len() {
            return Err(Error::shape("add_const length mismatch".to_string()));
        }
        let data: Vec<f64> =
            self.data(a).iter().zip(constant).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.record(data, shape, rg, Op::AddConst { a }, "add_const")
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.record(data, shape, rg, Op::Scale { a, factor }, "scale")
    }

    pub fn mul_const(&mut self, a: TensorId, weights: &[f64]) -> Result<TensorId> {
        if weights.len() != self.data(a).len() {
            return Err(Error::shape("mul_const length mismatch".to_string()));
        }
        let data: Vec<f64> =
            self.data(a).iter().zip(weights).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.record(data, shape, rg, Op::MulConst { a, weights: weights.to_vec() }, "mul_const")
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims differ: [{m}x{k}] @ [{k2}x{n}]"
            )));
        }
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let rg = self.requires(a) || self.requires(b);
        self.record(data, vec![m, n], rg, Op::Matmul { a, b, m, k, n }, "matmul")
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.value(a).dims2()?;
        let data = kernels::transpose(self.data(a), rows, cols);
        let rg = self.requires(a);
        self.record(data, vec![cols, rows], rg, Op::Transpose { a, rows, cols }, "transpose")
    }

    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape(format!(
                "softmax axis {axis} invalid for shape {shape:?}"
            )));
        }
        let data = softmax_axis(self.data(a), &shape, axis);
        let rg = self.requires(a);
        self.record(data, shape, rg, Op::Softmax { a, axis }, "softmax")
    }

    pub fn layer_norm(&mut self, a: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or_else(|| Error::shape("layer_norm on 0-d tensor"))?;
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::shape(format!(
                "layer_norm affine params must have shape [{cols}], got gamma {:?} beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = self.data(a).len() / cols;
        let data =
            kernels::layer_norm_rows(self.data(a), self.data(gamma), self.data(beta), eps, rows, cols);
        let rg = self.requires(a) || self.requires(gamma) || self.requires(beta);
        self.record(data, shape, rg, Op::LayerNorm { a, gamma, beta, eps }, "layer_norm")
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.data(a).iter().map(|&x| kernels::gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.record(data, shape, rg, Op::Gelu { a }, "gelu")
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows needs at least one part"));
        }
        let (_, cols) = self.value(parts[0]).dims2()?;
        let mut data = Vec::new();
        let mut spans = Vec::with_capacity(parts.len());
        let mut total_rows = 0;
        let mut rg = false;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::shape(format!(
                    "concat_rows column mismatch: {c} vs {cols}"
                )));
            }
            data.extend_from_slice(self.data(p));
            spans.push((p, r));
            total_rows += r;
            rg |= self.requires(p);
        }
        self.record(data, vec![total_rows, cols], rg, Op::ConcatRows { parts: spans, cols }, "concat_rows")
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (rows, cols) = self.value(a).dims2()?;
        if start >= end || end > rows {
            return Err(Error::shape(format!(
                "slice_rows [{start}, {end}) out of range for {rows} rows"
            )));
        }
        let data = self.data(a)[start * cols..end * cols].to_vec();
        let rg = self.requires(a);
        self.record(data, vec![end - start, cols], rg, Op::SliceRows { a, start, cols }, "slice_rows")
    }

    pub fn gather_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (vocab, cols) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::shape("gather_rows with empty id list"));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= vocab {
                return Err(Error::shape(format!("gather id {id} out of range {vocab}")));
            }
            data.extend_from_slice(&self.data(table)[id * cols..(id + 1) * cols]);
        }
        let rg = self.requires(table);
        self.record(
            data,
            vec![ids.len(), cols],
            rg,
            Op::GatherRows { table, ids: ids.to_vec() },
            "gather_rows",
        )
    }

    /// Space-to-depth on a grid stored as [G*G, d]: each r x r patch of cells
    /// becomes one output row of width d*r*r, channel-major within the patch
    /// (cells in row-major patch order, each contributing its full channel
    /// block). Exact bijection; see [`Tape::pixel_unshuffle_data`].
    pub fn pixel_shuffle(&mut self, a: TensorId, g: usize, r: usize) -> Result<TensorId> {
        let (rows, d) = self.value(a).dims2()?;
        if rows != g * g {
            return Err(Error::shape(format!(
                "pixel_shuffle expects {g}x{g} grid rows, got {rows}"
            )));
        }
        if r == 0 || g % r != 0 {
            return Err(Error::shape(format!("shuffle factor {r} does not divide grid {g}")));
        }
        let data = pixel_shuffle_data(self.data(a), g, d, r);
        let out_rows = (g / r) * (g / r);
        let rg = self.requires(a);
        self.record(data, vec![out_rows, d * r * r], rg, Op::PixelShuffle { a, g, d, r }, "pixel_shuffle")
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.requires(a);
        self.record(vec![s], vec![1], rg, Op::SumAll { a }, "sum_all")
    }

    /// Mean cross-entropy over logits rows whose target is `Some`. Targets
    /// are already aligned to logits rows (the caller applies any shift).
    pub fn masked_cross_entropy(&mut self, logits: TensorId, targets: &[Option<usize>]) -> Result<TensorId> {
        let (rows, cols) = self.value(logits).dims2()?;
        if targets.len() != rows {
            return Err(Error::shape(format!(
                "targets length {} does not match {rows} logit rows",
                targets.len()
            )));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::input("loss mask is empty: no target positions"));
        }
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= cols {
                    return Err(Error::shape(format!("target {t} out of vocab {cols}")));
                }
                let row = &self.data(logits)[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
        }
        let loss = total / count as f64;
        let rg = self.requires(logits);
        self.record(
            vec![loss],
            vec![1],
            rg,
            Op::MaskedCrossEntropy { logits, targets: targets.to_vec() },
            "masked_cross_entropy",
        )
    }

    /// softmax(q kᵀ / sqrt(d)) v, optionally with a causal mask (position i
    /// attends to keys at positions <= i; requires square attention).
    pub fn scaled_dot_attention(&mut self, q: TensorId, k: TensorId, v: TensorId, causal: bool) -> Result<TensorId> {
        let (lq, d) = self.value(q).dims2()?;
        let (lk, dk) = self.value(k).dims2()?;
        let (lv, _) = self.value(v).dims2()?;
        if d != dk {
            return Err(Error::shape(format!("attention head dims differ: q {d} vs k {dk}")));
        }
        if lk != lv {
            return Err(Error::shape(format!("key/value counts differ: {lk} vs {lv}")));
        }
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / (d as f64).sqrt())?;
        let masked = if causal {
            if lq != lk {
                return Err(Error::shape(format!(
                    "causal attention requires square scores, got {lq}x{lk}"
                )));
            }
            let mut mask = vec![0.0; lq * lk];
            for i in 0..lq {
                for j in (i + 1)..lk {
                    mask[i * lk + j] = -1.0e30;
                }
            }
            self.add_const(scaled, &mask)?
        } else {
            scaled
        };
        let probs = self.softmax(masked, 1)?;
        self.matmul(probs, v)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Accumulate gradients for every grad-requiring ancestor of `root`,
    /// which must be a scalar. One call per tape.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::numeric(
                "backward already ran on this tape; record a fresh graph".to_string(),
            ));
        }
        self.backward_done = true;
        if self.data(root).len() != 1 {
            return Err(Error::shape(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    if self.nodes[i].tensor.requires_grad {
                        accumulate(&mut self.nodes[i].tensor.grad, &gout);
                    }
                    continue;
                }
                Op::Add { a, b } => {
                    self.push_grad(&mut grads, a, gout.clone());
                    self.push_grad(&mut grads, b, gout);
                }
                Op::AddBias { a, bias } => {
                    let cols = self.shape(bias)[0];
                    let rows = gout.len() / cols;
                    if self.requires(bias) || grads_needed(&self.nodes, bias) {
                        let mut gb = vec![0.0; cols];
                        for r in 0..rows {
                            for c in 0..cols {
                                gb[c] += gout[r * cols + c];
                            }
                        }
                        self.push_grad(&mut grads, bias, gb);
                    }
                    self.push_grad(&mut grads, a, gout);
                }
                Op::AddConst { a } => {
                    self.push_grad(&mut grads, a, gout);
                }
                Op::Scale { a, factor } => {
                    let g: Vec<f64> = gout.iter().map(|v| v * factor).collect();
                    self.push_grad(&mut grads, a, g);
                }
                Op::MulConst { a, weights } => {
                    let g: Vec<f64> = gout.iter().zip(&weights).map(|(v, w)| v * w).collect();
                    self.push_grad(&mut grads, a, g);
                }
                Op::Matmul { a, b, m, k, n } => {
                    if grads_needed(&self.nodes, a) {
                        let bt = kernels::transpose(self.data(b), k, n);
                        let ga = kernels::matmul(&gout, &bt, m, n, k);
                        self.push_grad(&mut grads, a, ga);
                    }
                    if grads_needed(&self.nodes, b) {
                        let at = kernels::transpose(self.data(a), m, k);
                        let gb = kernels::matmul(&at, &gout, k, m, n);
                        self.push_grad(&mut grads, b, gb);
                    }
                }
                Op::Transpose { a, rows, cols } => {
                    let g = kernels::transpose(&gout, cols, rows);
                    self.push_grad(&mut grads, a, g);
                }
                Op::Softmax { a, axis } => {
                    let y = &self.nodes[i].tensor.data;
                    let shape = self.nodes[i].tensor.shape.clone();
                    let g = softmax_backward(y, &gout, &shape, axis);
                    self.push_grad(&mut grads, a, g);
                }
                Op::LayerNorm { a, gamma, beta, eps } => {
                    let cols = self.shape(gamma)[0];
                    let x = self.data(a).to_vec();
                    let gm = self.data(gamma).to_vec();
                    let rows = x.len() / cols;
                    let (gx, ggamma, gbeta) = layer_norm_backward(&x, &gm, &gout, eps, rows, cols);
                    self.push_grad(&mut grads, a, gx);
                    if grads_needed(&self.nodes, gamma) {
                        self.push_grad(&mut grads, gamma, ggamma);
                    }
                    if grads_needed(&self.nodes, beta) {
                        self.push_grad(&mut grads, beta, gbeta);
                    }
                }
                Op::Gelu { a } => {
                    let g: Vec<f64> = self
                        .data(a)
                        .iter()
                        .zip(&gout)
                        .map(|(&x, gy)| gy * kernels::gelu_grad(x))
                        .collect();
                    self.push_grad(&mut grads, a, g);
                }
                Op::ConcatRows { parts, cols } => {
                    let mut offset = 0;
                    for (p, rows) in parts {
                        let g = gout[offset * cols..(offset + rows) * cols].to_vec();
                        self.push_grad(&mut grads, p, g);
                        offset += rows;
                    }
                }
                Op::SliceRows { a, start, cols } => {
                    let mut g = vec![0.0; self.data(a).len()];
                    g[start * cols..start * cols + gout.len()].copy_from_slice(&gout);
                    self.push_grad(&mut grads, a, g);
                }
                Op::GatherRows { table, ids } => {
                    if grads_needed(&self.nodes, table) {
                        let cols = self.shape(table)[1];
                        let mut g = vec![0.0; self.data(table).len()];
                        for (row, &id) in ids.iter().enumerate() {
                            for c in 0..cols {
                                g[id * cols + c] += gout[row * cols + c];
                            }
                        }
                        self.push_grad(&mut grads, table, g);
                    }
                }
                Op::PixelShuffle { a, g, d, r } => {
                    let gin = pixel_unshuffle_data(&gout, g, d, r);
                    self.push_grad(&mut grads, a, gin);
                }
                Op::SumAll { a } => {
                    let g = vec![gout[0]; self.data(a).len()];
                    self.push_grad(&mut grads, a, g);
                }
                Op::MaskedCrossEntropy { logits, targets } => {
                    let (rows, cols) = self.value(logits).dims2()?;
                    let count = targets.iter().filter(|t| t.is_some()).count() as f64;
                    let upstream = gout[0];
                    let mut g = vec![0.0; rows * cols];
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let row = &self.data(logits)[r * cols..(r + 1) * cols];
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                            let sum: f64 = exps.iter().sum();
                            for c in 0..cols {
                                let p = exps[c] / sum;
                                let delta = if c == t { 1.0 } else { 0.0 };
                                g[r * cols + c] = upstream * (p - delta) / count;
                            }
                        }
                    }
                    self.push_grad(&mut grads, logits, g);
                }
            }
        }
        for node in &self.nodes {
            if let Some(g) = &node.tensor.grad {
                ensure_finite(g, "backward gradient")?;
            }
        }
        Ok(())
    }

    fn push_grad(&mut self, grads: &mut [Option<Vec<f64>>], id: TensorId, g: Vec<f64>) {
        if !self.nodes[id.0].tensor.requires_grad {
            return;
        }
        if matches!(self.nodes[id.0].op, Op::Leaf) {
            accumulate(&mut self.nodes[id.0].tensor.grad, &g);
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

fn grads_needed(nodes: &[Node], id: TensorId) -> bool {
    nodes[id.0].tensor.requires_grad
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let axis_size = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, axis_size, inner)
}

fn softmax_axis(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, axis_size, inner) = axis_strides(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * axis_size * inner + a * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..axis_size {
                max = max.max(x[at(a)]);
            }
            let mut sum = 0.0;
            for a in 0..axis_size {
                let e = (x[at(a)] - max).exp();
                out[at(a)] = e;
                sum += e;
            }
            for a in 0..axis_size {
                out[at(a)] /= sum;
            }
        }
    }
    out
}

/// dx = y ⊙ (dy - <dy, y>) along the softmax axis.
fn softmax_backward(y: &[f64], gout: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, axis_size, inner) = axis_strides(shape, axis);
    let mut g = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * axis_size * inner + a * inner + i;
            let mut dot = 0.0;
            for a in 0..axis_size {
                dot += gout[at(a)] * y[at(a)];
            }
            for a in 0..axis_size {
                g[at(a)] = y[at(a)] * (gout[at(a)] - dot);
            }
        }
    }
    g
}

fn layer_norm_backward(
    x: &[f64],
    gamma: &[f64],
    gout: &[f64],
    eps: f64,
    rows: usize,
    cols: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let nf = cols as f64;
    let mut gx = vec![0.0; x.len()];
    let mut ggamma = vec![0.0; cols];
    let mut gbeta = vec![0.0; cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let gy = &gout[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / nf;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
        let inv = 1.0 / (var + eps).sqrt();

        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for c in 0..cols {
            let xhat = (row[c] - mean) * inv;
            let gscaled = gy[c] * gamma[c];
            ggamma[c] += gy[c] * xhat;
            gbeta[c] += gy[c];
            sum_g += gscaled;
            sum_gx += gscaled * xhat;
        }
        for c in 0..cols {
            let xhat = (row[c] - mean) * inv;
            let gscaled = gy[c] * gamma[c];
            gx[r * cols + c] = inv * (gscaled - sum_g / nf - xhat * sum_gx / nf);
        }
    }
    (gx, ggamma, gbeta)
}

/// Standalone space-to-depth used by both the tape op and the projector's
/// pure-function surface. Output row q holds the r*r cells of patch q,
/// row-major within the patch, each cell contributing its d channels.
pub fn pixel_shuffle_data(grid: &[f64], g: usize, d: usize, r: usize) -> Vec<f64> {
    let gp = g / r;
    let mut out = vec![0.0; grid.len()];
    let out_width = d * r * r;
    for py in 0..gp {
        for px in 0..gp {
            let out_row = py * gp + px;
            for cy in 0..r {
                for cx in 0..r {
                    let cell = (py * r + cy) * g + (px * r + cx);
                    let dst = out_row * out_width + (cy * r + cx) * d;
                    out[dst..dst + d].copy_from_slice(&grid[cell * d..(cell + 1) * d]);
                }
            }
        }
    }
    out
}

/// Exact inverse of [`pixel_shuffle_data`].
pub fn pixel_unshuffle_data(shuffled: &[f64], g: usize, d: usize, r: usize) -> Vec<f64> {
    let gp = g / r;
    let mut out = vec![0.0; shuffled.len()];
    let in_width = d * r * r;
    for py in 0..gp {
        for px in 0..gp {
            let in_row = py * gp + px;
            for cy in 0..r {
                for cx in 0..r {
                    let cell = (py * r + cy) * g + (px * r + cx);
                    let src = in_row * in_width + (cy * r + cx) * d;
                    out[cell * d..(cell + 1) * d].copy_from_slice(&shuffled[src..src + d]);
                }
            }
        }
    }
    out
}
