//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive in creation order. Inputs of a node
//! always precede it, so walking the node list backwards is a valid reverse
//! topological sweep. One tape serves one forward pass and at most one
//! backward pass.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize, broadcast: bool },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize, broadcast: bool },
    Affine { a: usize, scale: f64 },
    DivScalar { a: usize, s: usize },
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Relu(usize),
    Softmax(usize),
    Concat(Vec<usize>),
    StackRows(Vec<usize>),
    Row { a: usize, index: usize },
    Slice { a: usize, start: usize, len: usize },
    Reshape(usize),
    Transpose { a: usize, rows: usize, cols: usize },
    Sum(usize),
    Mean(usize),
    Dropout { a: usize, mask: Vec<f64> },
    Embedding { table: usize, ids: Vec<usize> },
    LayerNorm { a: usize, normalized: Vec<f64>, inv_std: Vec<f64> },
    CrossEntropy { logits: usize, targets: Vec<usize>, pad: usize, probs: Vec<f64>, count: usize },
    CosineRows { query: usize, rows: usize },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

impl Node {
    fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    fn rows(&self) -> usize {
        self.value.len() / self.cols()
    }
}

/// The computation record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a constant leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded shapes are valid")
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        let (m, k) = match na.shape.len() {
            1 => (1, na.shape[0]),
            2 => (na.shape[0], na.shape[1]),
            _ => return Err(Error::dim("matmul", &na.shape, &nb.shape)),
        };
        if nb.shape.len() != 2 || nb.shape[0] != k {
            return Err(Error::dim("matmul", &na.shape, &nb.shape));
        }
        let n = nb.shape[1];
        let mut out = vec![0.0; m * n];
        gemm(&na.value, &nb.value, &mut out, m, k, n);
        let shape = if na.shape.len() == 1 { vec![n] } else { vec![m, n] };
        let ng = self.ng(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul { a: a.0, b: b.0, m, k, n }, ng))
    }

    /// Elementwise sum. `b` may also be a vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_kind("add", a, b)?;
        let (na, nb) = (self.node(a), self.node(b));
        let d = nb.value.len();
        let out: Vec<f64> = na
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x + nb.value[i % d])
            .collect();
        let shape = na.shape.clone();
        let ng = self.ng(&[a, b]);
        Ok(self.push(shape, out, Op::Add { a: a.0, b: b.0, broadcast }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape != nb.shape {
            return Err(Error::dim("sub", &na.shape, &nb.shape));
        }
        let out = na.value.iter().zip(&nb.value).map(|(x, y)| x - y).collect();
        let shape = na.shape.clone();
        let ng = self.ng(&[a, b]);
        Ok(self.push(shape, out, Op::Sub { a: a.0, b: b.0 }, ng))
    }

    /// Elementwise product. `b` may also be a vector broadcast over the rows of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_kind("mul", a, b)?;
        let (na, nb) = (self.node(a), self.node(b));
        let d = nb.value.len();
        let out: Vec<f64> = na
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x * nb.value[i % d])
            .collect();
        let shape = na.shape.clone();
        let ng = self.ng(&[a, b]);
        Ok(self.push(shape, out, Op::Mul { a: a.0, b: b.0, broadcast }, ng))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape == nb.shape {
            Ok(false)
        } else if nb.shape.len() == 1 && na.shape.len() == 2 && nb.shape[0] == na.cols() {
            Ok(true)
        } else {
            Err(Error::dim(op, &na.shape, &nb.shape))
        }
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let na = self.node(a);
        let out = na.value.iter().map(|x| scale * x + shift).collect();
        let shape = na.shape.clone();
        let ng = na.needs_grad;
        self.push(shape, out, Op::Affine { a: a.0, scale }, ng)
    }

    /// Divides every element of `a` by the scalar `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (na, ns) = (self.node(a), self.node(s));
        if ns.value.len() != 1 {
            return Err(Error::dim("div_scalar", &na.shape, &ns.shape));
        }
        let d = ns.value[0];
        let out = na.value.iter().map(|x| x / d).collect();
        let shape = na.shape.clone();
        let ng = self.ng(&[a, s]);
        Ok(self.push(shape, out, Op::DivScalar { a: a.0, s: s.0 }, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let na = self.node(a);
        let out = na.value.iter().map(|&x| f(x)).collect();
        let shape = na.shape.clone();
        let ng = na.needs_grad;
        self.push(shape, out, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    /// Softmax along the last axis (row-wise for matrices), max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a);
        let c = na.cols();
        let mut out = na.value.clone();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = na.shape.clone();
        let ng = na.needs_grad;
        Ok(self.push(shape, out, Op::Softmax(a.0), ng))
    }

    /// Concatenates along the last axis. All inputs need the same rank and row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("concat of zero tensors".into()))?;
        let rank = self.node(*first).shape.len();
        let rows = self.node(*first).rows();
        for p in parts {
            let n = self.node(*p);
            if n.shape.len() != rank || n.rows() != rows || rank > 2 {
                return Err(Error::dim("concat", &self.node(*first).shape, &n.shape));
            }
        }
        let total: usize = parts.iter().map(|p| self.node(*p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let n = self.node(*p);
                let c = n.cols();
                out.extend_from_slice(&n.value[r * c..(r + 1) * c]);
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        let ng = self.ng(parts);
        Ok(self.push(shape, out, Op::Concat(parts.iter().map(|p| p.0).collect()), ng))
    }

    /// Stacks equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Validation("stack of zero tensors".into()))?;
        let d = self.node(*first).value.len();
        let mut out = Vec::with_capacity(rows.len() * d);
        for r in rows {
            let n = self.node(*r);
            if n.shape.len() != 1 || n.value.len() != d {
                return Err(Error::dim("stack_rows", &self.node(*first).shape, &n.shape));
            }
            out.extend_from_slice(&n.value);
        }
        let ng = self.ng(rows);
        Ok(self.push(vec![rows.len(), d], out, Op::StackRows(rows.iter().map(|r| r.0).collect()), ng))
    }

    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        let na = self.node(a);
        if na.shape.len() != 2 || index >= na.shape[0] {
            return Err(Error::dim("row", &na.shape, &[index]));
        }
        let c = na.shape[1];
        let out = na.value[index * c..(index + 1) * c].to_vec();
        let ng = na.needs_grad;
        Ok(self.push(vec![c], out, Op::Row { a: a.0, index }, ng))
    }

    /// Columns `start..start+len` of every row.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let na = self.node(a);
        let c = na.cols();
        if len == 0 || start + len > c {
            return Err(Error::dim("slice", &na.shape, &[start, len]));
        }
        let mut out = Vec::with_capacity(na.rows() * len);
        for row in na.value.chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = na.shape.clone();
        *shape.last_mut().unwrap() = len;
        let ng = na.needs_grad;
        Ok(self.push(shape, out, Op::Slice { a: a.0, start, len }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let na = self.node(a);
        if shape.is_empty() || shape.iter().product::<usize>() != na.value.len() {
            return Err(Error::dim("reshape", &na.shape, shape));
        }
        let out = na.value.clone();
        let ng = na.needs_grad;
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a.0), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a);
        if na.shape.len() != 2 {
            return Err(Error::dim("transpose", &na.shape, &[]));
        }
        let (rows, cols) = (na.shape[0], na.shape[1]);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = na.value[i * cols + j];
            }
        }
        let ng = na.needs_grad;
        Ok(self.push(vec![cols, rows], out, Op::Transpose { a: a.0, rows, cols }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let na = self.node(a);
        let s = na.value.iter().sum();
        let ng = na.needs_grad;
        self.push(vec![1], vec![s], Op::Sum(a.0), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let na = self.node(a);
        let s = na.value.iter().sum::<f64>() / na.value.len() as f64;
        let ng = na.needs_grad;
        self.push(vec![1], vec![s], Op::Mean(a.0), ng)
    }

    /// Inverted dropout. The identity when `training` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability must lie in [0, 1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let na = self.node(a);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..na.value.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = na.value.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = na.shape.clone();
        let ng = na.needs_grad;
        Ok(self.push(shape, out, Op::Dropout { a: a.0, mask }, ng))
    }

    /// Gathers rows of `table` (`[vocab × dim]`) for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let nt = self.node(table);
        if nt.shape.len() != 2 {
            return Err(Error::dim("embedding", &nt.shape, &[ids.len()]));
        }
        if ids.is_empty() {
            return Err(Error::Validation("embedding lookup of an empty id sequence".into()));
        }
        let (vocab, dim) = (nt.shape[0], nt.shape[1]);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Lookup { index: id, size: vocab });
            }
            out.extend_from_slice(&nt.value[id * dim..(id + 1) * dim]);
        }
        let ng = nt.needs_grad;
        Ok(self.push(vec![ids.len(), dim], out, Op::Embedding { table: table.0, ids: ids.to_vec() }, ng))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let na = self.node(a);
        let c = na.cols();
        let mut normalized = Vec::with_capacity(na.value.len());
        let mut inv_std = Vec::with_capacity(na.rows());
        for row in na.value.chunks(c) {
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            normalized.extend(row.iter().map(|x| (x - mu) * is));
        }
        let shape = na.shape.clone();
        let ng = na.needs_grad;
        let out = normalized.clone();
        self.push(shape, out, Op::LayerNorm { a: a.0, normalized, inv_std }, ng)
    }

    /// Mean cross-entropy of row-wise softmax(`logits`) against `targets`,
    /// skipping positions whose target equals `pad`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var> {
        let nl = self.node(logits);
        let v = nl.cols();
        if nl.rows() != targets.len() {
            return Err(Error::dim("cross_entropy", &nl.shape, &[targets.len()]));
        }
        let count = targets.iter().filter(|&&t| t != pad).count();
        if count == 0 {
            return Err(Error::Validation("all targets are padding".into()));
        }
        let mut probs = nl.value.clone();
        let mut total = 0.0;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            if t >= v {
                return Err(Error::Lookup { index: t, size: v });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            if t != pad {
                total += lse - row[t];
            }
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let loss = total / count as f64;
        let ng = nl.needs_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), pad, probs, count },
            ng,
        ))
    }

    /// Cross-entropy of `logits` minus the cross-entropy of the constant
    /// `reference` logits (same shape and targets).
    ///
    /// The gradient equals that of [`Tape::cross_entropy`]. The value is
    /// formed from per-row log-ratios `ln(Σ e^x / Σ e^r)` evaluated through
    /// `expm1`/`ln_1p`, so it stays accurate to far below the spacing of f64
    /// numbers near the loss itself. Finite-difference checks use it to
    /// resolve gradients that a plain loss value would quantize away.
    pub fn cross_entropy_offset(&mut self, logits: Var, targets: &[usize], pad: usize, reference: &[f64]) -> Result<Var> {
        let out = self.cross_entropy(logits, targets, pad)?;
        let nl = self.node(logits);
        if reference.len() != nl.value.len() {
            return Err(Error::dim("cross_entropy_offset", &nl.shape, &[reference.len()]));
        }
        let v = nl.cols();
        let mut total = 0.0;
        let mut count = 0;
        for ((x, r), &t) in nl.value.chunks(v).zip(reference.chunks(v)).zip(targets) {
            if t == pad {
                continue;
            }
            let c = x.iter().chain(r).cloned().fold(f64::NEG_INFINITY, f64::max);
            let base: f64 = r.iter().map(|ri| (ri - c).exp()).sum();
            let delta: f64 = x.iter().zip(r).map(|(xi, ri)| (ri - c).exp() * (xi - ri).exp_m1()).sum();
            total += (delta / base).ln_1p() - (x[t] - r[t]);
            count += 1;
        }
        self.nodes[out.0].value[0] = total / count as f64;
        Ok(out)
    }

    /// Cosine similarity between `query` (`[d]`) and every row of `rows` (`[m × d]`).
    /// A zero-norm vector has cosine 0.
    pub fn cosine_rows(&mut self, query: Var, rows: Var) -> Result<Var> {
        let (nq, nr) = (self.node(query), self.node(rows));
        if nq.shape.len() != 1 || nr.shape.len() != 2 || nr.shape[1] != nq.shape[0] {
            return Err(Error::dim("cosine_rows", &nq.shape, &nr.shape));
        }
        let d = nq.shape[0];
        let qn = norm(&nq.value);
        let out: Vec<f64> = nr
            .value
            .chunks(d)
            .map(|r| {
                let rn = norm(r);
                if qn == 0.0 || rn == 0.0 {
                    0.0
                } else {
                    dot(&nq.value, r) / (qn * rn)
                }
            })
            .collect();
        let m = nr.shape[0];
        let ng = self.ng(&[query, rows]);
        Ok(self.push(vec![m], out, Op::CosineRows { query: query.0, rows: rows.0 }, ng))
    }

    /// Runs the reverse sweep from a scalar `loss`.
    ///
    /// Gradients are retrievable through [`Tape::grad`]. A tape supports a
    /// single backward pass; record a fresh forward pass to differentiate again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this computation record; run a new forward pass".into(),
            ));
        }
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[j].needs_grad {
                return;
            }
            let buf = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (&nodes[a].value, &nodes[b].value);
                // dA += dC · Bᵀ
                acc(a, &mut |ga| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for c in 0..k {
                            let brow = &vb[c * n..(c + 1) * n];
                            ga[r * k + c] += dot(grow, brow);
                        }
                    }
                });
                // dB += Aᵀ · dC
                acc(b, &mut |gb| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for c in 0..k {
                            let x = va[r * k + c];
                            if x != 0.0 {
                                let dst = &mut gb[c * n..(c + 1) * n];
                                dst.iter_mut().zip(grow).for_each(|(d, s)| *d += x * s);
                            }
                        }
                    }
                });
            }
            &Op::Add { a, b, broadcast } => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| {
                    if broadcast {
                        let d = gb.len();
                        for row in g.chunks(d) {
                            add_into(gb, row);
                        }
                    } else {
                        add_into(gb, g);
                    }
                });
            }
            &Op::Sub { a, b } => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            &Op::Mul { a, b, broadcast } => {
                let (va, vb) = (&nodes[a].value, &nodes[b].value);
                let d = vb.len();
                acc(a, &mut |ga| {
                    for (idx, x) in ga.iter_mut().enumerate() {
                        *x += g[idx] * vb[idx % d];
                    }
                });
                acc(b, &mut |gb| {
                    if broadcast {
                        for (idx, (gg, aa)) in g.iter().zip(va).enumerate() {
                            gb[idx % d] += gg * aa;
                        }
                    } else {
                        for (idx, x) in gb.iter_mut().enumerate() {
                            *x += g[idx] * va[idx];
                        }
                    }
                });
            }
            &Op::Affine { a, scale } => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(d, s)| *d += scale * s));
            }
            &Op::DivScalar { a, s } => {
                let d = nodes[s].value[0];
                let y = &node.value;
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, gg)| *x += gg / d));
                acc(s, &mut |gs| gs[0] -= dot(g, y) / d);
            }
            &Op::Tanh(a) => {
                let y = &node.value;
                acc(a, &mut |ga| {
                    for idx in 0..ga.len() {
                        ga[idx] += g[idx] * (1.0 - y[idx] * y[idx]);
                    }
                });
            }
            &Op::Sigmoid(a) => {
                let y = &node.value;
                acc(a, &mut |ga| {
                    for idx in 0..ga.len() {
                        ga[idx] += g[idx] * y[idx] * (1.0 - y[idx]);
                    }
                });
            }
            &Op::Exp(a) => {
                let y = &node.value;
                acc(a, &mut |ga| {
                    for idx in 0..ga.len() {
                        ga[idx] += g[idx] * y[idx];
                    }
                });
            }
            &Op::Relu(a) => {
                let x = &nodes[a].value;
                acc(a, &mut |ga| {
                    for idx in 0..ga.len() {
                        if x[idx] > 0.0 {
                            ga[idx] += g[idx];
                        }
                    }
                });
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                let c = node.cols();
                acc(a, &mut |ga| {
                    for ((gr, yr), dst) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let s = dot(gr, yr);
                        for j in 0..c {
                            dst[j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let rows = node.rows();
                let total = node.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p].cols();
                    acc(p, &mut |gp| {
                        for r in 0..rows {
                            add_into(&mut gp[r * c..(r + 1) * c], &g[r * total + offset..r * total + offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::StackRows(rows) => {
                let d = node.cols();
                for (r, &p) in rows.iter().enumerate() {
                    acc(p, &mut |gp| add_into(gp, &g[r * d..(r + 1) * d]));
                }
            }
            &Op::Row { a, index } => {
                let c = node.value.len();
                acc(a, &mut |ga| add_into(&mut ga[index * c..(index + 1) * c], g));
            }
            &Op::Slice { a, start, len } => {
                let c = nodes[a].cols();
                acc(a, &mut |ga| {
                    for (dst, src) in ga.chunks_mut(c).zip(g.chunks(len)) {
                        add_into(&mut dst[start..start + len], src);
                    }
                });
            }
            &Op::Reshape(a) => acc(a, &mut |ga| add_into(ga, g)),
            &Op::Transpose { a, rows, cols } => {
                acc(a, &mut |ga| {
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            &Op::Sum(a) => acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            &Op::Mean(a) => {
                let n = nodes[a].value.len() as f64;
                acc(a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Dropout { a, mask } => {
                acc(*a, &mut |ga| {
                    for idx in 0..ga.len() {
                        ga[idx] += g[idx] * mask[idx];
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = node.cols();
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::LayerNorm { a, normalized, inv_std } => {
                let c = node.cols();
                acc(*a, &mut |ga| {
                    for (r, ((gr, xr), dst)) in g
                        .chunks(c)
                        .zip(normalized.chunks(c))
                        .zip(ga.chunks_mut(c))
                        .enumerate()
                    {
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgx = dot(gr, xr) / c as f64;
                        for j in 0..c {
                            dst[j] += inv_std[r] * (gr[j] - mg - xr[j] * mgx);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, pad, probs, count } => {
                let v = nodes[*logits].cols();
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad {
                            continue;
                        }
                        let row = &mut gl[r * v..(r + 1) * v];
                        let p = &probs[r * v..(r + 1) * v];
                        for j in 0..v {
                            row[j] += scale * p[j];
                        }
                        row[t] -= scale;
                    }
                });
            }
            &Op::CosineRows { query, rows } => {
                let q = &nodes[query].value;
                let mat = &nodes[rows].value;
                let d = q.len();
                let qn = norm(q);
                let cos = &node.value;
                acc(query, &mut |gq| {
                    if qn == 0.0 {
                        return;
                    }
                    for (j, r) in mat.chunks(d).enumerate() {
                        let rn = norm(r);
                        if rn == 0.0 || g[j] == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            gq[t] += g[j] * (r[t] / (qn * rn) - cos[j] * q[t] / (qn * qn));
                        }
                    }
                });
                acc(rows, &mut |gr| {
                    if qn == 0.0 {
                        return;
                    }
                    for (j, r) in mat.chunks(d).enumerate() {
                        let rn = norm(r);
                        if rn == 0.0 || g[j] == 0.0 {
                            continue;
                        }
                        for t in 0..d {
                            gr[j * d + t] += g[j] * (q[t] / (qn * rn) - cos[j] * r[t] / (rn * rn));
                        }
                    }
                });
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let x = a[r * k + c];
            if x == 0.0 {
                continue;
            }
            let brow = &b[c * n..(c + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, y)| *o += x * y);
        }
    }
}
