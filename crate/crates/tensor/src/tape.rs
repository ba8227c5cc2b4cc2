//! Computation record and reverse-mode differentiation.
//!
//! Every primitive appends a node holding its output value; nodes are only
//! ever appended, so insertion order is a topological order and a single
//! reverse sweep visits each node once.

use std::ops::Range;
use std::sync::Arc;

use crate::{Float, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: F,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu {
        a: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Slice {
        a: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    MaskedFill {
        a: Var,
        mask: Arc<[bool]>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Sum {
        a: Var,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Ordered record of primitive operations for one evaluation window.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers an input tensor. Its producing computation is not recorded.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape_err(&self, op: &'static str, vars: &[Var]) -> TensorError {
        TensorError::Shape {
            op,
            shapes: vars.iter().map(|v| self.shape(*v).to_vec()).collect(),
        }
    }

    fn matrix(&self, v: Var) -> Option<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    /// `a·b`, or `a·bᵀ` when `trans_b`. Both operands are 2-D.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (Some((m, k)), Some((br, bc))) = (self.matrix(a), self.matrix(b)) else {
            return Err(self.shape_err("matmul", &[a, b]));
        };
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(self.shape_err("matmul", &[a, b]));
        }
        let mut out = vec![F::zero(); m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let (rsb, csb) = if trans_b {
                (1, k as isize)
            } else {
                (n as isize, 1)
            };
            F::gemm(
                m,
                k,
                n,
                av,
                k as isize,
                1,
                bv,
                rsb,
                csb,
                F::zero(),
                &mut out,
                n as isize,
                1,
            );
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b },
            rg,
        ))
    }

    /// Elementwise sum of equal shapes, or a 2-D tensor plus a row vector
    /// broadcast over its rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let rg = self.any_grad(&[a, b]);
        if sa == sb {
            let out: Vec<F> = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect();
            return Ok(self.push(Tensor::new(sa, out)?, Op::Add { a, b }, rg));
        }
        if let ([_, c], [cb]) = (sa.as_slice(), sb.as_slice()) {
            if c == cb {
                let bias = self.value(b).data();
                let out: Vec<F> = self
                    .value(a)
                    .data()
                    .chunks(*c)
                    .flat_map(|row| row.iter().zip(bias).map(|(&x, &y)| x + y))
                    .collect();
                return Ok(self.push(Tensor::new(sa, out)?, Op::AddRow { a, bias: b }, rg));
            }
        }
        Err(self.shape_err("add", &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", &[a, b]));
        }
        let out: Vec<F> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale { a, factor }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let cols = src.cols().max(1);
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Softmax { a }, rg)
    }

    /// Normalizes each row of `x` then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let Some((rows, cols)) = self.matrix(x) else {
            return Err(self.shape_err("layer_norm", &[x, gamma, beta]));
        };
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(self.shape_err("layer_norm", &[x, gamma, beta]));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let n = F::c(cols as f64);
        let mut xhat = vec![F::zero(); rows * cols];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(vec![rows, cols], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| {
            let inner = F::c(SQRT_2_OVER_PI) * (x + F::c(GELU_CUBIC) * x * x * x);
            F::c(0.5) * x * (F::one() + inner.tanh())
        });
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Gelu { a }, rg)
    }

    /// Gathers rows of a 2-D table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let Some((rows, cols)) = self.matrix(table) else {
            return Err(self.shape_err("embedding_lookup", &[table]));
        };
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index {
                    op: "embedding_lookup",
                    index: id,
                    bound: rows,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), cols], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Rectangular block of a 2-D tensor.
    pub fn slice(&mut self, a: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let Some((r, c)) = self.matrix(a) else {
            return Err(self.shape_err("slice", &[a]));
        };
        if rows.start > rows.end || rows.end > r || cols.start > cols.end || cols.end > c {
            return Err(self.shape_err("slice", &[a]));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            out.extend_from_slice(&src[i * c + cols.start..i * c + cols.end]);
        }
        let shape = vec![rows.len(), cols.len()];
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { a, rows, cols }, rg))
    }

    /// Joins 2-D tensors along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let dims: Option<Vec<(usize, usize)>> = parts.iter().map(|&p| self.matrix(p)).collect();
        let Some(dims) = dims.filter(|d| !d.is_empty()) else {
            return Err(self.shape_err("concat", parts));
        };
        let value = match axis {
            0 => {
                let cols = dims[0].1;
                if dims.iter().any(|d| d.1 != cols) {
                    return Err(self.shape_err("concat", parts));
                }
                let rows = dims.iter().map(|d| d.0).sum();
                let mut out = Vec::with_capacity(rows * cols);
                for &p in parts {
                    out.extend_from_slice(self.value(p).data());
                }
                Tensor::new(vec![rows, cols], out)?
            }
            1 => {
                let rows = dims[0].0;
                if dims.iter().any(|d| d.0 != rows) {
                    return Err(self.shape_err("concat", parts));
                }
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &p in parts {
                        out.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::new(vec![rows, cols], out)?
            }
            _ => return Err(self.shape_err("concat", parts)),
        };
        let rg = self.any_grad(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Replaces entries where `mask` is true by `fill`.
    pub fn masked_fill(&mut self, a: Var, mask: Arc<[bool]>, fill: F) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(TensorError::Shape {
                op: "masked_fill",
                shapes: vec![self.shape(a).to_vec(), vec![mask.len()]],
            });
        }
        let src = self.value(a);
        let out: Vec<F> = src
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::MaskedFill { a, mask }, rg))
    }

    /// Per-row natural-log cross entropy of `logits` against `targets`.
    /// Output has one entry per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(logits).dims2();
        if self.shape(logits).len() > 2 || rows != targets.len() {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                shapes: vec![self.shape(logits).to_vec(), vec![targets.len()]],
            });
        }
        let src = self.value(logits).data();
        let mut probs = src.to_vec();
        let mut losses = Vec::with_capacity(rows);
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    bound: cols,
                });
            }
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
            losses.push(lse - row[t]);
            for (p, &x) in probs[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::new(vec![rows], losses)?,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum::<F>();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(total), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, F::one() / F::c(n as f64))
    }

    /// Gradients of the scalar `loss` with respect to each of `wrt`.
    ///
    /// `wrt` may name leaves or intermediate nodes. Nodes with no path to
    /// `loss`, or that do not require grad, receive zeros. The tape is left
    /// intact, so several losses may be differentiated on one record.
    pub fn backward(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor<F>>> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        let mut wanted: Vec<Option<usize>> = vec![None; loss.0 + 1];
        for (slot, v) in wrt.iter().enumerate() {
            if v.0 <= loss.0 {
                wanted[v.0] = Some(slot);
            }
        }
        let mut out: Vec<Option<Vec<F>>> = vec![None; wrt.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if wanted[i].is_some() {
                // duplicates in `wrt` all see the same gradient
                for (slot, v) in wrt.iter().enumerate() {
                    if v.0 == i {
                        out[slot] = Some(g.clone());
                    }
                }
            }
        }

        Ok(wrt
            .iter()
            .zip(out)
            .map(|(v, g)| {
                let shape = self.shape(*v).to_vec();
                match g {
                    Some(g) => Tensor::new(shape, g).expect("gradient matches node shape"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let buf = grads[v.0].get_or_insert_with(|| vec![F::zero(); len]);
        f(buf);
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.matrix(*a).unwrap();
                let n = node.value.cols();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |da| {
                    // dA = dC · Bᵀ (or dC · B when B was used transposed)
                    let (rsb, csb) = if *trans_b {
                        (k as isize, 1)
                    } else {
                        (1, n as isize)
                    };
                    F::gemm(
                        m, n, k, g, n as isize, 1, bv, rsb, csb, F::one(), da, k as isize, 1,
                    );
                });
                self.accumulate(grads, *b, |db| {
                    if *trans_b {
                        // dB = dCᵀ · A, shape n×k
                        F::gemm(
                            n, m, k, g, 1, n as isize, av, k as isize, 1, F::one(), db,
                            k as isize, 1,
                        );
                    } else {
                        // dB = Aᵀ · dC, shape k×n
                        F::gemm(
                            k, m, n, av, 1, k as isize, g, n as isize, 1, F::one(), db,
                            n as isize, 1,
                        );
                    }
                });
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    self.accumulate(grads, *v, |d| add_into(d, g));
                }
            }
            Op::AddRow { a, bias } => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *bias, |d| {
                    for row in g.chunks(d.len()) {
                        add_into(d, row);
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale { a, factor } => {
                self.accumulate(grads, *a, |d| {
                    for (d, &g) in d.iter_mut().zip(g) {
                        *d += g * *factor;
                    }
                });
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let cols = node.value.cols().max(1);
                self.accumulate(grads, *a, |d| {
                    for ((d, g), y) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: F = g.iter().zip(y).map(|(&g, &y)| g * y).sum();
                        for ((d, &g), &y) in d.iter_mut().zip(g).zip(y) {
                            *d += y * (g - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = node.value.cols();
                let gv = self.value(*gamma).data();
                self.accumulate(grads, *x, |dx| {
                    let n = F::c(cols as f64);
                    for (r, rs) in rstd.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let gr = &g[span.clone()];
                        let hr = &xhat[span.clone()];
                        let mut mean_dh = F::zero();
                        let mut mean_dh_h = F::zero();
                        for c in 0..cols {
                            let dh = gr[c] * gv[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh /= n;
                        mean_dh_h /= n;
                        for (c, d) in dx[span].iter_mut().enumerate() {
                            let dh = gr[c] * gv[c];
                            *d += *rs * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                });
                self.accumulate(grads, *gamma, |dg| {
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((d, &g), &h) in dg.iter_mut().zip(gr).zip(hr) {
                            *d += g * h;
                        }
                    }
                });
                self.accumulate(grads, *beta, |db| {
                    for gr in g.chunks(cols) {
                        add_into(db, gr);
                    }
                });
            }
            Op::Gelu { a } => {
                let xv = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    let k = F::c(SQRT_2_OVER_PI);
                    let c = F::c(GELU_CUBIC);
                    let half = F::c(0.5);
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(xv) {
                        let t = (k * (x + c * x * x * x)).tanh();
                        let dinner = k * (F::one() + F::c(3.0) * c * x * x);
                        let dy = half * (F::one() + t) + half * x * (F::one() - t * t) * dinner;
                        *d += g * dy;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let cols = node.value.cols();
                self.accumulate(grads, *table, |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::Slice { a, rows, cols } => {
                let src_cols = self.value(*a).cols();
                let w = cols.len();
                self.accumulate(grads, *a, |d| {
                    for (k, r) in rows.clone().enumerate() {
                        let dst = r * src_cols + cols.start;
                        add_into(&mut d[dst..dst + w], &g[k * w..(k + 1) * w]);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let total_cols = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.matrix(p).unwrap();
                    if *axis == 0 {
                        let span = offset * total_cols..(offset + pr) * total_cols;
                        self.accumulate(grads, p, |d| add_into(d, &g[span]));
                        offset += pr;
                    } else {
                        self.accumulate(grads, p, |d| {
                            for r in 0..pr {
                                let src = r * total_cols + offset;
                                add_into(&mut d[r * pc..(r + 1) * pc], &g[src..src + pc]);
                            }
                        });
                        offset += pc;
                    }
                }
            }
            Op::MaskedFill { a, mask } => {
                self.accumulate(grads, *a, |d| {
                    for ((d, &g), &m) in d.iter_mut().zip(g).zip(mask.iter()) {
                        if !m {
                            *d += g;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let cols = self.value(*logits).cols();
                self.accumulate(grads, *logits, |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        let gr = g[r];
                        let row = &mut d[r * cols..(r + 1) * cols];
                        for (d, &p) in row.iter_mut().zip(&probs[r * cols..(r + 1) * cols]) {
                            *d += gr * p;
                        }
                        row[t] -= gr;
                    }
                });
            }
            Op::Sum { a } => {
                let g0 = g[0];
                self.accumulate(grads, *a, |d| {
                    for d in d.iter_mut() {
                        *d += g0;
                    }
                });
            }
        }
    }
}

fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place<F: Float>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
