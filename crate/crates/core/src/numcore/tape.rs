//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value and enough saved
//! state to run its vector-Jacobian product. `backward` walks the list in
//! reverse and leaves gradients in the grad slot of every leaf.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddTiled { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    Relu { a: Var },
    MaskedSoftmax { a: Var },
    LayerNorm { a: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Reshape { a: Var },
    SwapAxes12 { a: Var, dims: [usize; 4] },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, smoothing: f64, probs: Vec<f64>, count: usize },
    Dropout { a: Var, keep: Vec<f64> },
    Sum { a: Var },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Computation record. Build one per forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), record: true }
    }

    /// A tape that keeps values but saves nothing for backward.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), record: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Drops every node created after the first `len`; handles to them become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    /// Trainable input; receives a gradient on backward.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn emit(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        let op = if self.record { op } else { Op::Const };
        Ok(self.push(Tensor::from_parts(shape, data), op))
    }

    /// `a[.., K] x b[K, N] -> [.., N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.last() != sb.first() {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.emit("matmul", shape, out, Op::MatMul { a, b })
    }

    /// Batched product `a[B, M, K] x b[B, K, N]`, or `b[B, N, K]` transposed when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = || Error::shape("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        self.emit("bmm", vec![batch, m, n], out, Op::BatchMatMul { a, b, trans_b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        self.emit("add", self.shape(a).to_vec(), out, Op::Add { a, b })
    }

    /// Adds `b[P, C]` to every block of `P` consecutive rows of `a[R, C]`.
    /// Covers bias rows (`P == 1`) and positional tables (`P == seq_len`).
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        if tb.cols() != c || ta.rows() % tb.rows() != 0 {
            return Err(Error::shape("add_tiled", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let block = tb.len();
        let bd = tb.data();
        let out: Vec<f64> = ta.data().iter().enumerate().map(|(i, x)| x + bd[i % block]).collect();
        self.emit("add_tiled", ta.shape().to_vec(), out, Op::AddTiled { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        self.emit("mul", self.shape(a).to_vec(), out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x * s).collect();
        self.emit("scale", self.shape(a).to_vec(), out, Op::Scale { a, s })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        self.emit("relu", self.shape(a).to_vec(), out, Op::Relu { a })
    }

    /// Softmax over the last axis after adding `mask`.
    ///
    /// `a` is viewed as `[B, R, C]` (leading axes flattened). `mask`, if given,
    /// has shape `[Bm, R, C]` with `B % Bm == 0`; slice `b` of `a` uses mask
    /// slice `b / (B / Bm)`, so one mask per sentence serves all heads.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&Tensor>) -> Result<Var> {
        let ta = self.value(a);
        let sa = ta.shape();
        let c = ta.cols();
        let r = if sa.len() >= 2 { sa[sa.len() - 2] } else { 1 };
        let slab = r * c;
        let batch = ta.len() / slab;
        if let Some(m) = mask {
            let sm = m.shape();
            let ok = sm.len() >= 2
                && sm[sm.len() - 1] == c
                && sm[sm.len() - 2] == r
                && batch % (m.len() / slab) == 0;
            if !ok {
                return Err(Error::shape("masked_softmax", format!("input {sa:?}, mask {sm:?}")));
            }
        }
        let group = mask.map_or(1, |m| batch / (m.len() / slab));
        let x = ta.data();
        let mut out = vec![0.0; x.len()];
        for b in 0..batch {
            for i in 0..r {
                let off = b * slab + i * c;
                let row = &x[off..off + c];
                let dst = &mut out[off..off + c];
                match mask {
                    Some(m) => {
                        let moff = (b / group) * slab + i * c;
                        let mrow = &m.data()[moff..moff + c];
                        for j in 0..c {
                            dst[j] = row[j] + mrow[j];
                        }
                    }
                    None => dst.copy_from_slice(row),
                }
                softmax_in_place(dst);
            }
        }
        self.emit("masked_softmax", sa.to_vec(), out, Op::MaskedSoftmax { a })
    }

    /// Normalises the last axis to zero mean and unit population variance,
    /// then applies `gain` and `bias` (each of length C).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape(
                "layer_norm",
                format!("input {:?}, gain {:?}, bias {:?}", ta.shape(), self.shape(gain), self.shape(bias)),
            ));
        }
        let rows = ta.rows();
        let (g, bb) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; ta.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; ta.len()];
        for r in 0..rows {
            let row = ta.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + bb[j];
            }
        }
        let shape = ta.shape().to_vec();
        self.emit("layer_norm", shape, out, Op::LayerNorm { a, gain, bias, xhat, inv_std })
    }

    /// Gathers rows of `table[V, D]`; output `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let st = t.shape();
        if st.len() != 2 || ids.is_empty() {
            return Err(Error::shape("embedding", format!("table {st:?}, {} ids", ids.len())));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("embedding", format!("id {bad} outside table {st:?}")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        self.emit("embedding", vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let data = self.value(a).data().to_vec();
        self.emit("reshape", shape.to_vec(), data, Op::Reshape { a })
    }

    /// `[A, B, C, D] -> [A, C, B, D]`.
    pub fn swap_axes12(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 4 {
            return Err(Error::shape("swap_axes12", format!("{sa:?} is not 4-d")));
        }
        let dims = [sa[0], sa[1], sa[2], sa[3]];
        let out = swap12(self.value(a).data(), dims);
        self.emit("swap_axes12", vec![dims[0], dims[2], dims[1], dims[3]], out, Op::SwapAxes12 { a, dims })
    }

    /// Mean cross-entropy of `logits[R, V]` against `targets` (one per row;
    /// `None` rows are ignored) with uniform label smoothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], smoothing: f64) -> Result<Var> {
        let t = self.value(logits);
        let (rows, v) = (t.rows(), t.cols());
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?} vs {} targets", t.shape(), targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&c| c >= v) {
            return Err(Error::shape("cross_entropy", format!("class {bad} outside {v} logits")));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::InvalidArgument("cross_entropy with no targets".into()));
        }
        let mut probs = vec![0.0; rows * v];
        let mut total = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let row = t.row(r);
            let dst = &mut probs[r * v..(r + 1) * v];
            dst.copy_from_slice(row);
            softmax_in_place(dst);
            if let Some(c) = *target {
                let lse = log_sum_exp(row);
                let nll = lse - row[c];
                let mean_nll = if smoothing > 0.0 { lse - row.iter().sum::<f64>() / v as f64 } else { 0.0 };
                total += (1.0 - smoothing) * nll + smoothing * mean_nll;
            }
        }
        let loss = total / count as f64;
        self.emit(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), smoothing, probs, count },
        )
    }

    /// Inverted dropout with drop probability `p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p}")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
            .collect();
        let out = zip_map(self.value(a).data(), &keep, |x, k| x * k);
        self.emit("dropout", self.shape(a).to_vec(), out, Op::Dropout { a, keep })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.emit("sum", vec![1], vec![s], Op::Sum { a })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// Back-propagates from a scalar `output`. Every leaf ends up with a grad
    /// slot; leaves the output does not depend on get zeros.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(Error::NonScalar(self.shape(output).to_vec()));
        }
        if !self.record {
            return Err(Error::InvalidArgument("backward on an inference tape".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) {
                let g = grads[idx].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("backward".into()));
                }
                node.value.set_grad(g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul { a, b } => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = g.len() / n;
                if self.wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, val(*b), true, ga, true);
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, k * n);
                    gemm(k, m, n, val(*a), true, g, false, gb, true);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = g.len() / (batch * m);
                let (da, db) = (val(*a), val(*b));
                if self.wants(*a) {
                    let ga = slot(grads, *a, batch * m * k);
                    for i in 0..batch {
                        // dA = dC * B^T; B^T is stored directly when trans_b.
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &db[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, batch * k * n);
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &da[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gi, true, ai, false, dst, true);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, dst, true);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        axpy(slot(grads, v, g.len()), g, 1.0);
                    }
                }
            }
            Op::AddTiled { a, b } => {
                if self.wants(*a) {
                    axpy(slot(grads, *a, g.len()), g, 1.0);
                }
                if self.wants(*b) {
                    let block = self.nodes[b.0].value.len();
                    let gb = slot(grads, *b, block);
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % block] += gi;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let other = val(*b);
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * other[i];
                    }
                }
                if self.wants(*b) {
                    let other = val(*a);
                    let gb = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * other[i];
                    }
                }
            }
            Op::Scale { a, s } => {
                if self.wants(*a) {
                    axpy(slot(grads, *a, g.len()), g, *s);
                }
            }
            Op::Relu { a } => {
                if self.wants(*a) {
                    let x = val(*a);
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::MaskedSoftmax { a } => {
                if self.wants(*a) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let ga = slot(grads, *a, g.len());
                    for r in 0..g.len() / c {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            ga[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { a, gain, bias, xhat, inv_std } => {
                let c = node.value.cols();
                let rows = g.len() / c;
                if self.wants(*gain) {
                    let gg = slot(grads, *gain, c);
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = slot(grads, *bias, c);
                    for r in 0..rows {
                        for j in 0..c {
                            gb[j] += g[r * c + j];
                        }
                    }
                }
                if self.wants(*a) {
                    let gain_v = val(*gain);
                    let ga = slot(grads, *a, g.len());
                    let mut dxhat = vec![0.0; c];
                    for r in 0..rows {
                        let h = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxhat[j] = g[r * c + j] * gain_v[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(h).map(|(d, x)| d * x).sum();
                        let f = inv_std[r] / c as f64;
                        for j in 0..c {
                            ga[r * c + j] += f * (c as f64 * dxhat[j] - s1 - h[j] * s2);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let d = node.value.cols();
                    let n = self.nodes[table.0].value.len();
                    let gt = slot(grads, *table, n);
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                    }
                }
            }
            Op::Reshape { a } => {
                if self.wants(*a) {
                    axpy(slot(grads, *a, g.len()), g, 1.0);
                }
            }
            Op::SwapAxes12 { a, dims } => {
                if self.wants(*a) {
                    let back = swap12(g, [dims[0], dims[2], dims[1], dims[3]]);
                    axpy(slot(grads, *a, g.len()), &back, 1.0);
                }
            }
            Op::CrossEntropy { logits, targets, smoothing, probs, count } => {
                if self.wants(*logits) {
                    let v = self.nodes[logits.0].value.cols();
                    let gl = slot(grads, *logits, probs.len());
                    let f = g[0] / *count as f64;
                    for (r, target) in targets.iter().enumerate() {
                        let Some(c) = *target else { continue };
                        for j in 0..v {
                            let mut q = smoothing / v as f64;
                            if j == c {
                                q += 1.0 - smoothing;
                            }
                            gl[r * v + j] += f * (probs[r * v + j] - q);
                        }
                    }
                }
            }
            Op::Dropout { a, keep } => {
                if self.wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * keep[i];
                    }
                }
            }
            Op::Sum { a } => {
                if self.wants(*a) {
                    let n = self.nodes[a.0].value.len();
                    for x in slot(grads, *a, n) {
                        *x += g[0];
                    }
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Const)
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, n: usize) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn swap12(x: &[f64], [d0, d1, d2, d3]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..d0 {
        for j in 0..d1 {
            for k in 0..d2 {
                let src = ((i * d1 + j) * d2 + k) * d3;
                let dst = ((i * d2 + k) * d1 + j) * d3;
                out[dst..dst + d3].copy_from_slice(&x[src..src + d3]);
            }
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `c (+)= op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
/// A transposed operand is stored in its untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assert above bounds every index the kernel touches for the
    // given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
