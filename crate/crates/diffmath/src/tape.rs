//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the
//! information needed to push gradients back to its inputs. `backward`
//! walks the tape once in reverse.

use crate::tensor::{gemm, Tensor};
use crate::DiffError;

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
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Gelu(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
    L2NormalizeRows(Var, Vec<f64>),
    RmsNormRows { x: Var, gain: Var, inv_rms: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, seq: usize, probs: Vec<f64> },
    Mse(Var, Var),
    Mean(Var),
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct TapeGrads {
    grads: Vec<Option<Tensor>>,
}

impl TapeGrads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.last_dim())
    }

    fn check(&self, ok: bool, what: &str, a: Var, b: Var) -> Result<(), DiffError> {
        if ok {
            Ok(())
        } else {
            Err(DiffError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        self.check(k == k2, "matmul", a, b)?;
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), m, k, false, self.value(b).data(), k2, n, false, &mut out, false);
        Ok(self.push(Tensor::raw(vec![m, n], out), Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        self.check(k == k2, "matmul_bt", a, b)?;
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), m, k, false, self.value(b).data(), n, k2, true, &mut out, false);
        Ok(self.push(Tensor::raw(vec![m, n], out), Op::MatMulBt(a, b)))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, DiffError> {
        self.check(self.value(a).shape() == self.value(b).shape(), what, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(Tensor::raw(self.value(a).shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Broadcasts `row: [n]` over every row of `a: [.., n]` and adds.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        let n = self.value(a).last_dim();
        self.check(self.value(row).len() == n, "add_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(&r) {
                *x += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        let n = self.value(a).last_dim();
        self.check(self.value(row).len() == n, "mul_row", a, row)?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(&r) {
                *x *= b;
            }
        }
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::raw(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect());
        self.push(out, Op::Scale(a, s))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::raw(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map(a, gelu);
        self.push(t, Op::Gelu(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let Some(&first) = parts.first() else {
            return Err(DiffError::Shape("concat of nothing".into()));
        };
        let m = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            self.check(self.value(p).rows() == m, "concat_cols", first, p)?;
            widths.push(self.value(p).last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Tensor::raw(vec![m, total], out), Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let (m, n) = self.dims2(a);
        if start >= end || end > n {
            return Err(DiffError::Shape(format!("slice {start}..{end} of width {n}")));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&src.row(r)[start..end]);
        }
        Ok(self.push(Tensor::raw(vec![m, end - start], out), Op::SliceCols(a, start)))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, DiffError> {
        let (m, n) = self.dims2(a);
        if idx.is_empty() {
            return Err(DiffError::Shape("gather of no rows".into()));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= m) {
            return Err(DiffError::Shape(format!("gather row {bad} of {m}")));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(src.row(i));
        }
        Ok(self.push(Tensor::raw(vec![idx.len(), n], out), Op::GatherRows(a, idx.to_vec())))
    }

    /// Sums rows into `segments` buckets; `seg[i]` names the bucket of row `i`.
    pub fn segment_sum(&mut self, a: Var, seg: &[usize], segments: usize) -> Result<Var, DiffError> {
        let (m, n) = self.dims2(a);
        if seg.len() != m || segments == 0 || seg.iter().any(|&s| s >= segments) {
            return Err(DiffError::Shape(format!(
                "segment ids ({} for {m} rows, {segments} buckets)",
                seg.len()
            )));
        }
        let src = self.value(a);
        let mut out = vec![0.0; segments * n];
        for (r, &s) in seg.iter().enumerate() {
            for (o, x) in out[s * n..(s + 1) * n].iter_mut().zip(src.row(r)) {
                *o += x;
            }
        }
        Ok(self.push(Tensor::raw(vec![segments, n], out), Op::SegmentSum(a, seg.to_vec())))
    }

    /// Mean of rows per bucket. Empty buckets yield zero rows.
    pub fn segment_mean(&mut self, a: Var, seg: &[usize], segments: usize) -> Result<Var, DiffError> {
        let summed = self.segment_sum(a, seg, segments)?;
        let mut counts = vec![0.0; segments];
        for &s in seg {
            counts[s] += 1.0;
        }
        let n = self.value(summed).last_dim();
        let mut inv = Vec::with_capacity(segments * n);
        for c in counts {
            let w = if c > 0.0 { 1.0 / c } else { 0.0 };
            inv.extend(std::iter::repeat_n(w, n));
        }
        let w = self.leaf(Tensor::raw(vec![segments, n], inv));
        self.mul(summed, w)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims2(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::raw(vec![n, m], out), Op::Transpose(a))
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let (m, n) = self.dims2(a);
        let src = self.value(a);
        let mut inv = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = src.row(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(DiffError::Degenerate(format!("row {r} has zero norm")));
            }
            inv.push(1.0 / norm);
            out.extend(row.iter().map(|x| x / norm));
        }
        Ok(self.push(Tensor::raw(vec![m, n], out), Op::L2NormalizeRows(a, inv)))
    }

    /// Root-mean-square normalization with a learned per-column gain.
    pub fn rms_norm_rows(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var, DiffError> {
        let (m, n) = self.dims2(x);
        self.check(self.value(gain).len() == n, "rms_norm gain", x, gain)?;
        let src = self.value(x);
        let g = self.value(gain).data();
        let mut inv_rms = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = src.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let ir = 1.0 / (ms + eps).sqrt();
            inv_rms.push(ir);
            out.extend(row.iter().zip(g).map(|(v, gi)| v * ir * gi));
        }
        Ok(self.push(Tensor::raw(vec![m, n], out), Op::RmsNormRows { x, gain, inv_rms }))
    }

    /// Single-head scaled dot-product self-attention over consecutive groups of `seq` rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize) -> Result<Var, DiffError> {
        let (m, d) = self.dims2(q);
        self.check(self.value(k).shape() == self.value(q).shape(), "attention k", q, k)?;
        self.check(self.value(v).shape() == self.value(q).shape(), "attention v", q, v)?;
        if seq == 0 || m % seq != 0 {
            return Err(DiffError::Shape(format!("{m} rows not divisible into sequences of {seq}")));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; (m / seq) * seq * seq];
        let mut out = vec![0.0; m * d];
        for b in 0..m / seq {
            let base = b * seq * d;
            let p = &mut probs[b * seq * seq..(b + 1) * seq * seq];
            gemm(&qd[base..base + seq * d], seq, d, false, &kd[base..base + seq * d], seq, d, true, p, false);
            for row in p.chunks_mut(seq) {
                let mx = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x * scale));
                let mut z = 0.0;
                for x in row.iter_mut() {
                    *x = (*x * scale - mx).exp();
                    z += *x;
                }
                for x in row.iter_mut() {
                    *x /= z;
                }
            }
            gemm(p, seq, seq, false, &vd[base..base + seq * d], seq, d, false, &mut out[base..base + seq * d], false);
        }
        Ok(self.push(Tensor::raw(vec![m, d], out), Op::Attention { q, k, v, seq, probs }))
    }

    /// Mean squared error between equally shaped tensors; a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.check(self.value(a).shape() == self.value(b).shape(), "mse", a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let s = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b)))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, DiffError> {
        let (m, n) = self.dims2(logits);
        if targets.len() != m || targets.iter().any(|&t| t >= n) {
            return Err(DiffError::Shape(format!("{} targets for {m}x{n} logits", targets.len())));
        }
        let src = self.value(logits);
        let mut probs = Vec::with_capacity(m * n);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = src.row(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            loss += -(row[t] - mx - z.ln());
            probs.extend(row.iter().map(|x| (x - mx).exp() / z));
        }
        let out = Tensor::scalar(loss / m as f64);
        Ok(self.push(out, Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    /// Accumulates `d loss / d node` for every node reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<TapeGrads, DiffError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(DiffError::Shape(format!("loss must be scalar, got {:?}", lv.shape())));
        }
        if !lv.is_finite() {
            return Err(DiffError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.push_back(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(TapeGrads { grads })
    }

    fn push_back(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let acc = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.value(*b).last_dim();
                let mut ga = vec![0.0; m * k];
                gemm(gd, m, n, false, self.value(*b).data(), k, n, true, &mut ga, false);
                let mut gb = vec![0.0; k * n];
                gemm(self.value(*a).data(), m, k, true, gd, m, n, false, &mut gb, false);
                acc(*a, Tensor::raw(self.value(*a).shape().to_vec(), ga), grads);
                acc(*b, Tensor::raw(self.value(*b).shape().to_vec(), gb), grads);
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.value(*b).rows();
                let mut ga = vec![0.0; m * k];
                gemm(gd, m, n, false, self.value(*b).data(), n, k, false, &mut ga, false);
                let mut gb = vec![0.0; n * k];
                gemm(gd, m, n, true, self.value(*a).data(), m, k, false, &mut gb, false);
                acc(*a, Tensor::raw(self.value(*a).shape().to_vec(), ga), grads);
                acc(*b, Tensor::raw(self.value(*b).shape().to_vec(), gb), grads);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, Tensor::raw(g.shape().to_vec(), gd.iter().map(|x| -x).collect()), grads);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let ga = gd.iter().zip(y).map(|(g, y)| g * y).collect();
                let gb = gd.iter().zip(x).map(|(g, x)| g * x).collect();
                acc(*a, Tensor::raw(g.shape().to_vec(), ga), grads);
                acc(*b, Tensor::raw(g.shape().to_vec(), gb), grads);
            }
            Op::AddRow(a, r) => {
                let n = g.last_dim();
                let mut gr = vec![0.0; n];
                for chunk in gd.chunks(n) {
                    for (o, x) in gr.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
                acc(*a, g.clone(), grads);
                acc(*r, Tensor::raw(self.value(*r).shape().to_vec(), gr), grads);
            }
            Op::MulRow(a, r) => {
                let n = g.last_dim();
                let rv = self.value(*r).data();
                let av = self.value(*a).data();
                let mut gr = vec![0.0; n];
                let mut ga = Vec::with_capacity(gd.len());
                for (gc, ac) in gd.chunks(n).zip(av.chunks(n)) {
                    for j in 0..n {
                        ga.push(gc[j] * rv[j]);
                        gr[j] += gc[j] * ac[j];
                    }
                }
                acc(*a, Tensor::raw(g.shape().to_vec(), ga), grads);
                acc(*r, Tensor::raw(self.value(*r).shape().to_vec(), gr), grads);
            }
            Op::Scale(a, s) => {
                acc(*a, Tensor::raw(g.shape().to_vec(), gd.iter().map(|x| x * s).collect()), grads);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let ga = gd.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                acc(*a, Tensor::raw(g.shape().to_vec(), ga), grads);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                let ga = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                acc(*a, Tensor::raw(g.shape().to_vec(), ga), grads);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let ga = gd.iter().zip(x).map(|(g, x)| g * gelu_grad(*x)).collect();
                acc(*a, Tensor::raw(g.shape().to_vec(), ga), grads);
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let total = g.last_dim();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    let mut gp = Vec::with_capacity(m * w);
                    for r in 0..m {
                        gp.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    acc(*p, Tensor::raw(self.value(*p).shape().to_vec(), gp), grads);
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.dims2(*a);
                let w = g.last_dim();
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    ga[r * n + start..r * n + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                acc(*a, Tensor::raw(self.value(*a).shape().to_vec(), ga), grads);
            }
            Op::GatherRows(a, idx) => {
                let (m, n) = self.dims2(*a);
                let mut ga = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for (o, x) in ga[i * n..(i + 1) * n].iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                        *o += x;
                    }
                }
                acc(*a, Tensor::raw(self.value(*a).shape().to_vec(), ga), grads);
            }
            Op::SegmentSum(a, seg) => {
                let (m, n) = self.dims2(*a);
                let mut ga = Vec::with_capacity(m * n);
                for &s in seg {
                    ga.extend_from_slice(&gd[s * n..(s + 1) * n]);
                }
                acc(*a, Tensor::raw(self.value(*a).shape().to_vec(), ga), grads);
            }
            Op::Reshape(a) => {
                acc(*a, Tensor::raw(self.value(*a).shape().to_vec(), gd.to_vec()), grads);
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims2(*a);
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = gd[j * m + i];
                    }
                }
                acc(*a, Tensor::raw(self.value(*a).shape().to_vec(), ga), grads);
            }
            Op::L2NormalizeRows(a, inv) => {
                let n = g.last_dim();
                let y = node.value.data();
                let mut ga = Vec::with_capacity(gd.len());
                for (r, ir) in inv.iter().enumerate() {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &gd[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    ga.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * dot) * ir));
                }
                acc(*a, Tensor::raw(self.value(*a).shape().to_vec(), ga), grads);
            }
            Op::RmsNormRows { x, gain, inv_rms } => {
                let n = g.last_dim();
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let mut ggain = vec![0.0; n];
                let mut gx = Vec::with_capacity(xv.len());
                for (r, ir) in inv_rms.iter().enumerate() {
                    let xr = &xv[r * n..(r + 1) * n];
                    let gr = &gd[r * n..(r + 1) * n];
                    let mut dot = 0.0;
                    for j in 0..n {
                        let xhat = xr[j] * ir;
                        ggain[j] += gr[j] * xhat;
                        dot += gr[j] * gv[j] * xhat;
                    }
                    let mean = dot / n as f64;
                    for j in 0..n {
                        let xhat = xr[j] * ir;
                        gx.push((gr[j] * gv[j] - xhat * mean) * ir);
                    }
                }
                acc(*x, Tensor::raw(self.value(*x).shape().to_vec(), gx), grads);
                acc(*gain, Tensor::raw(self.value(*gain).shape().to_vec(), ggain), grads);
            }
            Op::Attention { q, k, v, seq, probs } => {
                let seq = *seq;
                let (m, d) = self.dims2(*q);
                let scale = 1.0 / (d as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut gq = vec![0.0; m * d];
                let mut gk = vec![0.0; m * d];
                let mut gv = vec![0.0; m * d];
                let mut gp = vec![0.0; seq * seq];
                for b in 0..m / seq {
                    let base = b * seq * d;
                    let span = base..base + seq * d;
                    let p = &probs[b * seq * seq..(b + 1) * seq * seq];
                    let go = &gd[span.clone()];
                    gemm(p, seq, seq, true, go, seq, d, false, &mut gv[span.clone()], false);
                    gemm(go, seq, d, false, &vd[span.clone()], seq, d, true, &mut gp, false);
                    for i in 0..seq {
                        let row_p = &p[i * seq..(i + 1) * seq];
                        let row_g = &mut gp[i * seq..(i + 1) * seq];
                        let dot: f64 = row_p.iter().zip(row_g.iter()).map(|(a, b)| a * b).sum();
                        for (gs, pp) in row_g.iter_mut().zip(row_p) {
                            *gs = pp * (*gs - dot) * scale;
                        }
                    }
                    gemm(&gp, seq, seq, false, &kd[span.clone()], seq, d, false, &mut gq[span.clone()], false);
                    gemm(&gp, seq, seq, true, &qd[span.clone()], seq, d, false, &mut gk[span.clone()], false);
                }
                let shape = self.value(*q).shape().to_vec();
                acc(*q, Tensor::raw(shape.clone(), gq), grads);
                acc(*k, Tensor::raw(shape.clone(), gk), grads);
                acc(*v, Tensor::raw(shape, gv), grads);
            }
            Op::Mse(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let c = 2.0 * gd[0] / x.len() as f64;
                let ga: Vec<f64> = x.iter().zip(y).map(|(p, q)| c * (p - q)).collect();
                let gb = ga.iter().map(|v| -v).collect();
                acc(*a, Tensor::raw(self.value(*a).shape().to_vec(), ga), grads);
                acc(*b, Tensor::raw(self.value(*b).shape().to_vec(), gb), grads);
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                acc(*a, Tensor::filled(t.shape(), gd[0] / t.len() as f64), grads);
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let (m, n) = self.dims2(*logits);
                let c = gd[0] / m as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * c).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * n + t] -= c;
                }
                acc(*logits, Tensor::raw(self.value(*logits).shape().to_vec(), gl), grads);
            }
        }
    }
}
