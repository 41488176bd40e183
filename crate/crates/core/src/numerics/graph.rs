//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse and returns gradients for the parameters that were read.
//! Parameters are borrowed from a [`ParamStore`], never copied.

use std::collections::HashMap;

use super::tensor::numel;
use super::{Gradients, NumericsError, ParamId, ParamStore, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row source for [`Graph::gather_rows`]: `(source index, row)` or a zero row.
pub type RowRef = Option<(usize, usize)>;

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Gelu(Var),
    Glu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        sources: Vec<Var>,
        rows: Vec<RowRef>,
    },
    ConcatCols(Var, Var),
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        scale: f64,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
        scale: f64,
    },
}

struct Node {
    op: Op,
    value: Option<Tensor>,
    needs_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn shape_err(msg: String) -> NumericsError {
    NumericsError::Shape(msg)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `c (+)= a * b` for row-major views with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass slices covering the strided extents.
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

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Numerically stable softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Graph<'p> {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.store.value(*id),
            (_, Some(t)) => t,
            _ => unreachable!("non-parameter node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let needs_grad = matches!(op, Op::Param(_)) || inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t, &[])
    }

    /// Reads a parameter; repeated reads return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// `a[..., k] @ b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err(format!("matmul: {sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        let mut shape = sa;
        *shape.last_mut().expect("rank >= 1") = n;
        Ok(self.push(Op::MatMul(a, b), Tensor::new(shape, out)?, &[a, b]))
    }

    /// Affine map along the last axis: `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn map_binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map_unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect()).expect("shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let t = self.map_binary(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), t, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let t = self.map_binary(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), t, &[a, b]))
    }

    /// Adds `bias[n]` to every row of `x[..., n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(shape_err(format!(
                "add_row: {:?} + {:?}",
                self.shape(x),
                self.shape(bias)
            )));
        }
        let bv = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(&bv) {
                *v += b;
            }
        }
        Ok(self.push(Op::AddRow(x, bias), t, &[x, bias]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.map_unary(a, |x| x * s);
        self.push(Op::Scale(a, s), t, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.map_unary(a, |x| x + s);
        self.push(Op::AddScalar(a), t, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map_unary(a, sigmoid);
        self.push(Op::Sigmoid(a), t, &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map_unary(a, gelu);
        self.push(Op::Gelu(a), t, &[a])
    }

    /// Gated linear unit: first half of the last axis times the logistic
    /// sigmoid of the second half.
    pub fn glu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let src = self.value(a);
        let w = src.last_dim();
        if !w.is_multiple_of(2) {
            return Err(shape_err(format!("glu: odd last dimension {w}")));
        }
        let h = w / 2;
        let mut data = Vec::with_capacity(src.len() / 2);
        for row in src.data().chunks(w) {
            for j in 0..h {
                data.push(row[j] * sigmoid(row[h + j]));
            }
        }
        let mut shape = src.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = h;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(Op::Glu(a), t, &[a]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        let w = t.last_dim();
        for row in t.data_mut().chunks_mut(w) {
            softmax_in_place(row);
        }
        self.push(Op::SoftmaxRows(a), t, &[a])
    }

    /// Normalizes each row of `x[..., d]` to zero mean and unit variance
    /// (biased variance plus `eps`), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumericsError> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err(format!(
                "layer_norm: x {:?}, gain {:?}, bias {:?}",
                self.shape(x),
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let src = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.rows();
        let mut xhat = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.len());
        for row in src.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..d {
                let xh = (row[j] - mean) * r;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            t,
            &[x, gain, bias],
        ))
    }

    /// Scaled dot-product attention core over `batch` independent groups.
    ///
    /// `q` is `[batch * lq, d]`, `k` and `v` are `[batch * lkv, d]`; each of
    /// `heads` heads attends over its `d / heads` column slice. `mask`, when
    /// given, is `[lq * lkv]` with `false` marking disallowed pairs.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var, NumericsError> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        let d = *sq.last().unwrap_or(&0);
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::Heads { dim: d, heads });
        }
        if sk != sv || sk.last() != Some(&d) || batch == 0 {
            return Err(shape_err(format!("attention: q {sq:?} k {sk:?} v {sv:?}")));
        }
        let qt = self.value(q);
        let kt = self.value(k);
        let vt = self.value(v);
        if !qt.rows().is_multiple_of(batch) || !kt.rows().is_multiple_of(batch) {
            return Err(shape_err(format!(
                "attention: rows {} / {} not divisible by batch {batch}",
                qt.rows(),
                kt.rows()
            )));
        }
        let lq = qt.rows() / batch;
        let lkv = kt.rows() / batch;
        if let Some(m) = mask {
            if m.len() != lq * lkv {
                return Err(shape_err(format!(
                    "attention mask has {} entries, expected {}",
                    m.len(),
                    lq * lkv
                )));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
        let mut probs = vec![0.0; batch * heads * lq * lkv];
        let mut out = vec![0.0; batch * lq * d];
        let mut scores = vec![0.0; lkv];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..lq {
                    let qrow = &qd[(b * lq + i) * d + col..(b * lq + i) * d + col + dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let krow = &kd[(b * lkv + j) * d + col..(b * lkv + j) * d + col + dh];
                        let dot: f64 = qrow.iter().zip(krow).map(|(x, y)| x * y).sum();
                        *s = if mask.is_some_and(|m| !m[i * lkv + j]) {
                            f64::NEG_INFINITY
                        } else {
                            dot * scale
                        };
                    }
                    if scores.iter().all(|s| *s == f64::NEG_INFINITY) {
                        scores.fill(0.0);
                    }
                    softmax_in_place(&mut scores);
                    let p_off = ((b * heads + h) * lq + i) * lkv;
                    probs[p_off..p_off + lkv].copy_from_slice(&scores);
                    let orow = &mut out[(b * lq + i) * d + col..(b * lq + i) * d + col + dh];
                    for (j, p) in scores.iter().enumerate() {
                        let vrow = &vd[(b * lkv + j) * d + col..(b * lkv + j) * d + col + dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(sq, out)?;
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            },
            t,
            &[q, k, v],
        ))
    }

    /// Attention probabilities of an [`Graph::attention`] node, laid out
    /// `[batch, heads, lq, lkv]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Builds `[rows.len(), w]` by copying rows out of 2-D sources of equal
    /// width `w`; `None` yields a zero row.
    pub fn gather_rows(&mut self, sources: &[Var], rows: Vec<RowRef>) -> Result<Var, NumericsError> {
        let first = sources
            .first()
            .ok_or_else(|| shape_err("gather_rows: no sources".into()))?;
        let w = self.value(*first).last_dim();
        for s in sources {
            if self.shape(*s).len() != 2 || self.value(*s).last_dim() != w {
                return Err(shape_err(format!(
                    "gather_rows: source {:?} is not [_, {w}]",
                    self.shape(*s)
                )));
            }
        }
        let mut data = vec![0.0; rows.len() * w];
        for (dst, r) in data.chunks_mut(w).zip(&rows) {
            if let Some((src, row)) = *r {
                let t = self.value(*sources.get(src).ok_or_else(|| {
                    shape_err(format!("gather_rows: source index {src} out of range"))
                })?);
                if row >= t.rows() {
                    return Err(shape_err(format!(
                        "gather_rows: row {row} out of range for {:?}",
                        t.shape()
                    )));
                }
                dst.copy_from_slice(t.row(row));
            }
        }
        let t = Tensor::new(vec![rows.len(), w], data)?;
        let sources = sources.to_vec();
        let inputs = sources.clone();
        Ok(self.push(Op::GatherRows { sources, rows }, t, &inputs))
    }

    /// `[n, a] ++ [n, b] -> [n, a + b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.rows() != tb.rows() {
            return Err(shape_err(format!(
                "concat_cols: {:?} ++ {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (wa, wb) = (ta.last_dim(), tb.last_dim());
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for r in 0..ta.rows() {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let t = Tensor::new(vec![ta.rows(), wa + wb], data)?;
        Ok(self.push(Op::ConcatCols(a, b), t, &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape(a), t, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `scale * sum over rows with a target of -log softmax(row)[target]`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: Vec<Option<usize>>,
        scale: f64,
    ) -> Result<Var, NumericsError> {
        let t = self.value(logits);
        let c = t.last_dim();
        if t.rows() != targets.len() {
            return Err(shape_err(format!(
                "cross_entropy: {} rows, {} targets",
                t.rows(),
                targets.len()
            )));
        }
        let mut probs = vec![0.0; t.len()];
        let mut total = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let Some(target) = *target else { continue };
            if target >= c {
                return Err(NumericsError::TargetOutOfRange { target, classes: c });
            }
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[target];
            for (p, v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets,
                scale,
                probs,
            },
            Tensor::scalar(total * scale),
            &[logits],
        ))
    }

    /// `scale * sum of binary cross-entropy` on logits, log-sum-exp form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<f64>, scale: f64) -> Result<Var, NumericsError> {
        let t = self.value(logits);
        if t.len() != targets.len() {
            return Err(shape_err(format!(
                "bce_with_logits: {} logits, {} targets",
                t.len(),
                targets.len()
            )));
        }
        let total: f64 = t
            .data()
            .iter()
            .zip(&targets)
            .map(|(z, y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        Ok(self.push(
            Op::BceWithLogits {
                logits,
                targets,
                scale,
            },
            Tensor::scalar(total * scale),
            &[logits],
        ))
    }

    /// Reverse pass from a scalar. Gradients of every parameter read by the
    /// graph are returned; parameters not reached get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.is_finite() {
            return Err(NumericsError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::new(self.store.len());

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut send = |var: Var, delta: Vec<f64>| {
                if !self.nodes[var.0].needs_grad {
                    return;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(NumericsError::NonFinite(format!(
                            "gradient of {}",
                            self.store.name(*id)
                        )));
                    }
                    out.add(*id, self.store.value(*id).shape(), &g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let k = tb.shape()[0];
                    let n = tb.shape()[1];
                    let m = ta.len() / k.max(1);
                    if self.nodes[a.0].needs_grad {
                        // dA = dC B^T
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &g, (n as isize, 1), tb.data(), (1, n as isize), &mut da, false);
                        send(*a, da);
                    }
                    if self.nodes[b.0].needs_grad {
                        // dB = A^T dC
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, ta.data(), (1, k as isize), &g, (n as isize, 1), &mut db, false);
                        send(*b, db);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                    if self.nodes[a.0].needs_grad {
                        send(*a, g.iter().zip(tb).map(|(d, y)| d * y).collect());
                    }
                    if self.nodes[b.0].needs_grad {
                        send(*b, g.iter().zip(ta).map(|(d, x)| d * x).collect());
                    }
                }
                Op::AddRow(x, bias) => {
                    let n = self.value(*bias).len();
                    if self.nodes[bias.0].needs_grad {
                        let mut db = vec![0.0; n];
                        for row in g.chunks(n) {
                            db.iter_mut().zip(row).for_each(|(a, d)| *a += d);
                        }
                        send(*bias, db);
                    }
                    send(*x, g);
                }
                Op::Scale(a, s) => send(*a, g.iter().map(|d| d * s).collect()),
                Op::AddScalar(a) | Op::Reshape(a) => send(*a, g),
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().expect("value").data();
                    send(*a, g.iter().zip(y).map(|(d, s)| d * s * (1.0 - s)).collect());
                }
                Op::Gelu(a) => {
                    let x = self.value(*a).data();
                    send(*a, g.iter().zip(x).map(|(d, x)| d * gelu_grad(*x)).collect());
                }
                Op::Glu(a) => {
                    let src = self.value(*a);
                    let w = src.last_dim();
                    let h = w / 2;
                    let mut da = vec![0.0; src.len()];
                    for (r, row) in src.data().chunks(w).enumerate() {
                        for j in 0..h {
                            let s = sigmoid(row[h + j]);
                            let d = g[r * h + j];
                            da[r * w + j] = d * s;
                            da[r * w + h + j] = d * row[j] * s * (1.0 - s);
                        }
                    }
                    send(*a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().expect("value");
                    let w = y.last_dim();
                    let mut da = vec![0.0; y.len()];
                    for ((dst, yr), gr) in da.chunks_mut(w).zip(y.data().chunks(w)).zip(g.chunks(w)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..w {
                            dst[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    send(*a, da);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain).data();
                    let d = gv.len();
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    let mut dx = vec![0.0; xhat.len()];
                    for (r, (gr, xr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            dg[j] += gr[j] * xr[j];
                            db[j] += gr[j];
                            let dxh = gr[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xr[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            dx[r * d + j] = rstd[r] * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                        }
                    }
                    send(*gain, dg);
                    send(*bias, db);
                    send(*x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    batch,
                    heads,
                    probs,
                } => {
                    let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                    let d = self.value(*q).last_dim();
                    let lq = self.value(*q).rows() / batch;
                    let lkv = self.value(*k).rows() / batch;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = vec![0.0; qd.len()];
                    let mut dk = vec![0.0; kd.len()];
                    let mut dv = vec![0.0; vd.len()];
                    let mut dp = vec![0.0; lkv];
                    for b in 0..*batch {
                        for h in 0..*heads {
                            let col = h * dh;
                            for i in 0..lq {
                                let p = &probs[((b * heads + h) * lq + i) * lkv..][..lkv];
                                let go = &g[(b * lq + i) * d + col..][..dh];
                                for j in 0..lkv {
                                    let voff = (b * lkv + j) * d + col;
                                    dp[j] = go.iter().zip(&vd[voff..voff + dh]).map(|(x, y)| x * y).sum();
                                    for (dvv, gg) in dv[voff..voff + dh].iter_mut().zip(go) {
                                        *dvv += p[j] * gg;
                                    }
                                }
                                let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                                let qoff = (b * lq + i) * d + col;
                                for j in 0..lkv {
                                    let ds = p[j] * (dp[j] - dot) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    let koff = (b * lkv + j) * d + col;
                                    for c in 0..dh {
                                        dq[qoff + c] += ds * kd[koff + c];
                                        dk[koff + c] += ds * qd[qoff + c];
                                    }
                                }
                            }
                        }
                    }
                    send(*q, dq);
                    send(*k, dk);
                    send(*v, dv);
                }
                Op::GatherRows { sources, rows } => {
                    let w = node.value.as_ref().expect("value").last_dim();
                    let mut per_source: Vec<Option<Vec<f64>>> = vec![None; sources.len()];
                    for (gr, r) in g.chunks(w).zip(rows) {
                        if let Some((src, row)) = *r {
                            if !self.nodes[sources[src].0].needs_grad {
                                continue;
                            }
                            let buf = per_source[src]
                                .get_or_insert_with(|| vec![0.0; self.value(sources[src]).len()]);
                            buf[row * w..(row + 1) * w]
                                .iter_mut()
                                .zip(gr)
                                .for_each(|(a, d)| *a += d);
                        }
                    }
                    for (src, buf) in per_source.into_iter().enumerate() {
                        if let Some(buf) = buf {
                            send(sources[src], buf);
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (wa, wb) = (self.value(*a).last_dim(), self.value(*b).last_dim());
                    let mut ga = Vec::with_capacity(self.value(*a).len());
                    let mut gb = Vec::with_capacity(self.value(*b).len());
                    for row in g.chunks(wa + wb) {
                        ga.extend_from_slice(&row[..wa]);
                        gb.extend_from_slice(&row[wa..]);
                    }
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    send(*a, vec![g[0]; n]);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    scale,
                    probs,
                } => {
                    let c = self.value(*logits).last_dim();
                    let mut dl = vec![0.0; probs.len()];
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[r * c + j] = g[0] * scale * (probs[r * c + j] - onehot);
                        }
                    }
                    send(*logits, dl);
                }
                Op::BceWithLogits {
                    logits,
                    targets,
                    scale,
                } => {
                    let z = self.value(*logits).data();
                    let dl = z
                        .iter()
                        .zip(targets)
                        .map(|(z, y)| g[0] * scale * (sigmoid(*z) - y))
                        .collect();
                    send(*logits, dl);
                }
            }
        }
        // parameters read but unreachable from the loss get explicit zeros
        for id in self.param_vars.keys() {
            if out.get(*id).is_none() {
                let shape = self.store.value(*id).shape().to_vec();
                out.add(*id, &shape, &vec![0.0; numel(&shape)]);
            }
        }
        Ok(out)
    }
}
