//! Reverse-mode recording context.
//!
//! Every op appends a node holding its forward value and the input handles it
//! needs for the backward sweep. Inputs always precede their consumers on the
//! tape, so the recorded graph is acyclic by construction and `backward` is a
//! single reverse pass.

use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};

/// Probability clamp used by the cross-entropy ops.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulRows(Var, Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    LogSigmoid(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    RowDot(Var, Var),
    SumSqRows(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    GatherRows { table: Var, idx: Vec<usize> },
    GatherElems { x: Var, idx: Vec<usize> },
    SliceRows { x: Var, start: usize },
    Unfold1d { x: Var, k: usize },
    Involution { kernel: Var, windows: Var, k: usize, g: usize, c: usize },
    Bce { prob: Var, labels: Vec<f64> },
    Nll { prob: Var, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFiniteValue(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            param: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFiniteValue("constant"));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: None,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a parameter leaf whose gradient `backward` accumulates into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf,
            param: Some(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter leaf that is read but never updated (e.g. frozen embeddings).
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf,
            param: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    /// Batched product of `(B,m,k)` with `(B,k,n)`, or with `(B,n,k)` transposed.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("batch_matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(mismatch("batch_matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            let aa = &ad[i * m * k..(i + 1) * m * k];
            let bb = &bd[i * k * n..(i + 1) * k * n];
            let cc = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_bt_acc(aa, bb, cc, m, k, n);
            } else {
                gemm_acc(aa, bb, cc, m, k, n);
            }
        }
        let t = Tensor::new(vec![bs, m, n], out)?;
        self.push("batch_matmul", t, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sb = self.shape(b);
        let n = *sx.last().unwrap_or(&1);
        if sb.len() != 1 || sb[0] != n {
            return Err(mismatch("add_bias", format!("{:?} + {:?}", sx, sb)));
        }
        let mut out = self.value(x).clone();
        let bd = self.value(b).data().to_vec();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, bv) in chunk.iter_mut().zip(&bd) {
                *o += bv;
            }
        }
        self.push("add_bias", out, Op::AddBias(x, b), &[x, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        self.push("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        self.push("sub", t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        self.push("mul", t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.map(a, |x| x * c);
        self.push("scale", t, Op::Scale(a, c), &[a])
    }

    /// Multiplies each axis-0 slice of `x` by the matching entry of the vector `s`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let vx = self.value(x);
        let vs = self.value(s);
        if vs.ndim() != 1 || vx.ndim() == 0 || vs.len() != vx.rows() {
            return Err(mismatch("mul_rows", format!("{:?} * {:?}", vx.shape(), vs.shape())));
        }
        let w = vx.row_len();
        let mut out = vx.clone();
        for (chunk, &sv) in out.data_mut().chunks_mut(w.max(1)).zip(vs.data()) {
            chunk.iter_mut().for_each(|v| *v *= sv);
        }
        self.push("mul_rows", out, Op::MulRows(x, s), &[x, s])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let t = self.map(x, |v| if v > 0.0 { v } else { slope * v });
        self.push("leaky_relu", t, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, sigmoid);
        self.push("sigmoid", t, Op::Sigmoid(x), &[x])
    }

    /// `ln σ(x)`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| v.min(0.0) - (-v.abs()).exp().ln_1p());
        self.push("log_sigmoid", t, Op::LogSigmoid(x), &[x])
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let n = *vx.shape().last().ok_or_else(|| mismatch("softmax", "scalar input".into()))?;
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push("sum", t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(mismatch("mean", "empty input".into()));
        }
        let t = Tensor::scalar(v.sum() / v.len() as f64);
        self.push("mean", t, Op::Mean(x), &[x])
    }

    /// Per-row inner product of two equally shaped tensors.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let w = va.row_len();
        let out: Vec<f64> = va
            .data()
            .chunks(w)
            .zip(vb.data().chunks(w))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let t = Tensor::vector(out);
        self.push("row_dot", t, Op::RowDot(a, b), &[a, b])
    }

    /// Per-row squared Euclidean norm.
    pub fn sum_sq_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let w = va.row_len();
        let out: Vec<f64> = va.data().chunks(w).map(|x| x.iter().map(|p| p * p).sum()).collect();
        let t = Tensor::vector(out);
        self.push("sum_sq_rows", t, Op::SumSqRows(a), &[a])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", t, Op::Reshape(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| mismatch("concat", "no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(mismatch("concat", format!("axis {} of {:?}", axis, base)));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(mismatch("concat", format!("{:?} vs {:?}", s, base)));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let val = self.value(*v);
                let chunk = val.shape()[axis] * inner;
                data.extend_from_slice(&val.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        self.push(
            "concat",
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Selects axis-0 slices of `table`; repeated indices are allowed.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.ndim() == 0 {
            return Err(mismatch("gather_rows", "scalar table".into()));
        }
        let w = vt.row_len();
        let rows = vt.rows();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= rows {
                return Err(mismatch("gather_rows", format!("index {} of {} rows", i, rows)));
            }
            data.extend_from_slice(vt.row(i));
        }
        let mut shape = vt.shape().to_vec();
        shape[0] = idx.len();
        let t = Tensor::new(shape, data)?;
        self.push(
            "gather_rows",
            t,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        )
    }

    /// Selects flat elements of `x` into a vector.
    pub fn gather_elems(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= vx.len() {
                return Err(mismatch("gather_elems", format!("index {} of {}", i, vx.len())));
            }
            data.push(vx.data()[i]);
        }
        let t = Tensor::vector(data);
        self.push(
            "gather_elems",
            t,
            Op::GatherElems {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        if start > end || end > vx.rows() || vx.ndim() == 0 {
            return Err(mismatch("slice_rows", format!("{}..{} of {:?}", start, end, vx.shape())));
        }
        let w = vx.row_len();
        let data = vx.data()[start * w..end * w].to_vec();
        let mut shape = vx.shape().to_vec();
        shape[0] = end - start;
        let t = Tensor::new(shape, data)?;
        self.push("slice_rows", t, Op::SliceRows { x, start }, &[x])
    }

    /// Sliding windows of odd width `k` along axis 1 of a `(R, E, C)` tensor,
    /// zero-padded at both ends and never crossing rows. Output is
    /// `(R*E, k*C)` with window offset major and channel minor.
    pub fn unfold1d(&mut self, x: Var, k: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.ndim() != 3 || k % 2 == 0 {
            return Err(mismatch("unfold1d", format!("{:?} with k={}", vx.shape(), k)));
        }
        let (r, e, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let pad = k / 2;
        let src = vx.data();
        let mut data = vec![0.0; r * e * k * c];
        for row in 0..r {
            for j in 0..e {
                let dst = &mut data[(row * e + j) * k * c..(row * e + j + 1) * k * c];
                for kk in 0..k {
                    let pos = j as isize + kk as isize - pad as isize;
                    if pos < 0 || pos >= e as isize {
                        continue;
                    }
                    let s = (row * e + pos as usize) * c;
                    dst[kk * c..(kk + 1) * c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        let t = Tensor::new(vec![r * e, k * c], data)?;
        self.push("unfold1d", t, Op::Unfold1d { x, k }, &[x])
    }

    /// Position-specific, channel-shared filtering:
    /// `out[p,c] = Σ_g Σ_k kernel[p,k,g] · windows[p,k,c]`.
    pub fn involution(&mut self, kernel: Var, windows: Var, k: usize, g: usize) -> Result<Var> {
        let (sk, sw) = (self.shape(kernel).to_vec(), self.shape(windows).to_vec());
        if sk.len() != 2 || sw.len() != 2 || sk[0] != sw[0] || sk[1] != k * g || sw[1] % k != 0 {
            return Err(mismatch("involution", format!("kernel {:?} windows {:?}", sk, sw)));
        }
        let p = sk[0];
        let c = sw[1] / k;
        let kd = self.value(kernel).data();
        let wd = self.value(windows).data();
        let mut out = vec![0.0; p * c];
        for pi in 0..p {
            let kr = &kd[pi * k * g..(pi + 1) * k * g];
            let wr = &wd[pi * k * c..(pi + 1) * k * c];
            let or = &mut out[pi * c..(pi + 1) * c];
            for gi in 0..g {
                for ki in 0..k {
                    let a = kr[ki * g + gi];
                    for ci in 0..c {
                        or[ci] += a * wr[ki * c + ci];
                    }
                }
            }
        }
        let t = Tensor::new(vec![p, c], out)?;
        self.push(
            "involution",
            t,
            Op::Involution {
                kernel,
                windows,
                k,
                g,
                c,
            },
            &[kernel, windows],
        )
    }

    /// Summed binary cross-entropy of probabilities against 0/1 labels, with
    /// probabilities clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
    pub fn bce(&mut self, prob: Var, labels: &[f64]) -> Result<Var> {
        let vp = self.value(prob);
        if vp.len() != labels.len() {
            return Err(mismatch("bce", format!("{} probs, {} labels", vp.len(), labels.len())));
        }
        let mut loss = 0.0;
        for (&p, &y) in vp.data().iter().zip(labels) {
            let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            loss -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let t = Tensor::scalar(loss);
        self.push(
            "bce",
            t,
            Op::Bce {
                prob,
                labels: labels.to_vec(),
            },
            &[prob],
        )
    }

    /// `-Σ_r ln prob[r, targets[r]]` over a `(R, M)` probability matrix.
    pub fn nll(&mut self, prob: Var, targets: &[usize]) -> Result<Var> {
        let vp = self.value(prob);
        if vp.ndim() != 2 || vp.rows() != targets.len() {
            return Err(mismatch("nll", format!("{:?} with {} targets", vp.shape(), targets.len())));
        }
        let m = vp.shape()[1];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= m {
                return Err(mismatch("nll", format!("target {} of {}", t, m)));
            }
            loss -= vp.data()[r * m + t].max(PROB_CLAMP).ln();
        }
        let t = Tensor::scalar(loss);
        self.push(
            "nll",
            t,
            Op::Nll {
                prob,
                targets: targets.to_vec(),
            },
            &[prob],
        )
    }

    /// Back-propagates from a scalar and adds parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            if let Some(pid) = node.param {
                if !gout.is_finite() {
                    return Err(TensorError::NonFiniteGradient(store.get(pid).name.clone()));
                }
                store.get_mut(pid).grad.add_assign(&gout);
                continue;
            }
            self.backprop_node(i, &gout, &mut grads);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let go = gout.data();
        let acc = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| match &mut grads[v.0] {
            Some(g) => g.add_assign(&t),
            slot => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_bt_acc(go, vb.data(), &mut da, m, n, k);
                    acc(*a, Tensor::new(vec![m, k], da).unwrap(), grads);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_at_acc(va.data(), go, &mut db, m, k, n);
                    acc(*b, Tensor::new(vec![k, n], db).unwrap(), grads);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = node.value.shape()[2];
                if self.needs(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for t in 0..bs {
                        let g = &go[t * m * n..(t + 1) * m * n];
                        let bb = &vb.data()[t * k * n..(t + 1) * k * n];
                        let d = &mut da[t * m * k..(t + 1) * m * k];
                        if *trans_b {
                            // b is (n,k): da = g · b
                            gemm_acc(g, bb, d, m, n, k);
                        } else {
                            gemm_bt_acc(g, bb, d, m, n, k);
                        }
                    }
                    acc(*a, Tensor::new(va.shape().to_vec(), da).unwrap(), grads);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for t in 0..bs {
                        let g = &go[t * m * n..(t + 1) * m * n];
                        let aa = &va.data()[t * m * k..(t + 1) * m * k];
                        let d = &mut db[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            // db (n,k) = g^T · a
                            gemm_at_acc(g, aa, d, m, n, k);
                        } else {
                            gemm_at_acc(aa, g, d, m, k, n);
                        }
                    }
                    acc(*b, Tensor::new(vb.shape().to_vec(), db).unwrap(), grads);
                }
            }
            Op::AddBias(x, b) => {
                if self.needs(*x) {
                    acc(*x, gout.clone(), grads);
                }
                if self.needs(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![0.0; n];
                    for chunk in go.chunks(n) {
                        for (d, g) in db.iter_mut().zip(chunk) {
                            *d += g;
                        }
                    }
                    acc(*b, Tensor::vector(db), grads);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, gout.clone(), grads);
                }
                if self.needs(*b) {
                    acc(*b, gout.clone(), grads);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(*a, gout.clone(), grads);
                }
                if self.needs(*b) {
                    let d = go.iter().map(|g| -g).collect();
                    acc(*b, Tensor::new(gout.shape().to_vec(), d).unwrap(), grads);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = go.iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                    acc(*a, Tensor::new(gout.shape().to_vec(), d).unwrap(), grads);
                }
                if self.needs(*b) {
                    let d = go.iter().zip(va.data()).map(|(g, x)| g * x).collect();
                    acc(*b, Tensor::new(gout.shape().to_vec(), d).unwrap(), grads);
                }
            }
            Op::Scale(a, c) => {
                let d = go.iter().map(|g| g * c).collect();
                acc(*a, Tensor::new(gout.shape().to_vec(), d).unwrap(), grads);
            }
            Op::MulRows(x, s) => {
                let (vx, vs) = (self.value(*x), self.value(*s));
                let w = vx.row_len().max(1);
                if self.needs(*x) {
                    let mut d = gout.clone();
                    for (chunk, &sv) in d.data_mut().chunks_mut(w).zip(vs.data()) {
                        chunk.iter_mut().for_each(|v| *v *= sv);
                    }
                    acc(*x, d, grads);
                }
                if self.needs(*s) {
                    let d = go
                        .chunks(w)
                        .zip(vx.data().chunks(w))
                        .map(|(g, xv)| g.iter().zip(xv).map(|(p, q)| p * q).sum())
                        .collect();
                    acc(*s, Tensor::vector(d), grads);
                }
            }
            Op::LeakyRelu(x, slope) => {
                let vx = self.value(*x);
                let d = go
                    .iter()
                    .zip(vx.data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { g * slope })
                    .collect();
                acc(*x, Tensor::new(gout.shape().to_vec(), d).unwrap(), grads);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = go.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                acc(*x, Tensor::new(gout.shape().to_vec(), d).unwrap(), grads);
            }
            Op::LogSigmoid(x) => {
                let vx = self.value(*x);
                let d = go.iter().zip(vx.data()).map(|(g, &v)| g * sigmoid(-v)).collect();
                acc(*x, Tensor::new(gout.shape().to_vec(), d).unwrap(), grads);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut d = vec![0.0; y.len()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(y.chunks(n)).zip(go.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                acc(*x, Tensor::new(gout.shape().to_vec(), d).unwrap(), grads);
            }
            Op::Sum(x) => {
                let s = self.value(*x).shape().to_vec();
                acc(*x, Tensor::filled(&s, go[0]), grads);
            }
            Op::Mean(x) => {
                let v = self.value(*x);
                acc(*x, Tensor::filled(v.shape(), go[0] / v.len() as f64), grads);
            }
            Op::RowDot(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let w = va.row_len();
                let expand = |other: &Tensor| {
                    let mut d = other.clone();
                    for (chunk, g) in d.data_mut().chunks_mut(w).zip(go) {
                        chunk.iter_mut().for_each(|v| *v *= g);
                    }
                    d
                };
                if self.needs(*a) {
                    acc(*a, expand(vb), grads);
                }
                if self.needs(*b) {
                    acc(*b, expand(va), grads);
                }
            }
            Op::SumSqRows(a) => {
                let va = self.value(*a);
                let w = va.row_len();
                let mut d = va.clone();
                for (chunk, g) in d.data_mut().chunks_mut(w).zip(go) {
                    chunk.iter_mut().for_each(|v| *v *= 2.0 * g);
                }
                acc(*a, d, grads);
            }
            Op::Reshape(x) => {
                let s = self.value(*x).shape().to_vec();
                acc(*x, gout.clone().reshaped(&s).unwrap(), grads);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let vs = self.value(*v).shape().to_vec();
                    let chunk = vs[*axis] * inner;
                    if self.needs(*v) {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let start = o * total + offset;
                            d.extend_from_slice(&go[start..start + chunk]);
                        }
                        acc(*v, Tensor::new(vs, d).unwrap(), grads);
                    }
                    offset += chunk;
                }
            }
            Op::GatherRows { table, idx } => {
                let vt = self.value(*table);
                let w = vt.row_len();
                let mut d = Tensor::zeros(vt.shape());
                let dd = d.data_mut();
                for (r, &i) in idx.iter().enumerate() {
                    for (dst, g) in dd[i * w..(i + 1) * w].iter_mut().zip(&go[r * w..(r + 1) * w]) {
                        *dst += g;
                    }
                }
                acc(*table, d, grads);
            }
            Op::GatherElems { x, idx } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                let dd = d.data_mut();
                for (g, &i) in go.iter().zip(idx) {
                    dd[i] += g;
                }
                acc(*x, d, grads);
            }
            Op::SliceRows { x, start } => {
                let vx = self.value(*x);
                let w = vx.row_len();
                let mut d = Tensor::zeros(vx.shape());
                d.data_mut()[start * w..start * w + go.len()].copy_from_slice(go);
                acc(*x, d, grads);
            }
            Op::Unfold1d { x, k } => {
                let vx = self.value(*x);
                let (r, e, c) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
                let pad = k / 2;
                let mut d = vec![0.0; vx.len()];
                for row in 0..r {
                    for j in 0..e {
                        let src = &go[(row * e + j) * k * c..(row * e + j + 1) * k * c];
                        for kk in 0..*k {
                            let pos = j as isize + kk as isize - pad as isize;
                            if pos < 0 || pos >= e as isize {
                                continue;
                            }
                            let s = (row * e + pos as usize) * c;
                            for ci in 0..c {
                                d[s + ci] += src[kk * c + ci];
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(vx.shape().to_vec(), d).unwrap(), grads);
            }
            Op::Involution {
                kernel,
                windows,
                k,
                g,
                c,
            } => {
                let (k, g, c) = (*k, *g, *c);
                let kd = self.value(*kernel).data();
                let wd = self.value(*windows).data();
                let p = self.value(*kernel).rows();
                if self.needs(*kernel) {
                    let mut dk = vec![0.0; p * k * g];
                    for pi in 0..p {
                        let gr = &go[pi * c..(pi + 1) * c];
                        let wr = &wd[pi * k * c..(pi + 1) * k * c];
                        for ki in 0..k {
                            let s: f64 = (0..c).map(|ci| gr[ci] * wr[ki * c + ci]).sum();
                            for gi in 0..g {
                                dk[pi * k * g + ki * g + gi] = s;
                            }
                        }
                    }
                    acc(*kernel, Tensor::new(vec![p, k * g], dk).unwrap(), grads);
                }
                if self.needs(*windows) {
                    let mut dw = vec![0.0; p * k * c];
                    for pi in 0..p {
                        let gr = &go[pi * c..(pi + 1) * c];
                        let kr = &kd[pi * k * g..(pi + 1) * k * g];
                        for ki in 0..k {
                            let a: f64 = kr[ki * g..(ki + 1) * g].iter().sum();
                            for ci in 0..c {
                                dw[pi * k * c + ki * c + ci] = a * gr[ci];
                            }
                        }
                    }
                    acc(*windows, Tensor::new(vec![p, k * c], dw).unwrap(), grads);
                }
            }
            Op::Bce { prob, labels } => {
                let vp = self.value(*prob);
                let d = vp
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        if p < PROB_CLAMP || p > 1.0 - PROB_CLAMP {
                            0.0
                        } else {
                            go[0] * (-y / p + (1.0 - y) / (1.0 - p))
                        }
                    })
                    .collect();
                acc(*prob, Tensor::new(vp.shape().to_vec(), d).unwrap(), grads);
            }
            Op::Nll { prob, targets } => {
                let vp = self.value(*prob);
                let m = vp.shape()[1];
                let mut d = Tensor::zeros(vp.shape());
                for (r, &t) in targets.iter().enumerate() {
                    let p = vp.data()[r * m + t];
                    if p >= PROB_CLAMP {
                        d.data_mut()[r * m + t] -= go[0] / p;
                    }
                }
                acc(*prob, d, grads);
            }
        }
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
