//! Embedding enhancement: Involution1D, multi-head self-attention and a
//! convolution baseline, wired into the cascades selectable per run.

use autograd::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::rng;
use crate::store::Side;

#[derive(Debug, Error)]
pub enum EreError {
    #[error("unknown ERE mode {0:?}")]
    UnknownMode(String),
    #[error("invalid ERE config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EreMode {
    KrlOnly,
    Attn(usize),
    Invo,
    Conv,
    InvoThenAttn(usize),
    AttnThenInvo(usize),
}

impl EreMode {
    pub const NAMES: [&'static str; 6] = ["krl_only", "attn", "invo", "conv", "invo_then_attn", "attn_then_invo"];

    /// `heads` is ignored by modes without attention.
    pub fn parse(name: &str, heads: usize) -> Result<Self, EreError> {
        let h = || {
            if heads == 0 {
                Err(EreError::InvalidConfig("attention needs at least one head".into()))
            } else {
                Ok(heads)
            }
        };
        Ok(match name {
            "krl_only" => EreMode::KrlOnly,
            "attn" => EreMode::Attn(h()?),
            "invo" => EreMode::Invo,
            "conv" => EreMode::Conv,
            "invo_then_attn" => EreMode::InvoThenAttn(h()?),
            "attn_then_invo" => EreMode::AttnThenInvo(h()?),
            other => return Err(EreError::UnknownMode(other.to_string())),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            EreMode::KrlOnly => "krl_only",
            EreMode::Attn(_) => "attn",
            EreMode::Invo => "invo",
            EreMode::Conv => "conv",
            EreMode::InvoThenAttn(_) => "invo_then_attn",
            EreMode::AttnThenInvo(_) => "attn_then_invo",
        }
    }

    pub fn heads(self) -> Option<usize> {
        match self {
            EreMode::Attn(h) | EreMode::InvoThenAttn(h) | EreMode::AttnThenInvo(h) => Some(h),
            _ => None,
        }
    }

    /// `attn(3)`, `invo`, ...
    pub fn label(self) -> String {
        match self.heads() {
            Some(h) => format!("{}({})", self.name(), h),
            None => self.name().to_string(),
        }
    }

    fn uses_invo(self) -> bool {
        matches!(self, EreMode::Invo | EreMode::InvoThenAttn(_) | EreMode::AttnThenInvo(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EreConfig {
    pub mode: EreMode,
    /// Odd kernel size of the involution and the convolution.
    pub k: usize,
    pub g: usize,
    /// Width of the kernel generator's middle layer; `None` = `k·C`.
    pub hidden: Option<usize>,
    pub leaky_slope: f64,
    pub scale_by_sqrt_d: bool,
}

impl Default for EreConfig {
    fn default() -> Self {
        Self {
            mode: EreMode::InvoThenAttn(3),
            k: 5,
            g: 1,
            hidden: None,
            leaky_slope: 0.01,
            scale_by_sqrt_d: false,
        }
    }
}

impl EreConfig {
    pub fn validate(&self) -> Result<(), EreError> {
        if self.k % 2 == 0 || self.g == 0 || self.hidden == Some(0) {
            return Err(EreError::InvalidConfig(format!(
                "k must be odd and g, hidden positive (k={}, g={}, hidden={:?})",
                self.k, self.g, self.hidden
            )));
        }
        if self.mode.heads() == Some(0) {
            return Err(EreError::InvalidConfig("attention needs at least one head".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct InvoParams {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct ConvParams {
    /// `(k·C, C)`: row `kk·C + c_in`, column `c_out`.
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Debug, Clone)]
pub struct AttnParams {
    pub heads: Vec<HeadParams>,
    /// `(H·D, D)` map applied after concatenating the heads.
    pub wo: ParamId,
}

/// Operator parameters of one side; waveform and environment never share.
#[derive(Debug, Clone)]
pub struct EreSide {
    pub side: Side,
    pub rows: usize,
    pub n_emb: usize,
    pub c: usize,
    pub cfg: EreConfig,
    pub invo: Option<InvoParams>,
    pub conv: Option<ConvParams>,
    pub attn: Option<AttnParams>,
}

fn uniform(shape: &[usize], bound: f64, r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-bound..=bound)).collect()).expect("shape matches")
}

/// Diagonal of the initial query and key maps.
const ATTN_QK_DIAG: f64 = 2.0;

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn side_tag(side: Side) -> &'static str {
    match side {
        Side::Waveform => "wf",
        Side::Environment => "env",
    }
}

impl EreSide {
    pub fn init(
        side: Side,
        rows: usize,
        n_emb: usize,
        c: usize,
        cfg: EreConfig,
        ps: &mut ParamStore,
        seed: u64,
    ) -> Result<Self, EreError> {
        cfg.validate()?;
        let tag = side_tag(side);
        let mut r = rng::stream(seed, &[0x4552_45, side as u64]);
        let (k, g) = (cfg.k, cfg.g);
        let mut invo = None;
        let mut conv = None;
        let mut attn = None;
        if cfg.mode.uses_invo() {
            let hidden = cfg.hidden.unwrap_or(k * c);
            let kc = k * c;
            // generator starts close to a centered delta kernel
            let mut delta = vec![0.0; k * g];
            for gi in 0..g {
                delta[(k / 2) * g + gi] = 1.0 / g as f64;
            }
            invo = Some(InvoParams {
                fc1_w: ps.insert(format!("ere/{}/invo/fc1_w", tag), uniform(&[kc, hidden], glorot(kc, hidden), &mut r))?,
                fc1_b: ps.insert(format!("ere/{}/invo/fc1_b", tag), Tensor::zeros(&[hidden]))?,
                fc2_w: ps.insert(
                    format!("ere/{}/invo/fc2_w", tag),
                    uniform(&[hidden, k * g], 0.1 * glorot(hidden, k * g), &mut r),
                )?,
                fc2_b: ps.insert(format!("ere/{}/invo/fc2_b", tag), Tensor::vector(delta))?,
            });
        }
        if cfg.mode == EreMode::Conv {
            let mut w = uniform(&[k * c, c], 0.1 * glorot(k * c, c), &mut r);
            for ci in 0..c {
                w.data_mut()[((k / 2) * c + ci) * c + ci] += 1.0;
            }
            conv = Some(ConvParams {
                w: ps.insert(format!("ere/{}/conv/w", tag), w)?,
                b: ps.insert(format!("ere/{}/conv/b", tag), Tensor::zeros(&[c]))?,
            });
        }
        if let Some(h) = cfg.mode.heads() {
            let d = n_emb * c;
            let heads = (0..h)
                .map(|i| -> Result<HeadParams, EreError> {
                    // near-identity maps keep softmax peaked on the diagonal at init, so
                    // heads pass rows through instead of averaging them together
                    let mut mk = |name: &str| {
                        let mut w = uniform(&[d, d], glorot(d, d), &mut r);
                        let diag = if name == "wv" { 1.0 } else { ATTN_QK_DIAG };
                        w.data_mut().iter_mut().for_each(|x| *x *= 0.1);
                        (0..d).for_each(|j| w.data_mut()[j * d + j] += diag);
                        ps.insert(format!("ere/{}/attn/h{}/{}", tag, i, name), w)
                    };
                    Ok(HeadParams {
                        wq: mk("wq")?,
                        wk: mk("wk")?,
                        wv: mk("wv")?,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            // output map starts as the head average
            let mut wo = uniform(&[h * d, d], 0.1 * glorot(h * d, d), &mut r);
            for hi in 0..h {
                (0..d).for_each(|j| wo.data_mut()[(hi * d + j) * d + j] += 1.0 / h as f64);
            }
            let wo = ps.insert(format!("ere/{}/attn/wo", tag), wo)?;
            attn = Some(AttnParams { heads, wo });
        }
        Ok(Self {
            side,
            rows,
            n_emb,
            c,
            cfg,
            invo,
            conv,
            attn,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        if let Some(p) = &self.invo {
            out.extend([p.fc1_w, p.fc1_b, p.fc2_w, p.fc2_b]);
        }
        if let Some(p) = &self.conv {
            out.extend([p.w, p.b]);
        }
        if let Some(p) = &self.attn {
            for h in &p.heads {
                out.extend([h.wq, h.wk, h.wv]);
            }
            out.push(p.wo);
        }
        out
    }

    /// Length of the flattened output per head entity.
    pub fn output_len(&self) -> usize {
        self.rows * self.n_emb * self.c
    }

    fn check_block(&self, g: &Graph, x: Var) -> Result<usize, EreError> {
        let s = g.shape(x);
        if s.len() != 3 || s[1] != self.n_emb || s[2] != self.c || s[0] % self.rows != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "enhance",
                detail: format!("block {:?} for {} rows x {} x {}", s, self.rows, self.n_emb, self.c),
            }
            .into());
        }
        Ok(s[0] / self.rows)
    }

    /// Involution over `(R, n_emb, C)`; same output shape.
    pub fn involution1d(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var, EreError> {
        let p = self.invo.as_ref().ok_or_else(|| EreError::InvalidConfig("no involution parameters".into()))?;
        let shape = g.shape(x).to_vec();
        let win = g.unfold1d(x, self.cfg.k)?;
        let (w1, b1, w2, b2) = (g.param(ps, p.fc1_w), g.param(ps, p.fc1_b), g.param(ps, p.fc2_w), g.param(ps, p.fc2_b));
        let h = g.matmul(win, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.leaky_relu(h, self.cfg.leaky_slope)?;
        let kern = g.matmul(h, w2)?;
        let kern = g.add_bias(kern, b2)?;
        let out = g.involution(kern, win, self.cfg.k, self.cfg.g)?;
        Ok(g.reshape(out, &shape)?)
    }

    pub fn conv1d(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var, EreError> {
        let p = self.conv.as_ref().ok_or_else(|| EreError::InvalidConfig("no convolution parameters".into()))?;
        let shape = g.shape(x).to_vec();
        let win = g.unfold1d(x, self.cfg.k)?;
        let (w, b) = (g.param(ps, p.w), g.param(ps, p.b));
        let y = g.matmul(win, w)?;
        let y = g.add_bias(y, b)?;
        Ok(g.reshape(y, &shape)?)
    }

    /// Multi-head attention over `(batch·rows, D)` with rows attending
    /// within their own head entity. Output has the same shape.
    pub fn multi_head(&self, g: &mut Graph, ps: &ParamStore, x: Var, batch: usize) -> Result<Var, EreError> {
        let p = self.attn.as_ref().ok_or_else(|| EreError::InvalidConfig("no attention parameters".into()))?;
        let d = g.shape(x)[1];
        let n = self.rows;
        let mut outs = Vec::with_capacity(p.heads.len());
        for h in &p.heads {
            let (wq, wk, wv) = (g.param(ps, h.wq), g.param(ps, h.wk), g.param(ps, h.wv));
            let q = g.matmul(x, wq)?;
            let k = g.matmul(x, wk)?;
            let v = g.matmul(x, wv)?;
            let q = g.reshape(q, &[batch, n, d])?;
            let k = g.reshape(k, &[batch, n, d])?;
            let v = g.reshape(v, &[batch, n, d])?;
            let mut s = g.batch_matmul(q, k, true)?;
            if self.cfg.scale_by_sqrt_d {
                s = g.scale(s, 1.0 / (d as f64).sqrt())?;
            }
            let a = g.softmax(s)?;
            let z = g.batch_matmul(a, v, false)?;
            outs.push(g.reshape(z, &[batch * n, d])?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        let wo = g.param(ps, p.wo);
        Ok(g.matmul(cat, wo)?)
    }

    /// Applies the configured cascade to `(batch·rows, n_emb, C)` and
    /// flattens each head entity into one vector: `(batch, rows·n_emb·C)`.
    pub fn enhance(&self, g: &mut Graph, ps: &ParamStore, block: Var) -> Result<Var, EreError> {
        let b = self.check_block(g, block)?;
        let (n, d) = (self.rows, self.n_emb * self.c);
        let flat_rows = |g: &mut Graph, v: Var| g.reshape(v, &[b * n, d]);
        let out = match self.cfg.mode {
            EreMode::KrlOnly => block,
            EreMode::Invo => self.involution1d(g, ps, block)?,
            EreMode::Conv => self.conv1d(g, ps, block)?,
            EreMode::Attn(_) => {
                let x = flat_rows(g, block)?;
                self.multi_head(g, ps, x, b)?
            }
            EreMode::InvoThenAttn(_) => {
                let y = self.involution1d(g, ps, block)?;
                let x = flat_rows(g, y)?;
                self.multi_head(g, ps, x, b)?
            }
            EreMode::AttnThenInvo(_) => {
                let x = flat_rows(g, block)?;
                let y = self.multi_head(g, ps, x, b)?;
                let y = g.reshape(y, &[b * n, self.n_emb, self.c])?;
                self.involution1d(g, ps, y)?
            }
        };
        Ok(g.reshape(out, &[b, self.output_len()])?)
    }
}

/// `T[k,g,c] = A[k,g] · B[k,c]` for `A: (K,G)`, `B: (K,C)`.
pub fn expansion_product(a: &Tensor, b: &Tensor) -> Result<Tensor, EreError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
        return Err(TensorError::ShapeMismatch {
            op: "expansion_product",
            detail: format!("{:?} and {:?}", sa, sb),
        }
        .into());
    }
    let (k, g, c) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0; k * g * c];
    for ki in 0..k {
        for gi in 0..g {
            for ci in 0..c {
                out[(ki * g + gi) * c + ci] = a.data()[ki * g + gi] * b.data()[ki * c + ci];
            }
        }
    }
    Ok(Tensor::new(vec![k, g, c], out)?)
}

/// Zero-padded `(K, C)` window of row `i` centred at position `j`.
pub fn window(block: &Tensor, i: usize, j: usize, k: usize) -> Tensor {
    let (e, c) = (block.shape()[1], block.shape()[2]);
    let mut w = vec![0.0; k * c];
    for kk in 0..k {
        let pos = j as isize + kk as isize - (k / 2) as isize;
        if pos < 0 || pos >= e as isize {
            continue;
        }
        for ci in 0..c {
            w[kk * c + ci] = block.data()[(i * e + pos as usize) * c + ci];
        }
    }
    Tensor::new(vec![k, c], w).expect("shape matches")
}

/// Literal per-position evaluation of the involution: each window's kernel
/// comes from `kernel_fn(flattened window)` reshaped to `(K, G)`, expanded
/// against the window and summed over `g` and `k`.
pub fn involution_reference(
    block: &Tensor,
    k: usize,
    g: usize,
    kernel_fn: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<Tensor, EreError> {
    let (n, e, c) = (block.shape()[0], block.shape()[1], block.shape()[2]);
    let mut out = vec![0.0; n * e * c];
    for i in 0..n {
        for j in 0..e {
            let w = window(block, i, j, k);
            let kern = Tensor::new(vec![k, g], kernel_fn(w.data()))?;
            let t = expansion_product(&kern, &w)?;
            for ci in 0..c {
                let mut s = 0.0;
                for gi in 0..g {
                    for ki in 0..k {
                        s += t.data()[(ki * g + gi) * c + ci];
                    }
                }
                out[(i * e + j) * c + ci] = s;
            }
        }
    }
    Ok(Tensor::new(vec![n, e, c], out)?)
}

/// Two-layer kernel generator evaluated directly from parameter values.
pub fn involution_kernel(x_flat: &[f64], p: &InvoParams, ps: &ParamStore, slope: f64) -> Vec<f64> {
    let dense = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        (0..cols)
            .map(|o| b.data()[o] + (0..rows).map(|i| x[i] * w.data()[i * cols + o]).sum::<f64>())
            .collect()
    };
    let h: Vec<f64> = dense(x_flat, ps.value(p.fc1_w), ps.value(p.fc1_b))
        .into_iter()
        .map(|v| if v > 0.0 { v } else { slope * v })
        .collect();
    dense(&h, ps.value(p.fc2_w), ps.value(p.fc2_b))
}

/// Direct zero-padded convolution: `out[i,j,co] = b[co] + Σ_kk Σ_ci
/// x[i, j+kk-K/2, ci] · w[kk·C + ci, co]`.
pub fn conv1d_reference(block: &Tensor, w: &Tensor, bias: &[f64], k: usize) -> Tensor {
    let (n, e, c) = (block.shape()[0], block.shape()[1], block.shape()[2]);
    let co_n = w.shape()[1];
    let mut out = vec![0.0; n * e * co_n];
    for i in 0..n {
        for j in 0..e {
            for co in 0..co_n {
                let mut s = bias[co];
                for kk in 0..k {
                    let pos = j as isize + kk as isize - (k / 2) as isize;
                    if pos < 0 || pos >= e as isize {
                        continue;
                    }
                    for ci in 0..c {
                        s += block.data()[(i * e + pos as usize) * c + ci] * w.data()[(kk * c + ci) * co_n + co];
                    }
                }
                out[(i * e + j) * co_n + co] = s;
            }
        }
    }
    Tensor::new(vec![n, e, co_n], out).expect("shape matches")
}

/// `softmax(Q Kᵀ) V` for one head, with optional `1/√d` scaling.
pub fn self_attention_reference(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, scale: bool) -> Tensor {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let dout = wq.shape()[1];
    let proj = |w: &Tensor| -> Vec<f64> {
        let mut out = vec![0.0; n * dout];
        for i in 0..n {
            for o in 0..dout {
                out[i * dout + o] = (0..d).map(|j| x.data()[i * d + j] * w.data()[j * dout + o]).sum();
            }
        }
        out
    };
    let (q, k, v) = (proj(wq), proj(wk), proj(wv));
    let dv = wv.shape()[1];
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let mut logits: Vec<f64> = (0..n)
            .map(|j| (0..dout).map(|t| q[i * dout + t] * k[j * dout + t]).sum::<f64>())
            .collect();
        if scale {
            logits.iter_mut().for_each(|l| *l /= (dout as f64).sqrt());
        }
        autograd::softmax_in_place(&mut logits);
        for (j, a) in logits.iter().enumerate() {
            for t in 0..dv {
                out[i * dv + t] += a * v[j * dv + t];
            }
        }
    }
    Tensor::new(vec![n, dv], out).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use autograd::grad_check;

    fn fill(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[]);
        uniform(shape, 1.0, &mut r)
    }

    fn side(mode: EreMode, rows: usize, n_emb: usize, c: usize, ps: &mut ParamStore) -> EreSide {
        let cfg = EreConfig {
            mode,
            k: 3,
            ..EreConfig::default()
        };
        EreSide::init(Side::Environment, rows, n_emb, c, cfg, ps, 11).unwrap()
    }

    fn rig_kernel(ps: &mut ParamStore, p: &InvoParams, kernel: &[f64]) {
        ps.value_mut(p.fc2_w).fill(0.0);
        ps.value_mut(p.fc2_b).data_mut().copy_from_slice(kernel);
    }

    #[test]
    fn expansion_product_hand_case() {
        let a = Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(expansion_product(&a, &b).unwrap().data(), &[3.0, 4.0, 10.0, 12.0]);
        let ones = Tensor::filled(&[2, 1], 1.0);
        assert_eq!(expansion_product(&ones, &b).unwrap().data(), b.data());
        assert!(expansion_product(&a, &Tensor::zeros(&[2, 2])).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn modes_parse_by_name() {
        for name in EreMode::NAMES {
            assert_eq!(EreMode::parse(name, 3).unwrap().name(), name);
        }
        assert!(matches!(EreMode::parse("pooling", 1), Err(EreError::UnknownMode(_))));
        assert!(EreMode::parse("attn", 0).is_err());
        assert_eq!(EreMode::InvoThenAttn(3).label(), "invo_then_attn(3)");
    }

    #[test]
    fn kernel_generator_zero_case_and_size() {
        let mut ps = ParamStore::new();
        let cfg = EreConfig {
            mode: EreMode::Invo,
            ..EreConfig::default()
        };
        let s = EreSide::init(Side::Environment, 2, 8, 2, cfg, &mut ps, 0).unwrap();
        let p = s.invo.clone().unwrap();
        ps.value_mut(p.fc2_b).fill(0.0);
        let k = involution_kernel(&[0.0; 10], &p, &ps, 0.01);
        assert_eq!(k, vec![0.0; 5]);
    }

    #[test]
    fn rigged_box_and_delta_kernels() {
        let mut ps = ParamStore::new();
        let s = side(EreMode::Invo, 1, 3, 1, &mut ps);
        let p = s.invo.clone().unwrap();
        let x = Tensor::new(vec![1, 3, 1], vec![1.0, 2.0, 4.0]).unwrap();

        rig_kernel(&mut ps, &p, &[0.0, 1.0, 0.0]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let y = s.involution1d(&mut g, &ps, xv).unwrap();
        assert_eq!(g.value(y).data(), x.data());

        rig_kernel(&mut ps, &p, &[1.0, 1.0, 1.0]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let y = s.involution1d(&mut g, &ps, xv).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0, 6.0]);

        // the all-ones convolution on one channel is the same box filter
        let mut ps2 = ParamStore::new();
        let cs = side(EreMode::Conv, 1, 3, 1, &mut ps2);
        let cp = cs.conv.clone().unwrap();
        ps2.value_mut(cp.w).fill(1.0);
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let y = cs.conv1d(&mut g, &ps2, xv).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0, 6.0]);
    }

    #[test]
    fn delta_convolution_is_identity() {
        let mut ps = ParamStore::new();
        let s = side(EreMode::Conv, 2, 4, 3, &mut ps);
        let p = s.conv.clone().unwrap();
        let w = ps.value_mut(p.w);
        w.fill(0.0);
        for c in 0..3 {
            w.data_mut()[(3 + c) * 3 + c] = 1.0;
        }
        let x = fill(&[2, 4, 3], 1);
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let y = s.conv1d(&mut g, &ps, xv).unwrap();
        assert_eq!(g.value(y).data(), x.data());
    }

    #[test]
    fn involution_matches_literal_loop() {
        let mut ps = ParamStore::new();
        let cfg = EreConfig {
            mode: EreMode::Invo,
            k: 3,
            g: 2,
            ..EreConfig::default()
        };
        let s = EreSide::init(Side::Waveform, 2, 4, 2, cfg, &mut ps, 5).unwrap();
        let p = s.invo.clone().unwrap();
        let x = fill(&[2, 4, 2], 3);
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let y = s.involution1d(&mut g, &ps, xv).unwrap();
        let want = involution_reference(&x, 3, 2, |w| involution_kernel(w, &p, &ps, 0.01)).unwrap();
        for (a, b) in g.value(y).data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn attention_hand_cases() {
        let id = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = Tensor::zeros(&[2, 2]);
        let v = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        // zero query weights give all-zero logits
        let z = self_attention_reference(&v, &zero, &id, &id, false);
        assert_eq!(z.data(), &[1.0, 1.0, 1.0, 1.0]);
        let x1 = Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap();
        let z1 = self_attention_reference(&x1, &id, &id, &id, false);
        assert_eq!(z1.data(), x1.data());
    }

    #[test]
    fn single_head_with_identity_output_is_the_head() {
        let mut ps = ParamStore::new();
        let s = side(EreMode::Attn(1), 3, 2, 2, &mut ps);
        let p = s.attn.clone().unwrap();
        let wo = ps.value_mut(p.wo);
        wo.fill(0.0);
        for i in 0..4 {
            wo.data_mut()[i * 4 + i] = 1.0;
        }
        let x = fill(&[6, 4], 8);
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let z = s.multi_head(&mut g, &ps, xv, 2).unwrap();
        let h = &p.heads[0];
        for b in 0..2 {
            let xb = Tensor::new(vec![3, 4], x.data()[b * 12..(b + 1) * 12].to_vec()).unwrap();
            let want = self_attention_reference(&xb, ps.value(h.wq), ps.value(h.wk), ps.value(h.wv), false);
            for (a, w) in g.value(z).data()[b * 12..(b + 1) * 12].iter().zip(want.data()) {
                assert!((a - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permuting_heads_with_the_output_map_is_invariant() {
        let mut ps = ParamStore::new();
        let s = side(EreMode::Attn(2), 2, 2, 1, &mut ps);
        let x = fill(&[2, 2], 4);
        let run = |ps: &ParamStore, s: &EreSide| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let z = s.multi_head(&mut g, ps, xv, 1).unwrap();
            g.value(z).clone()
        };
        let base = run(&ps, &s);
        let mut swapped = s.clone();
        let p = swapped.attn.as_mut().unwrap();
        p.heads.swap(0, 1);
        let wo = ps.value(p.wo).clone();
        let d = 2;
        let mut perm = wo.clone();
        perm.data_mut()[..d * d].copy_from_slice(&wo.data()[d * d..]);
        perm.data_mut()[d * d..].copy_from_slice(&wo.data()[..d * d]);
        *ps.value_mut(p.wo) = perm;
        let again = run(&ps, &swapped);
        for (a, b) in base.data().iter().zip(again.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn output_length_depends_only_on_side_and_mode() {
        for mode in [
            EreMode::KrlOnly,
            EreMode::Attn(2),
            EreMode::Invo,
            EreMode::Conv,
            EreMode::InvoThenAttn(3),
            EreMode::AttnThenInvo(1),
        ] {
            let mut ps = ParamStore::new();
            let s = side(mode, 6, 4, 2, &mut ps);
            let mut g = Graph::new();
            let xv = g.constant(fill(&[12, 4, 2], 2)).unwrap();
            let z = s.enhance(&mut g, &ps, xv).unwrap();
            assert_eq!(g.shape(z), &[2, 48], "{:?}", mode);
        }
    }

    #[test]
    fn krl_only_flattens_environment_blocks() {
        let mut ps = ParamStore::new();
        let s = EreSide::init(Side::Environment, 6, 16, 2, EreConfig { mode: EreMode::KrlOnly, ..EreConfig::default() }, &mut ps, 0).unwrap();
        let mut g = Graph::new();
        let x = fill(&[6, 16, 2], 1);
        let xv = g.constant(x.clone()).unwrap();
        let z = s.enhance(&mut g, &ps, xv).unwrap();
        assert_eq!(g.shape(z), &[1, 192]);
        assert_eq!(g.value(z).data(), x.data());
    }

    #[test]
    fn every_mode_passes_gradient_check() {
        for mode in [
            EreMode::Attn(2),
            EreMode::Invo,
            EreMode::Conv,
            EreMode::InvoThenAttn(2),
            EreMode::AttnThenInvo(1),
        ] {
            let mut ps = ParamStore::new();
            let s = side(mode, 3, 4, 2, &mut ps);
            let x = ps.insert("x", fill(&[6, 4, 2], 9)).unwrap();
            let w = fill(&[2, 24], 10);
            let mut ids = s.ids();
            ids.push(x);
            let report = grad_check(
                |g, ps| {
                    let xv = g.param(ps, x);
                    let z = s.enhance(g, ps, xv).map_err(|e| match e {
                        EreError::Tensor(t) => t,
                        other => panic!("{}", other),
                    })?;
                    let wv = g.constant(w.clone())?;
                    let p = g.mul(z, wv)?;
                    g.sum(p)
                },
                &ps,
                &ids,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "{:?} {:?}", mode, report.worst);
        }
    }
}
