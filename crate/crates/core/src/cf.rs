//! MLP collaborative filtering over enhanced environment and waveform
//! vectors, its balanced cross-entropy and negative sampling.

use std::collections::HashMap;

use autograd::{Graph, ParamId, ParamStore, Tensor, TensorError, Var, PROB_CLAMP};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::ere::EreError;
use crate::krl::KrlError;
use crate::rng;
use crate::store::{CwkgStore, EntityKind, StoreError, FEASIBLE_KEY};

#[derive(Debug, Error)]
pub enum CfError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unbalanced batch: {positives} positives vs {negatives} negatives")]
    UnbalancedBatch { positives: usize, negatives: usize },
    #[error("no negative waveform available for environment {0}")]
    NoNegativeAvailable(String),
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("empty test set")]
    EmptyTestSet,
    #[error("{objective} diverged at epoch {epoch}: loss {value}")]
    DivergenceDetected {
        objective: &'static str,
        epoch: usize,
        value: f64,
    },
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Krl(#[from] KrlError),
    #[error(transparent)]
    Ere(#[from] EreError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl CfError {
    /// Divergence or a non-finite value anywhere in the computation.
    pub fn is_numeric(&self) -> bool {
        let t = match self {
            CfError::DivergenceDetected { .. } => return true,
            CfError::Tensor(t) | CfError::Krl(KrlError::Tensor(t)) | CfError::Ere(EreError::Tensor(t)) => t,
            _ => return false,
        };
        matches!(t, TensorError::NonFiniteGradient(_) | TensorError::NonFiniteValue(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    /// `[d_in, d_1, ..., d_L]`.
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpConfig {
    pub fn new(d_in: usize, hidden: &[usize]) -> Self {
        Self {
            widths: std::iter::once(d_in).chain(hidden.iter().copied()).collect(),
            activation: Activation::LeakyRelu(0.01),
        }
    }

    pub fn validate(&self) -> Result<(), CfError> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(CfError::ShapeMismatch(format!("MLP widths {:?}", self.widths)));
        }
        Ok(())
    }
}

/// Perceptron cascade with output coefficients `h`. The first weight matrix
/// is split at `d_u` so `(Z_u ⊕ Z_v) W = Z_u W_u + Z_v W_v` can be computed
/// once per environment and once per waveform.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub cfg: MlpConfig,
    pub d_u: usize,
    pub w: Vec<ParamId>,
    pub b: Vec<ParamId>,
    pub h: ParamId,
}

impl Mlp {
    pub fn init(cfg: MlpConfig, d_u: usize, ps: &mut ParamStore, seed: u64) -> Result<Self, CfError> {
        cfg.validate()?;
        if d_u == 0 || d_u >= cfg.widths[0] {
            return Err(CfError::ShapeMismatch(format!("split {} of d_in {}", d_u, cfg.widths[0])));
        }
        let mut r = rng::stream(seed, &[0x4346]);
        let glorot = |rows: usize, cols: usize, r: &mut ChaCha8Rng| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| r.gen_range(-bound..=bound)).collect())
                .expect("shape matches")
        };
        let mut w = Vec::new();
        let mut b = Vec::new();
        for (i, pair) in cfg.widths.windows(2).enumerate() {
            w.push(ps.insert(format!("cf/w{}", i), glorot(pair[0], pair[1], &mut r))?);
            b.push(ps.insert(format!("cf/b{}", i), Tensor::zeros(&[pair[1]]))?);
        }
        let last = *cfg.widths.last().expect("validated");
        let h = ps.insert("cf/h", glorot(last, 1, &mut r))?;
        Ok(Self { cfg, d_u, w, b, h })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut out: Vec<ParamId> = self.w.iter().chain(&self.b).copied().collect();
        out.push(self.h);
        out
    }

    pub fn d_in(&self) -> usize {
        self.cfg.widths[0]
    }

    fn act(&self, g: &mut Graph, x: Var) -> Result<Var, CfError> {
        Ok(match self.cfg.activation {
            Activation::LeakyRelu(s) => g.leaky_relu(x, s)?,
            Activation::Identity => x,
        })
    }

    /// First-layer contributions `(Z_u W_u, Z_v W_v)` without bias.
    pub fn first_layer(&self, g: &mut Graph, ps: &ParamStore, zu: Var, zv: Var) -> Result<(Var, Var), CfError> {
        let (su, sv) = (g.shape(zu).to_vec(), g.shape(zv).to_vec());
        if su.len() != 2 || sv.len() != 2 || su[1] != self.d_u || su[1] + sv[1] != self.d_in() {
            return Err(CfError::ShapeMismatch(format!(
                "Z_u {:?} and Z_v {:?} for split {} of {}",
                su,
                sv,
                self.d_u,
                self.d_in()
            )));
        }
        let w0 = g.param(ps, self.w[0]);
        let wu = g.slice_rows(w0, 0, self.d_u)?;
        let wv = g.slice_rows(w0, self.d_u, self.d_in())?;
        Ok((g.matmul(zu, wu)?, g.matmul(zv, wv)?))
    }

    /// Remaining cascade from first-layer pre-activations `(P, d_1)`; `(P,)`.
    pub fn head(&self, g: &mut Graph, ps: &ParamStore, pre: Var) -> Result<Var, CfError> {
        let b0 = g.param(ps, self.b[0]);
        let mut z = g.add_bias(pre, b0)?;
        z = self.act(g, z)?;
        for i in 1..self.w.len() {
            let (w, b) = (g.param(ps, self.w[i]), g.param(ps, self.b[i]));
            z = g.matmul(z, w)?;
            z = g.add_bias(z, b)?;
            z = self.act(g, z)?;
        }
        let h = g.param(ps, self.h);
        let s = g.matmul(z, h)?;
        let p = g.shape(s)[0];
        Ok(g.reshape(s, &[p])?)
    }

    /// Scores of `(row of zu, row of zv)` pairs, shape `(P,)`.
    pub fn pair_scores(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        zu: Var,
        zv: Var,
        pairs: &[(usize, usize)],
    ) -> Result<Var, CfError> {
        let (hu, hv) = self.first_layer(g, ps, zu, zv)?;
        let iu: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let iv: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let a = g.gather_rows(hu, &iu)?;
        let b = g.gather_rows(hv, &iv)?;
        let pre = g.add(a, b)?;
        self.head(g, ps, pre)
    }
}

/// `s_uv` of one concatenated pair.
pub fn cf_score(zu: &[f64], zv: &[f64], mlp: &Mlp, ps: &ParamStore) -> Result<f64, CfError> {
    if zu.len() != mlp.d_u || zu.len() + zv.len() != mlp.d_in() {
        return Err(CfError::ShapeMismatch(format!(
            "pair lengths {} + {} vs {}",
            zu.len(),
            zv.len(),
            mlp.d_in()
        )));
    }
    let mut g = Graph::new();
    let u = g.constant(Tensor::matrix(1, zu.len(), zu.to_vec())?)?;
    let v = g.constant(Tensor::matrix(1, zv.len(), zv.to_vec())?)?;
    let s = mlp.pair_scores(&mut g, ps, u, v, &[(0, 0)])?;
    Ok(g.value(s).data()[0])
}

/// Ranking-time scores of one environment over all `M` waveforms.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub env: String,
    /// Waveform ids in ascending order; ties in `probs` favour lower index.
    pub waveforms: Vec<String>,
    pub scores: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ScoreVector {
    pub fn new(env: String, waveforms: Vec<String>, scores: Vec<f64>) -> Self {
        let mut probs = scores.clone();
        autograd::softmax_in_place(&mut probs);
        Self {
            env,
            waveforms,
            scores,
            probs,
        }
    }

    pub fn m(&self) -> usize {
        self.scores.len()
    }

    /// Indices by descending score, ties by ascending index.
    pub fn ranking(&self) -> Vec<usize> {
        ranking(&self.scores)
    }
}

pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

fn check_balance(labels: &[f64]) -> Result<(), CfError> {
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    let negatives = labels.iter().filter(|&&y| y == 0.0).count();
    if positives + negatives != labels.len() {
        return Err(CfError::InvalidValue("labels must be 0 or 1".into()));
    }
    if positives != negatives {
        return Err(CfError::UnbalancedBatch { positives, negatives });
    }
    Ok(())
}

/// Summed cross-entropy of per-pair probabilities over a balanced batch.
pub fn ce_loss(g: &mut Graph, prob: Var, labels: &[f64]) -> Result<Var, CfError> {
    check_balance(labels)?;
    Ok(g.bce(prob, labels)?)
}

/// Plain-value counterpart of [`ce_loss`].
pub fn ce_loss_value(probs: &[f64], labels: &[f64]) -> Result<f64, CfError> {
    check_balance(labels)?;
    if probs.len() != labels.len() {
        return Err(CfError::ShapeMismatch(format!("{} probs, {} labels", probs.len(), labels.len())));
    }
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum())
}

/// Environment-waveform pair by store entity index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CfPair {
    pub env: usize,
    pub wf: usize,
}

/// One negative per positive, uniform over waveforms with no feasible edge
/// to the environment in `store`. Deterministic per `(pair, seed)`.
pub fn sample_cf_negatives(positives: &[CfPair], store: &CwkgStore, seed: u64) -> Result<Vec<CfPair>, CfError> {
    let waveforms: Vec<usize> = store
        .heads(EntityKind::WaveformHead)
        .into_iter()
        .map(|id| store.entity_idx(id).expect("listed head"))
        .collect();
    let mut pools: HashMap<usize, Vec<usize>> = HashMap::new();
    positives
        .iter()
        .map(|p| {
            let pool = pools.entry(p.env).or_insert_with(|| {
                waveforms
                    .iter()
                    .copied()
                    .filter(|&w| !store.contains(p.env, FEASIBLE_KEY, w))
                    .collect()
            });
            if pool.is_empty() {
                return Err(CfError::NoNegativeAvailable(store.entity_at(p.env).id.clone()));
            }
            let mut r = rng::stream(seed, &[p.env as u64, p.wf as u64]);
            Ok(CfPair {
                env: p.env,
                wf: pool[r.gen_range(0..pool.len())],
            })
        })
        .collect()
}
