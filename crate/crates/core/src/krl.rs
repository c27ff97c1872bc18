//! TransD scoring, BPR training over store triples and assembly of the
//! multi-channel feature blocks.

use std::collections::HashMap;

use autograd::{Graph, ParamId, ParamStore, Tensor, TensorError, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng;
use crate::store::{
    CwkgStore, EntityKind, IndexedTriple, RelationDef, RelationKind, Side, StoreError, Subgraph, Triple, FEASIBLE,
    FEASIBLE_KEY,
};

pub const DEFAULT_N_EMB: usize = 16;

/// Random draws tried before falling back to enumerating every corruption.
const REJECTION_TRIES: usize = 16;

#[derive(Debug, Error)]
pub enum KrlError {
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("unknown relation {0}")]
    UnknownRelation(String),
    #[error("every corruption of {0} is a true triple")]
    ExhaustedCandidates(String),
    #[error("empty text label")]
    EmptyLabel,
    #[error("relation {0} is not numeric")]
    NonNumericRelation(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Orientation of the pairwise ranking loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BprSign {
    /// `-ln σ(f_neg - f_pos)`: lower distance for true triples.
    Consistent,
    /// `-ln σ(f_pos - f_neg)`: the reversed argument order.
    Paper,
}

impl BprSign {
    pub fn as_str(self) -> &'static str {
        match self {
            BprSign::Consistent => "consistent",
            BprSign::Paper => "paper",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "consistent" => Some(BprSign::Consistent),
            "paper" => Some(BprSign::Paper),
            _ => None,
        }
    }
}

fn check_lens(what: &str, n: usize, vs: &[&[f64]]) -> Result<(), KrlError> {
    if vs.iter().any(|v| v.len() != n) {
        return Err(KrlError::ShapeMismatch(format!(
            "{}: lengths {:?}",
            what,
            vs.iter().map(|v| v.len()).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(r_p e_pᵀ + I) e`, evaluated as `e + r_p (e_p · e)`.
pub fn transd_project(e: &[f64], e_p: &[f64], r_p: &[f64]) -> Result<Vec<f64>, KrlError> {
    check_lens("transd_project", e.len(), &[e_p, r_p])?;
    let s = dot(e_p, e);
    Ok(e.iter().zip(r_p).map(|(x, rp)| x + rp * s).collect())
}

/// `‖h⊥ + r − t⊥‖²`; lower means more plausible.
pub fn transd_distance(h: &[f64], h_p: &[f64], r: &[f64], r_p: &[f64], t: &[f64], t_p: &[f64]) -> Result<f64, KrlError> {
    check_lens("transd_distance", h.len(), &[h_p, r, r_p, t, t_p])?;
    let hp = transd_project(h, h_p, r_p)?;
    let tp = transd_project(t, t_p, r_p)?;
    Ok(hp.iter().zip(r).zip(&tp).map(|((a, b), c)| (a + b - c).powi(2)).sum())
}

/// Reference `L1` over precomputed `f_neg - f_pos` margins.
pub fn bpr_from_margins(margins: &[f64], sign: BprSign) -> f64 {
    let s = match sign {
        BprSign::Consistent => 1.0,
        BprSign::Paper => -1.0,
    };
    let log_sig = |x: f64| if x >= 0.0 { -(-x).exp().ln_1p() } else { x - x.exp().ln_1p() };
    -margins.iter().map(|&m| log_sig(s * m)).sum::<f64>() / margins.len() as f64
}

/// A true triple with one head-corrupted and one tail-corrupted copy.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativePair {
    pub positive: Triple,
    pub neg_head: Triple,
    pub neg_tail: Triple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexedNegatives {
    pub positive: IndexedTriple,
    pub neg_head: IndexedTriple,
    pub neg_tail: IndexedTriple,
}

/// Draws corruptions among entities of the replaced entity's kind.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    by_kind: HashMap<EntityKind, Vec<usize>>,
}

impl NegativeSampler {
    pub fn new(store: &CwkgStore) -> Self {
        let mut by_kind: HashMap<EntityKind, Vec<usize>> = HashMap::new();
        for (i, e) in store.entities().iter().enumerate() {
            by_kind.entry(e.kind).or_default().push(i);
        }
        Self { by_kind }
    }

    fn corrupt(
        &self,
        store: &CwkgStore,
        t: IndexedTriple,
        replace_head: bool,
        rng: &mut ChaCha8Rng,
    ) -> Option<IndexedTriple> {
        let slot = if replace_head { t.head } else { t.tail };
        let pool = &self.by_kind[&store.entity_at(slot).kind];
        let make = |c: usize| {
            if replace_head {
                IndexedTriple { head: c, ..t }
            } else {
                IndexedTriple { tail: c, ..t }
            }
        };
        let valid = |c: &IndexedTriple| !store.contains(c.head, c.relation, c.tail);
        for _ in 0..REJECTION_TRIES {
            let c = make(pool[rng.gen_range(0..pool.len())]);
            if valid(&c) {
                return Some(c);
            }
        }
        let all: Vec<IndexedTriple> = pool.iter().map(|&c| make(c)).filter(valid).collect();
        if all.is_empty() {
            None
        } else {
            Some(all[rng.gen_range(0..all.len())])
        }
    }

    /// Whether both the head and the tail of `t` admit a false corruption.
    pub fn has_corruptions(&self, store: &CwkgStore, t: IndexedTriple) -> bool {
        let pool = |slot: usize| &self.by_kind[&store.entity_at(slot).kind];
        pool(t.head).iter().any(|&c| !store.contains(c, t.relation, t.tail))
            && pool(t.tail).iter().any(|&c| !store.contains(t.head, t.relation, c))
    }

    /// Deterministic per `(triple, seed)`.
    pub fn sample(&self, store: &CwkgStore, t: IndexedTriple, seed: u64) -> Result<IndexedNegatives, KrlError> {
        let mut r = rng::stream(seed, &[t.head as u64, t.relation as u64, t.tail as u64]);
        let exhausted = || {
            KrlError::ExhaustedCandidates(format!(
                "({}, {}, {})",
                store.entity_at(t.head).id,
                relation_name(store, t.relation),
                store.entity_at(t.tail).id
            ))
        };
        let neg_head = self.corrupt(store, t, true, &mut r).ok_or_else(exhausted)?;
        let neg_tail = self.corrupt(store, t, false, &mut r).ok_or_else(exhausted)?;
        Ok(IndexedNegatives {
            positive: t,
            neg_head,
            neg_tail,
        })
    }
}

fn relation_name(store: &CwkgStore, key: usize) -> &str {
    if key == FEASIBLE_KEY {
        FEASIBLE
    } else {
        &store.schema()[key].name
    }
}

pub fn resolve(store: &CwkgStore, t: &Triple) -> Result<IndexedTriple, KrlError> {
    Ok(IndexedTriple {
        head: store.entity_idx(&t.head).ok_or_else(|| KrlError::UnknownEntity(t.head.clone()))?,
        relation: store
            .relation_key(&t.relation)
            .ok_or_else(|| KrlError::UnknownRelation(t.relation.clone()))?,
        tail: store.entity_idx(&t.tail).ok_or_else(|| KrlError::UnknownEntity(t.tail.clone()))?,
    })
}

fn unresolve(store: &CwkgStore, t: IndexedTriple, sub: Subgraph) -> Triple {
    Triple::new(
        &store.entity_at(t.head).id,
        relation_name(store, t.relation),
        &store.entity_at(t.tail).id,
        sub,
    )
}

pub fn sample_negatives(triple: &Triple, store: &CwkgStore, seed: u64) -> Result<NegativePair, KrlError> {
    let t = resolve(store, triple)?;
    let n = NegativeSampler::new(store).sample(store, t, seed)?;
    Ok(NegativePair {
        positive: triple.clone(),
        neg_head: unresolve(store, n.neg_head, triple.subgraph),
        neg_tail: unresolve(store, n.neg_tail, triple.subgraph),
    })
}

/// Fixed unit-norm vectors for text labels.
pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, label: &str) -> Result<Vec<f64>, KrlError>;
}

/// Gaussian vector seeded by the SHA-256 digest of the label, normalized.
#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, label: &str) -> Result<Vec<f64>, KrlError> {
        if label.is_empty() {
            return Err(KrlError::EmptyLabel);
        }
        let digest: [u8; 32] = Sha256::digest(label.as_bytes()).into();
        let mut r = ChaCha8Rng::from_seed(digest);
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let norm = dot(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

/// `(value - min) / (max - min)`, clamping out-of-range values to `[0, 1]`.
pub fn normalize_numeric(value: f64, def: &RelationDef) -> Result<f64, KrlError> {
    let (lo, hi) = match (def.kind, def.value_range) {
        (RelationKind::Numeric, Some(r)) => r,
        _ => return Err(KrlError::NonNumericRelation(def.name.clone())),
    };
    let v = (value - lo) / (hi - lo);
    if !(0.0..=1.0).contains(&v) {
        log::warn!("{} = {} outside [{}, {}], clamped", def.name, value, lo, hi);
    }
    Ok(v.clamp(0.0, 1.0))
}

pub fn numeric_embed(value: f64, def: &RelationDef, direction: &[f64]) -> Result<Vec<f64>, KrlError> {
    let v = normalize_numeric(value, def)?;
    Ok(direction.iter().map(|d| v * d).collect())
}

/// Value of one filled feature row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSlot {
    /// Schema index of the relation.
    pub relation: usize,
    /// Registered tail entity, if any; transient queries may have none.
    pub tail_entity: Option<usize>,
    pub label: String,
    pub numeric: Option<f64>,
}

/// Feature rows of one head in schema order; `None` marks a missing row.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadFeatures {
    pub side: Side,
    pub rows: Vec<Option<FeatureSlot>>,
}

pub fn head_features(store: &CwkgStore, head: usize) -> Result<HeadFeatures, KrlError> {
    let (side, tails) = store.feature_tails(head)?;
    let rels = store.side_schema(side);
    let rows = rels
        .iter()
        .zip(tails)
        .map(|(def, tail)| {
            tail.map(|t| {
                let e = store.entity_at(t);
                FeatureSlot {
                    relation: store.relation_key(&def.name).expect("schema relation"),
                    tail_entity: Some(t),
                    label: e.text_label.clone(),
                    numeric: e.numeric_value,
                }
            })
        })
        .collect();
    Ok(HeadFeatures { side, rows })
}

pub fn channels(side: Side) -> usize {
    match side {
        Side::Waveform => 3,
        Side::Environment => 2,
    }
}

/// Constant inputs of a block, flattened over `heads × rows`.
#[derive(Debug, Clone, Default)]
pub struct BlockInputs {
    pub heads: usize,
    pub rows: usize,
    pub dir_rows: Vec<usize>,
    pub numeric_scale: Vec<f64>,
    pub tail_rows: Vec<usize>,
    pub tail_mask: Vec<f64>,
    pub text: Vec<f64>,
    pub missing: Vec<bool>,
}

impl BlockInputs {
    pub fn extend(&mut self, other: &BlockInputs) {
        debug_assert!(self.heads == 0 || self.rows == other.rows);
        self.rows = other.rows;
        self.heads += other.heads;
        self.dir_rows.extend_from_slice(&other.dir_rows);
        self.numeric_scale.extend_from_slice(&other.numeric_scale);
        self.tail_rows.extend_from_slice(&other.tail_rows);
        self.tail_mask.extend_from_slice(&other.tail_mask);
        self.text.extend_from_slice(&other.text);
        self.missing.extend_from_slice(&other.missing);
    }

    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a BlockInputs>) -> BlockInputs {
        let mut out = BlockInputs::default();
        for p in parts {
            out.extend(p);
        }
        out
    }
}

/// Whether the TransD channel reads the entity table as trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingAccess {
    Trainable,
    Frozen,
}

/// A `(rows, n_emb, channels)` block with its missing-row mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBlock {
    pub side: Side,
    pub data: Tensor,
    pub missing_mask: Vec<bool>,
}

impl EmbeddingBlock {
    pub fn rows(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn emb_dim(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }
}

/// TransD and numeric-direction tables.
#[derive(Debug, Clone)]
pub struct KrlParams {
    pub n_emb: usize,
    pub entity_e: ParamId,
    pub entity_p: ParamId,
    pub relation_e: ParamId,
    pub relation_p: ParamId,
    pub numeric_dir: ParamId,
    /// Schema index of each numeric relation → row of `numeric_dir`.
    numeric_rows: HashMap<usize, usize>,
    n_relations: usize,
}

fn uniform(rows: usize, cols: usize, bound: f64, r: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| r.gen_range(-bound..=bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

impl KrlParams {
    /// Entity and relation vectors uniform in `±0.5/√n_emb`; entity
    /// projections zero, so every projection starts as the identity;
    /// relation projections small random so the projection gradients are
    /// not identically zero; numeric directions random unit vectors.
    pub fn init(store: &CwkgStore, n_emb: usize, params: &mut ParamStore, seed: u64) -> Result<Self, KrlError> {
        let mut r = rng::stream(seed, &[0x4B52_4C]);
        let bound = 0.5 / (n_emb as f64).sqrt();
        let n_ent = store.entities().len();
        let n_rel = store.schema().len();
        let entity_e = params.insert("krl/entity_e", uniform(n_ent, n_emb, bound, &mut r))?;
        let entity_p = params.insert("krl/entity_p", Tensor::zeros(&[n_ent, n_emb]))?;
        let relation_e = params.insert("krl/relation_e", uniform(n_rel + 1, n_emb, bound, &mut r))?;
        let relation_p = params.insert("krl/relation_p", uniform(n_rel + 1, n_emb, bound, &mut r))?;

        let numeric: Vec<usize> = (0..n_rel)
            .filter(|&i| store.schema()[i].kind == RelationKind::Numeric)
            .collect();
        let mut dirs = Vec::with_capacity(numeric.len().max(1) * n_emb);
        for _ in 0..numeric.len().max(1) {
            let v: Vec<f64> = (0..n_emb).map(|_| StandardNormal.sample(&mut r)).collect();
            let n = dot(&v, &v).sqrt();
            dirs.extend(v.iter().map(|x| x / n));
        }
        let numeric_dir = params.insert(
            "krl/numeric_dir",
            Tensor::new(vec![numeric.len().max(1), n_emb], dirs)?,
        )?;
        Ok(Self {
            n_emb,
            entity_e,
            entity_p,
            relation_e,
            relation_p,
            numeric_dir,
            numeric_rows: numeric.iter().enumerate().map(|(row, &rel)| (rel, row)).collect(),
            n_relations: n_rel,
        })
    }

    /// Tables updated by the ranking loss.
    pub fn transd_ids(&self) -> Vec<ParamId> {
        vec![self.entity_e, self.entity_p, self.relation_e, self.relation_p]
    }

    pub fn relation_row(&self, key: usize) -> usize {
        if key == FEASIBLE_KEY {
            self.n_relations
        } else {
            key
        }
    }

    pub fn numeric_row(&self, relation: usize) -> Option<usize> {
        self.numeric_rows.get(&relation).copied()
    }

    /// Distances of a batch of triples, shape `(B,)`.
    pub fn score_batch(&self, g: &mut Graph, ps: &ParamStore, triples: &[IndexedTriple]) -> Result<Var, KrlError> {
        let heads: Vec<usize> = triples.iter().map(|t| t.head).collect();
        let tails: Vec<usize> = triples.iter().map(|t| t.tail).collect();
        let rels: Vec<usize> = triples.iter().map(|t| self.relation_row(t.relation)).collect();
        let ee = g.param(ps, self.entity_e);
        let ep = g.param(ps, self.entity_p);
        let re = g.param(ps, self.relation_e);
        let rp = g.param(ps, self.relation_p);

        let r = g.gather_rows(re, &rels)?;
        let r_p = g.gather_rows(rp, &rels)?;
        let project = |g: &mut Graph, idx: &[usize]| -> Result<Var, KrlError> {
            let e = g.gather_rows(ee, idx)?;
            let e_p = g.gather_rows(ep, idx)?;
            let s = g.row_dot(e_p, e)?;
            let shift = g.mul_rows(r_p, s)?;
            Ok(g.add(e, shift)?)
        };
        let h = project(g, &heads)?;
        let t = project(g, &tails)?;
        let d = g.add(h, r)?;
        let d = g.sub(d, t)?;
        Ok(g.sum_sq_rows(d)?)
    }

    /// Mean ranking loss over both corruptions of every positive.
    pub fn bpr_loss(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        batch: &[IndexedNegatives],
        sign: BprSign,
    ) -> Result<Var, KrlError> {
        let b = batch.len();
        if b == 0 {
            return Err(KrlError::ShapeMismatch("empty ranking batch".into()));
        }
        let mut triples = Vec::with_capacity(3 * b);
        triples.extend(batch.iter().map(|n| n.positive));
        triples.extend(batch.iter().map(|n| n.neg_head));
        triples.extend(batch.iter().map(|n| n.neg_tail));
        let f = self.score_batch(g, ps, &triples)?;
        let pos_idx: Vec<usize> = (0..b).chain(0..b).collect();
        let neg_idx: Vec<usize> = (b..3 * b).collect();
        let pos = g.gather_elems(f, &pos_idx)?;
        let neg = g.gather_elems(f, &neg_idx)?;
        let margin = match sign {
            BprSign::Consistent => g.sub(neg, pos)?,
            BprSign::Paper => g.sub(pos, neg)?,
        };
        let ls = g.log_sigmoid(margin)?;
        let m = g.mean(ls)?;
        Ok(g.scale(m, -1.0)?)
    }

    /// Distance of one triple from current parameter values.
    pub fn score(&self, ps: &ParamStore, t: IndexedTriple) -> f64 {
        let d = self.n_emb;
        let row = |id: ParamId, i: usize| &ps.value(id).data()[i * d..(i + 1) * d];
        let rr = self.relation_row(t.relation);
        transd_distance(
            row(self.entity_e, t.head),
            row(self.entity_p, t.head),
            row(self.relation_e, rr),
            row(self.relation_p, rr),
            row(self.entity_e, t.tail),
            row(self.entity_p, t.tail),
        )
        .expect("table rows share n_emb")
    }

    /// Constant block inputs of one head.
    pub fn block_inputs(
        &self,
        store: &CwkgStore,
        features: &HeadFeatures,
        text: &dyn TextEmbedder,
    ) -> Result<BlockInputs, KrlError> {
        let d = self.n_emb;
        if text.dim() != d {
            return Err(KrlError::ShapeMismatch(format!("text dim {} vs n_emb {}", text.dim(), d)));
        }
        let n = features.rows.len();
        let mut out = BlockInputs {
            heads: 1,
            rows: n,
            dir_rows: vec![0; n],
            numeric_scale: vec![0.0; n],
            tail_rows: vec![0; n],
            tail_mask: vec![0.0; n],
            text: vec![0.0; n * d],
            missing: vec![true; n],
        };
        for (i, slot) in features.rows.iter().enumerate() {
            let Some(slot) = slot else { continue };
            out.missing[i] = false;
            let def = &store.schema()[slot.relation];
            if let (Some(row), Some(v)) = (self.numeric_row(slot.relation), slot.numeric) {
                out.dir_rows[i] = row;
                out.numeric_scale[i] = normalize_numeric(v, def)?;
            }
            if let Some(t) = slot.tail_entity {
                out.tail_rows[i] = t;
                out.tail_mask[i] = 1.0;
            }
            out.text[i * d..(i + 1) * d].copy_from_slice(&text.embed(&slot.label)?);
        }
        if features.side == Side::Waveform && out.missing.iter().zip(&out.tail_mask).any(|(m, k)| !m && *k == 0.0) {
            return Err(KrlError::UnknownEntity("waveform feature without a registered tail".into()));
        }
        Ok(out)
    }

    /// Stacks the channels of a batch into `(heads·rows, n_emb, channels)`.
    pub fn assemble(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        inputs: &BlockInputs,
        side: Side,
        access: EmbeddingAccess,
    ) -> Result<Var, KrlError> {
        let d = self.n_emb;
        let p = inputs.heads * inputs.rows;
        let dirs = g.param(ps, self.numeric_dir);
        let dirs = g.gather_rows(dirs, &inputs.dir_rows)?;
        let scale = g.constant(Tensor::vector(inputs.numeric_scale.clone()))?;
        let numeric = g.mul_rows(dirs, scale)?;
        let text = g.constant(Tensor::new(vec![p, d], inputs.text.clone())?)?;
        let mut chans = vec![numeric];
        if side == Side::Waveform {
            let table = match access {
                EmbeddingAccess::Trainable => g.param(ps, self.entity_e),
                EmbeddingAccess::Frozen => g.frozen(ps, self.entity_e),
            };
            let tails = g.gather_rows(table, &inputs.tail_rows)?;
            let mask = g.constant(Tensor::vector(inputs.tail_mask.clone()))?;
            chans.push(g.mul_rows(tails, mask)?);
        }
        chans.push(text);
        let chans = chans
            .into_iter()
            .map(|c| g.reshape(c, &[p, d, 1]))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(g.concat(&chans, 2)?)
    }

    /// Block of a single registered head, from current parameter values.
    pub fn assemble_block(
        &self,
        store: &CwkgStore,
        ps: &ParamStore,
        head: &str,
        text: &dyn TextEmbedder,
    ) -> Result<EmbeddingBlock, KrlError> {
        let idx = store.entity_idx(head).ok_or_else(|| KrlError::UnknownEntity(head.to_string()))?;
        let features = head_features(store, idx)?;
        self.block_from_features(store, ps, &features, text)
    }

    pub fn block_from_features(
        &self,
        store: &CwkgStore,
        ps: &ParamStore,
        features: &HeadFeatures,
        text: &dyn TextEmbedder,
    ) -> Result<EmbeddingBlock, KrlError> {
        let inputs = self.block_inputs(store, features, text)?;
        let mut g = Graph::new();
        let v = self.assemble(&mut g, ps, &inputs, features.side, EmbeddingAccess::Frozen)?;
        Ok(EmbeddingBlock {
            side: features.side,
            data: g.value(v).clone(),
            missing_mask: inputs.missing,
        })
    }

    /// Checkpoint entries under per-entity and per-relation names.
    pub fn named_entries(&self, store: &CwkgStore, ps: &ParamStore) -> Vec<(String, Tensor)> {
        let d = self.n_emb;
        let row = |id: ParamId, i: usize| Tensor::vector(ps.value(id).data()[i * d..(i + 1) * d].to_vec());
        let mut out = Vec::new();
        for (i, e) in store.entities().iter().enumerate() {
            out.push((format!("entity/{}/e", e.id), row(self.entity_e, i)));
            out.push((format!("entity/{}/p", e.id), row(self.entity_p, i)));
        }
        let names = store.schema().iter().map(|r| r.name.as_str()).chain(std::iter::once(FEASIBLE));
        for (i, name) in names.enumerate() {
            out.push((format!("relation/{}/e", name), row(self.relation_e, i)));
            out.push((format!("relation/{}/p", name), row(self.relation_p, i)));
        }
        let mut numeric: Vec<(usize, usize)> = self.numeric_rows.iter().map(|(&k, &v)| (k, v)).collect();
        numeric.sort_unstable();
        for (rel, r) in numeric {
            out.push((format!("numeric_dir/{}", store.schema()[rel].name), row(self.numeric_dir, r)));
        }
        out
    }

    /// Inverse of [`named_entries`](Self::named_entries).
    pub fn load_entries(
        &self,
        store: &CwkgStore,
        ps: &mut ParamStore,
        entries: &HashMap<String, Tensor>,
    ) -> Result<(), KrlError> {
        let d = self.n_emb;
        let mut put = |id: ParamId, i: usize, name: String| -> Result<(), KrlError> {
            let t = entries
                .get(&name)
                .ok_or_else(|| KrlError::ShapeMismatch(format!("checkpoint lacks {}", name)))?;
            if t.len() != d {
                return Err(KrlError::ShapeMismatch(format!("{} has {} values", name, t.len())));
            }
            ps.value_mut(id).data_mut()[i * d..(i + 1) * d].copy_from_slice(t.data());
            Ok(())
        };
        for (i, e) in store.entities().iter().enumerate() {
            put(self.entity_e, i, format!("entity/{}/e", e.id))?;
            put(self.entity_p, i, format!("entity/{}/p", e.id))?;
        }
        let names: Vec<String> = store
            .schema()
            .iter()
            .map(|r| r.name.clone())
            .chain(std::iter::once(FEASIBLE.to_string()))
            .collect();
        for (i, name) in names.iter().enumerate() {
            put(self.relation_e, i, format!("relation/{}/e", name))?;
            put(self.relation_p, i, format!("relation/{}/p", name))?;
        }
        let numeric: Vec<(usize, usize)> = self.numeric_rows.iter().map(|(&k, &v)| (k, v)).collect();
        for (rel, r) in numeric {
            put(self.numeric_dir, r, format!("numeric_dir/{}", store.schema()[rel].name))?;
        }
        Ok(())
    }
}

/// Fraction of `(positive, corruption)` pairs with the positive closer.
pub fn ordered_fraction(krl: &KrlParams, ps: &ParamStore, negatives: &[IndexedNegatives]) -> f64 {
    let mut good = 0usize;
    for n in negatives {
        let fp = krl.score(ps, n.positive);
        good += usize::from(fp < krl.score(ps, n.neg_head));
        good += usize::from(fp < krl.score(ps, n.neg_tail));
    }
    good as f64 / (2 * negatives.len()).max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{Entity, RelationDef};
    use autograd::grad_check;

    fn toy() -> CwkgStore {
        let mut s = CwkgStore::new(vec![
            RelationDef::categorical("modulation", Side::Waveform, 0),
            RelationDef::numeric("coding_rate", Side::Waveform, 1, (0.0, 1.0), None),
            RelationDef::numeric("jsr_db", Side::Environment, 0, (0.0, 40.0), Some("dB")),
        ])
        .unwrap();
        for w in ["W1", "W2"] {
            s.add_entity(Entity::head(w, EntityKind::WaveformHead, w)).unwrap();
        }
        for e in ["E1", "E2"] {
            s.add_entity(Entity::head(e, EntityKind::EnvironmentHead, e)).unwrap();
        }
        for m in ["BPSK", "QPSK", "MSK"] {
            s.add_entity(Entity::tail(m, m, None)).unwrap();
        }
        s.add_entity(Entity::tail("r13", "1/3", Some(1.0 / 3.0))).unwrap();
        s.add_entity(Entity::tail("jsr30", "30dB", Some(30.0))).unwrap();
        s.add_triple(Triple::new("W1", "modulation", "QPSK", Subgraph::Wkg)).unwrap();
        s.add_triple(Triple::new("W1", "coding_rate", "r13", Subgraph::Wkg)).unwrap();
        s.add_triple(Triple::new("W2", "modulation", "BPSK", Subgraph::Wkg)).unwrap();
        s.add_triple(Triple::new("E1", "jsr_db", "jsr30", Subgraph::Ekg)).unwrap();
        s.add_triple(Triple::feasible("E1", "W1")).unwrap();
        s
    }

    #[test]
    fn projection_hand_cases() {
        assert_eq!(transd_project(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]).unwrap(), [1.0, 1.0]);
        assert_eq!(transd_project(&[0.3, -2.0], &[0.0, 0.0], &[5.0, 1.0]).unwrap(), [0.3, -2.0]);
        assert_eq!(transd_project(&[0.3, -2.0], &[4.0, 1.0], &[0.0, 0.0]).unwrap(), [0.3, -2.0]);
        assert!(transd_project(&[1.0], &[1.0, 0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn distance_hand_cases() {
        let z = [0.0, 0.0];
        assert_eq!(transd_distance(&[0.4, 0.1], &z, &z, &z, &[0.4, 0.1], &z).unwrap(), 0.0);
        assert_eq!(transd_distance(&[1.0, 0.0], &z, &z, &z, &[0.0, 1.0], &z).unwrap(), 2.0);
        let f = transd_distance(&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &z).unwrap();
        assert_eq!(f, 1.0);
    }

    #[test]
    fn bpr_reference_values() {
        assert!((bpr_from_margins(&[0.0, 0.0], BprSign::Consistent) - 2f64.ln()).abs() < 1e-15);
        assert!(bpr_from_margins(&[800.0], BprSign::Consistent) < 1e-300);
        assert!(bpr_from_margins(&[800.0], BprSign::Paper) > 700.0);
    }

    #[test]
    fn negatives_avoid_true_triples() {
        let s = toy();
        let t = Triple::new("W1", "modulation", "QPSK", Subgraph::Wkg);
        for seed in 0..50 {
            let n = sample_negatives(&t, &s, seed).unwrap();
            assert!(["BPSK", "MSK", "r13", "jsr30"].contains(&n.neg_tail.tail.as_str()));
            assert_eq!(n.neg_head.head, "W2");
            assert!(!s.contains_triple(&n.neg_head) && !s.contains_triple(&n.neg_tail));
        }
        assert_eq!(sample_negatives(&t, &s, 9).unwrap(), sample_negatives(&t, &s, 9).unwrap());
    }

    #[test]
    fn exhausted_when_every_corruption_is_true() {
        let mut s = toy();
        // E1 is feasible with both waveforms, so no tail corruption exists
        s.add_triple(Triple::feasible("E1", "W2")).unwrap();
        let err = sample_negatives(&Triple::feasible("E1", "W1"), &s, 0).unwrap_err();
        assert!(matches!(err, KrlError::ExhaustedCandidates(_)));
    }

    #[test]
    fn text_embedding_contract() {
        let e = HashEmbedder { dim: 16 };
        let a = e.embed("Turbo").unwrap();
        assert_eq!(a, e.embed("Turbo").unwrap());
        assert!((dot(&a, &a) - 1.0).abs() < 1e-12);
        let b = e.embed("LDPC").unwrap();
        assert!(dot(&a, &b) < 1.0 - 1e-6);
        assert!(matches!(e.embed(""), Err(KrlError::EmptyLabel)));
    }

    #[test]
    fn numeric_embedding_is_linear_in_the_normalized_value() {
        let def = RelationDef::numeric("jsr_db", Side::Environment, 0, (0.0, 40.0), None);
        let d = [0.6, -0.8];
        assert_eq!(numeric_embed(0.0, &def, &d).unwrap(), [0.0, 0.0]);
        assert_eq!(numeric_embed(40.0, &def, &d).unwrap(), d);
        assert_eq!(numeric_embed(20.0, &def, &d).unwrap(), [0.3, -0.4]);
        assert_eq!(numeric_embed(55.0, &def, &d).unwrap(), d, "clamped");
        let cat = RelationDef::categorical("m", Side::Waveform, 0);
        assert!(matches!(numeric_embed(1.0, &cat, &d), Err(KrlError::NonNumericRelation(_))));
    }

    #[test]
    fn block_shapes_and_missing_rows() {
        let s = toy();
        let mut ps = ParamStore::new();
        let k = KrlParams::init(&s, 4, &mut ps, 1).unwrap();
        let text = HashEmbedder { dim: 4 };
        let w1 = k.assemble_block(&s, &ps, "W1", &text).unwrap();
        assert_eq!(w1.data.shape(), &[2, 4, 3]);
        assert_eq!(w1.missing_mask, [false, false]);
        let w2 = k.assemble_block(&s, &ps, "W2", &text).unwrap();
        assert_eq!(w2.data.shape(), &[2, 4, 3]);
        assert_eq!(w2.missing_mask, [false, true]);
        assert!(w2.data.data()[12..].iter().all(|&v| v == 0.0));
        // categorical row has a zero numeric channel, non-zero TransD and text channels
        let row0 = &w2.data.data()[..12];
        assert!((0..4).all(|j| row0[j * 3] == 0.0));
        assert!((0..4).any(|j| row0[j * 3 + 1] != 0.0) && (0..4).any(|j| row0[j * 3 + 2] != 0.0));
        let e1 = k.assemble_block(&s, &ps, "E1", &text).unwrap();
        assert_eq!(e1.data.shape(), &[1, 4, 2]);
        let dir = &ps.value(k.numeric_dir).data()[k.numeric_row(2).unwrap() * 4..][..4];
        for j in 0..4 {
            assert!((e1.data.data()[j * 2] - 0.75 * dir[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn unseen_environment_tail_needs_no_entity() {
        let s = toy();
        let mut ps = ParamStore::new();
        let k = KrlParams::init(&s, 4, &mut ps, 1).unwrap();
        let features = HeadFeatures {
            side: Side::Environment,
            rows: vec![Some(FeatureSlot {
                relation: 2,
                tail_entity: None,
                label: "33dB".into(),
                numeric: Some(33.0),
            })],
        };
        let b = k.block_from_features(&s, &ps, &features, &HashEmbedder { dim: 4 }).unwrap();
        assert_eq!(b.data.shape(), &[1, 4, 2]);
    }

    #[test]
    fn batched_scores_match_vector_form() {
        let s = toy();
        let mut ps = ParamStore::new();
        let k = KrlParams::init(&s, 6, &mut ps, 2).unwrap();
        // give projections non-trivial values
        for (i, v) in ps.value_mut(k.entity_p).data_mut().iter_mut().enumerate() {
            *v = ((i * 7919) % 13) as f64 / 13.0 - 0.5;
        }
        let triples = s.indexed_triples().to_vec();
        let mut g = Graph::new();
        let f = k.score_batch(&mut g, &ps, &triples).unwrap();
        for (i, t) in triples.iter().enumerate() {
            assert!((g.value(f).data()[i] - k.score(&ps, *t)).abs() < 1e-14);
        }
    }

    #[test]
    fn ranking_loss_gradients() {
        let s = toy();
        let mut ps = ParamStore::new();
        let k = KrlParams::init(&s, 5, &mut ps, 3).unwrap();
        for (i, v) in ps.value_mut(k.entity_p).data_mut().iter_mut().enumerate() {
            *v = ((i * 31) % 11) as f64 / 11.0 - 0.5;
        }
        let sampler = NegativeSampler::new(&s);
        let batch: Vec<IndexedNegatives> = s
            .indexed_triples()
            .iter()
            .map(|&t| sampler.sample(&s, t, 4).unwrap())
            .collect();
        for sign in [BprSign::Consistent, BprSign::Paper] {
            let report = grad_check(
                |g, ps| k.bpr_loss(g, ps, &batch, sign).map_err(|e| match e {
                    KrlError::Tensor(t) => t,
                    other => panic!("{}", other),
                }),
                &ps,
                &k.transd_ids(),
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "{:?}", report.worst);
        }
    }

    #[test]
    fn checkpoint_names_round_trip() {
        let s = toy();
        let mut ps = ParamStore::new();
        let k = KrlParams::init(&s, 3, &mut ps, 5).unwrap();
        let entries: HashMap<String, Tensor> = k.named_entries(&s, &ps).into_iter().collect();
        assert!(entries.contains_key("entity/W1/e") && entries.contains_key("relation/feasible/p"));
        assert!(entries.contains_key("numeric_dir/jsr_db"));
        let mut other = ParamStore::new();
        let k2 = KrlParams::init(&s, 3, &mut other, 99).unwrap();
        k2.load_entries(&s, &mut other, &entries).unwrap();
        assert_eq!(other.value(k2.entity_e), ps.value(k.entity_e));
        assert_eq!(other.value(k2.numeric_dir), ps.value(k.numeric_dir));
    }
}
