//! Alternating optimization of the ranking and cross-entropy objectives,
//! Hit@k evaluation, the trailing-window protocol and recommendation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use autograd::{Adam, AdamConfig, Graph, TensorError};
use rand::seq::SliceRandom;

use crate::cf::{self, CfError, ScoreVector};
use crate::ere::{EreConfig, EreMode};
use crate::krl::{self, BprSign, EmbeddingAccess, FeatureSlot, HeadFeatures, NegativeSampler};
pub use crate::model::L2Loss;
use crate::model::{Model, ModelConfig};
use crate::rng;
use crate::store::{CwkgStore, EntityKind, IndexedTriple, Side, Triple, FEASIBLE_KEY};
use crate::synth;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub bpr_sign: BprSign,
    pub ere: EreConfig,
    pub n_emb: usize,
    pub seed: u64,
    pub freeze_embeddings_in_l2: bool,
    pub l2_loss: L2Loss,
    pub mlp_hidden: Vec<usize>,
    pub l1_batch: usize,
    pub l2_env_batch: usize,
    pub k_list: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.001,
            bpr_sign: BprSign::Consistent,
            ere: EreConfig::default(),
            n_emb: krl::DEFAULT_N_EMB,
            seed: 0,
            freeze_embeddings_in_l2: true,
            l2_loss: L2Loss::PairSigmoid,
            mlp_hidden: vec![64, 32],
            l1_batch: 512,
            l2_env_batch: 32,
            k_list: vec![1, 3, 5],
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_emb: self.n_emb,
            ere: self.ere,
            mlp_hidden: self.mlp_hidden.clone(),
            leaky_slope: self.ere.leaky_slope,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<(), CfError> {
        let bad = |m: &str| Err(CfError::InvalidValue(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.n_emb == 0 || self.l1_batch == 0 || self.l2_env_batch == 0 {
            return bad("n_emb and batch sizes must be positive");
        }
        if self.mlp_hidden.is_empty() || self.mlp_hidden.contains(&0) {
            return bad("MLP needs at least one positive hidden width");
        }
        if self.k_list.contains(&0) {
            return bad("k values must be positive");
        }
        self.ere.validate()?;
        Ok(())
    }

    /// `key=value` pairs in a fixed order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let e = &self.ere;
        [
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("bpr_sign", self.bpr_sign.as_str().to_string()),
            ("ere_mode", e.mode.name().to_string()),
            ("heads", e.mode.heads().unwrap_or(0).to_string()),
            ("k", e.k.to_string()),
            ("g", e.g.to_string()),
            ("hidden", e.hidden.map_or_else(|| "auto".to_string(), |h| h.to_string())),
            ("leaky_slope", e.leaky_slope.to_string()),
            ("scale_by_sqrt_d", e.scale_by_sqrt_d.to_string()),
            ("n_emb", self.n_emb.to_string()),
            ("seed", self.seed.to_string()),
            ("freeze_embeddings_in_l2", self.freeze_embeddings_in_l2.to_string()),
            ("l2_loss", self.l2_loss.as_str().to_string()),
            ("mlp_hidden", join(&self.mlp_hidden)),
            ("l1_batch", self.l1_batch.to_string()),
            ("l2_env_batch", self.l2_env_batch.to_string()),
            ("k_list", join(&self.k_list)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Inverse of [`to_kv`](Self::to_kv); unknown keys are ignored so a
    /// manifest may carry extra run metadata.
    pub fn from_kv(pairs: &HashMap<String, String>) -> Result<Self, CfError> {
        let get = |k: &str| {
            pairs
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| CfError::InvalidValue(format!("missing key {}", k)))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, CfError> {
            v.parse().map_err(|_| CfError::InvalidValue(format!("{}={}", k, v)))
        }
        fn list(k: &str, v: &str) -> Result<Vec<usize>, CfError> {
            v.split(',').map(|x| num(k, x)).collect()
        }
        let heads: usize = num("heads", get("heads")?)?;
        let mode = EreMode::parse(get("ere_mode")?, heads.max(1))?;
        let hidden = match get("hidden")? {
            "auto" => None,
            v => Some(num("hidden", v)?),
        };
        let cfg = Self {
            epochs: num("epochs", get("epochs")?)?,
            lr: num("lr", get("lr")?)?,
            bpr_sign: BprSign::parse(get("bpr_sign")?)
                .ok_or_else(|| CfError::InvalidValue(format!("bpr_sign={}", pairs["bpr_sign"])))?,
            ere: EreConfig {
                mode,
                k: num("k", get("k")?)?,
                g: num("g", get("g")?)?,
                hidden,
                leaky_slope: num("leaky_slope", get("leaky_slope")?)?,
                scale_by_sqrt_d: num("scale_by_sqrt_d", get("scale_by_sqrt_d")?)?,
            },
            n_emb: num("n_emb", get("n_emb")?)?,
            seed: num("seed", get("seed")?)?,
            freeze_embeddings_in_l2: num("freeze_embeddings_in_l2", get("freeze_embeddings_in_l2")?)?,
            l2_loss: L2Loss::parse(get("l2_loss")?)
                .ok_or_else(|| CfError::InvalidValue(format!("l2_loss={}", pairs["l2_loss"])))?,
            mlp_hidden: list("mlp_hidden", get("mlp_hidden")?)?,
            l1_batch: num("l1_batch", get("l1_batch")?)?,
            l2_env_batch: num("l2_env_batch", get("l2_env_batch")?)?,
            k_list: list("k_list", get("k_list")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Hit rates of one evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HitReport {
    pub n_all: usize,
    pub n_hit: usize,
    pub hit_at_1: f64,
    pub hit_at_k: BTreeMap<usize, f64>,
}

/// Result of the trailing-window averaging protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct TrailingHit {
    /// Epoch index (0-based) at which the moving average settled.
    pub converged_epoch: Option<usize>,
    pub epochs_averaged: usize,
    pub mean: f64,
    /// Whether the full averaging span was available.
    pub complete: bool,
}

pub const TRAILING_WINDOW: usize = 20;
pub const TRAILING_TOLERANCE: f64 = 0.002;
pub const TRAILING_SPAN: usize = 100;

/// Convergence is the first epoch whose `window`-epoch moving average
/// differs from the previous one by less than `tol`; the result averages
/// the next `span` epochs. Without convergence or a full span, as many
/// trailing epochs as exist (at most `span`) are averaged and the result is
/// marked incomplete.
pub fn trailing_protocol(curve: &[f64], window: usize, tol: f64, span: usize) -> TrailingHit {
    let ma = |t: usize| curve[t + 1 - window..=t].iter().sum::<f64>() / window as f64;
    let converged = (window..curve.len()).find(|&t| (ma(t) - ma(t - 1)).abs() < tol);
    let (start, complete) = match converged {
        Some(t) if curve.len() > t + span => (t + 1, true),
        Some(t) if t + 1 < curve.len() => (t + 1, false),
        _ => (curve.len().saturating_sub(span.min(curve.len())), false),
    };
    let end = (start + span).min(curve.len());
    let slice = &curve[start..end];
    TrailingHit {
        converged_epoch: converged,
        epochs_averaged: slice.len(),
        mean: if slice.is_empty() {
            0.0
        } else {
            slice.iter().sum::<f64>() / slice.len() as f64
        },
        complete,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub hit_at_1: f64,
    pub hit_at_k: BTreeMap<usize, f64>,
    pub l1_curve: Vec<f64>,
    pub l2_curve: Vec<f64>,
    /// Test Hit@1 after every epoch.
    pub hit_curve: Vec<f64>,
    pub trailing: Option<TrailingHit>,
    pub config: Vec<(String, String)>,
    pub seed: u64,
}

impl EvalReport {
    /// `key=value` metrics, one per line, free of timings.
    pub fn metrics_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "hit@1={:.6}", self.hit_at_1);
        for (k, v) in &self.hit_at_k {
            if *k != 1 {
                let _ = writeln!(out, "hit@{}={:.6}", k, v);
            }
        }
        if let Some(t) = &self.trailing {
            let _ = writeln!(out, "hit@1_trailing={:.6}", t.mean);
            let _ = writeln!(
                out,
                "converged_epoch={}",
                t.converged_epoch.map_or_else(|| "none".to_string(), |e| e.to_string())
            );
            let _ = writeln!(out, "epochs_averaged={}", t.epochs_averaged);
            let _ = writeln!(out, "protocol_complete={}", t.complete);
        }
        if let Some(l) = self.l1_curve.last() {
            let _ = writeln!(out, "l1_final={:.6}", l);
        }
        if let Some(l) = self.l2_curve.last() {
            let _ = writeln!(out, "l2_final={:.6}", l);
        }
        let _ = writeln!(out, "epochs={}", self.l1_curve.len());
        let _ = writeln!(out, "seed={}", self.seed);
        out
    }

    /// Human-readable report with the config echo and loss curves.
    pub fn text(&self) -> String {
        let mut out = String::from("[config]\n");
        for (k, v) in &self.config {
            let _ = writeln!(out, "{} = {}", k, v);
        }
        out.push_str("\n[metrics]\n");
        out.push_str(&self.metrics_text());
        out.push_str("\n[curves]\nepoch\tl1\tl2\thit@1\n");
        for i in 0..self.l1_curve.len() {
            let hit = self.hit_curve.get(i).map_or_else(|| "-".to_string(), |h| format!("{:.6}", h));
            let _ = writeln!(out, "{}\t{:.6}\t{:.6}\t{}", i, self.l1_curve[i], self.l2_curve[i], hit);
        }
        out
    }
}

/// Available waveforms per test environment, by store index.
pub fn availability(store: &CwkgStore, test: &[Triple]) -> Result<BTreeMap<usize, BTreeSet<usize>>, CfError> {
    let mut out: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for t in test {
        let h = store.entity_idx(&t.head).ok_or_else(|| CfError::UnknownEntity(t.head.clone()))?;
        let w = store.entity_idx(&t.tail).ok_or_else(|| CfError::UnknownEntity(t.tail.clone()))?;
        out.entry(h).or_default().insert(w);
    }
    Ok(out)
}

/// Hit rates from precomputed score rows; `available` holds score columns.
pub fn hits_from_scores(scores: &[Vec<f64>], available: &[BTreeSet<usize>], k_list: &[usize]) -> Result<HitReport, CfError> {
    if scores.is_empty() {
        return Err(CfError::EmptyTestSet);
    }
    let mut ks: BTreeSet<usize> = k_list.iter().copied().collect();
    ks.insert(1);
    let mut counts: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    for (s, avail) in scores.iter().zip(available) {
        let rank = cf::ranking(s);
        for (&k, c) in counts.iter_mut() {
            if rank.iter().take(k).any(|w| avail.contains(w)) {
                *c += 1;
            }
        }
    }
    let n_all = scores.len();
    let hit_at_k: BTreeMap<usize, f64> = counts.iter().map(|(&k, &c)| (k, c as f64 / n_all as f64)).collect();
    Ok(HitReport {
        n_all,
        n_hit: counts[&1],
        hit_at_1: hit_at_k[&1],
        hit_at_k,
    })
}

pub fn evaluate(model: &Model, test: &[Triple], store: &CwkgStore, k_list: &[usize]) -> Result<HitReport, CfError> {
    let avail = availability(store, test)?;
    if avail.is_empty() {
        return Err(CfError::EmptyTestSet);
    }
    let envs: Vec<usize> = avail.keys().copied().collect();
    let cols: Vec<BTreeSet<usize>> = avail
        .values()
        .map(|s| s.iter().filter_map(|&w| model.waveform_column(w)).collect())
        .collect();
    let scores = model.score_envs(&envs)?;
    hits_from_scores(&scores, &cols, k_list)
}

/// Copy of `store` without the held-out feasible edges.
pub fn training_store(store: &CwkgStore, test: &[Triple]) -> CwkgStore {
    let mut s = store.clone();
    for t in test {
        s.remove_triple(t);
    }
    s.rebuild_adjacency();
    s
}

fn diverged(e: TensorError, objective: &'static str, epoch: usize) -> CfError {
    match e {
        TensorError::NonFiniteGradient(_) | TensorError::NonFiniteValue(_) => CfError::DivergenceDetected {
            objective,
            epoch,
            value: f64::NAN,
        },
        other => other.into(),
    }
}

fn lift(e: CfError, objective: &'static str, epoch: usize) -> CfError {
    match e {
        CfError::Tensor(t) => diverged(t, objective, epoch),
        CfError::Krl(krl::KrlError::Tensor(t)) => diverged(t, objective, epoch),
        CfError::Ere(crate::ere::EreError::Tensor(t)) => diverged(t, objective, epoch),
        other => other,
    }
}

/// Feasible waveform indices of every environment with at least one edge.
pub fn positives_by_env(store: &CwkgStore) -> BTreeMap<usize, Vec<usize>> {
    let mut positives: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for t in store.indexed_triples() {
        if t.relation == FEASIBLE_KEY {
            positives.entry(t.head).or_default().push(t.tail);
        }
    }
    positives
}

pub struct TrainOutcome {
    pub model: Model,
    pub report: EvalReport,
}

/// Per-epoch progress passed to an observer.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub hit_at_1: Option<f64>,
}

/// Trains on `store` minus the `test` feasible edges and evaluates on the
/// test environments after every epoch (skipped when `test` is empty).
pub fn train(store: &CwkgStore, test: &[Triple], cfg: &TrainConfig) -> Result<TrainOutcome, CfError> {
    train_with(store, test, cfg, |_| {})
}

pub fn train_with(
    store: &CwkgStore,
    test: &[Triple],
    cfg: &TrainConfig,
    mut observe: impl FnMut(&EpochStats),
) -> Result<TrainOutcome, CfError> {
    cfg.validate()?;
    let train_store = training_store(store, test);
    let mut model = Model::new(&train_store, cfg.model_config())?;
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut adam1 = Adam::new(adam_cfg);
    let mut adam2 = Adam::new(adam_cfg);
    let l1_ids = model.krl.transd_ids();
    let l2_ids = model.l2_ids(!cfg.freeze_embeddings_in_l2);
    let access = if cfg.freeze_embeddings_in_l2 {
        EmbeddingAccess::Frozen
    } else {
        EmbeddingAccess::Trainable
    };

    // constant training structures
    let sampler = NegativeSampler::new(&train_store);
    // triples without a false corruption on both sides cannot be ranked
    let triples: Vec<IndexedTriple> = train_store
        .indexed_triples()
        .iter()
        .copied()
        .filter(|&t| sampler.has_corruptions(&train_store, t))
        .collect();
    let skipped = train_store.indexed_triples().len() - triples.len();
    if skipped > 0 {
        log::info!("{} triples have no false corruption and are left out of the ranking pass", skipped);
    }
    let m = model.m();
    let positives = positives_by_env(&train_store);
    // environments feasible with every waveform offer no negative
    let l2_envs: Vec<usize> = positives
        .iter()
        .filter(|(_, ws)| ws.len() < m)
        .map(|(&e, _)| e)
        .collect();
    let test_avail = availability(store, test)?;
    let test_envs: Vec<usize> = test_avail.keys().copied().collect();
    let test_cols: Vec<BTreeSet<usize>> = test_avail
        .values()
        .map(|s| s.iter().filter_map(|&w| model.waveform_column(w)).collect())
        .collect();
    let test_inputs: Vec<_> = test_envs
        .chunks(128)
        .map(|c| model.batch_inputs(c))
        .collect::<Result<_, _>>()?;

    let mut l1_curve = Vec::with_capacity(cfg.epochs);
    let mut l2_curve = Vec::with_capacity(cfg.epochs);
    let mut hit_curve = Vec::with_capacity(cfg.epochs);
    let mut last_hits: Option<HitReport> = None;
    // reference losses of the first batch of each objective
    let mut init: [Option<f64>; 2] = [None, None];
    let mut check = |slot: usize, objective: &'static str, epoch: usize, v: f64| -> Result<(), CfError> {
        let first = *init[slot].get_or_insert(v);
        if !v.is_finite() || v > 10.0 * first {
            return Err(CfError::DivergenceDetected {
                objective,
                epoch,
                value: v,
            });
        }
        Ok(())
    };

    for epoch in 0..cfg.epochs {
        let eseed = rng::mix(cfg.seed, &[0x45_50, epoch as u64]);

        // ranking pass over every training triple
        let mut order = triples.clone();
        order.shuffle(&mut rng::stream(eseed, &[1]));
        let mut l1_sum = 0.0;
        let mut l1_n = 0usize;
        for chunk in order.chunks(cfg.l1_batch) {
            let negs = chunk
                .iter()
                .map(|&t| sampler.sample(&train_store, t, eseed))
                .collect::<Result<Vec<_>, _>>()?;
            let mut g = Graph::new();
            let loss = model
                .krl
                .bpr_loss(&mut g, &model.params, &negs, cfg.bpr_sign)
                .map_err(|e| lift(e.into(), "L1", epoch))?;
            model.params.zero_grad();
            g.backward(loss, &mut model.params).map_err(|e| diverged(e, "L1", epoch))?;
            adam1.step(&mut model.params, &l1_ids).map_err(|e| diverged(e, "L1", epoch))?;
            let v = g.value(loss).item();
            check(0, "L1", epoch, v)?;
            l1_sum += v * chunk.len() as f64;
            l1_n += chunk.len();
        }

        // cross-entropy pass over training environments
        let mut envs = l2_envs.clone();
        envs.shuffle(&mut rng::stream(eseed, &[2]));
        let mut l2_sum = 0.0;
        let mut l2_n = 0usize;
        for batch in envs.chunks(cfg.l2_env_batch) {
            let l2b = model.l2_batch(&train_store, batch, &positives, cfg.l2_loss, eseed)?;
            let count = l2b.labels.len().max(l2b.positives.len());
            let mut g = Graph::new();
            let loss = model
                .l2_loss(&mut g, &model.params, &l2b, access)
                .map_err(|e| lift(e, "L2", epoch))?;
            model.params.zero_grad();
            g.backward(loss, &mut model.params).map_err(|e| diverged(e, "L2", epoch))?;
            adam2.step(&mut model.params, &l2_ids).map_err(|e| diverged(e, "L2", epoch))?;
            let loss_val = g.value(loss).item();
            check(1, "L2", epoch, loss_val)?;
            l2_sum += loss_val * count as f64;
            l2_n += count;
        }

        let l1 = l1_sum / l1_n.max(1) as f64;
        let l2 = l2_sum / l2_n.max(1) as f64;
        l1_curve.push(l1);
        l2_curve.push(l2);

        let mut hit = None;
        if !test_envs.is_empty() {
            let cache = model.waveform_cache()?;
            let mut scores = Vec::with_capacity(test_envs.len());
            for inputs in &test_inputs {
                scores.extend(model.score_inputs(inputs, &cache)?);
            }
            let h = hits_from_scores(&scores, &test_cols, &cfg.k_list)?;
            hit = Some(h.hit_at_1);
            hit_curve.push(h.hit_at_1);
            last_hits = Some(h);
        }
        let stats = EpochStats {
            epoch,
            l1,
            l2,
            hit_at_1: hit,
        };
        log::info!("epoch {} L1 {:.5} L2 {:.5} hit@1 {:?}", epoch, l1, l2, hit);
        observe(&stats);
    }

    let hits = match last_hits {
        Some(h) => Some(h),
        None if !test.is_empty() => Some(evaluate(&model, test, store, &cfg.k_list)?),
        None => None,
    };
    let trailing = (!hit_curve.is_empty())
        .then(|| trailing_protocol(&hit_curve, TRAILING_WINDOW, TRAILING_TOLERANCE, TRAILING_SPAN));
    let report = EvalReport {
        hit_at_1: hits.as_ref().map_or(0.0, |h| h.hit_at_1),
        hit_at_k: hits.map(|h| h.hit_at_k).unwrap_or_default(),
        l1_curve,
        l2_curve,
        hit_curve,
        trailing,
        config: cfg.to_kv(),
        seed: cfg.seed,
    };
    Ok(TrainOutcome { model, report })
}

/// Environment features as `relation=value` pairs. Blank lines and `#`
/// comments are skipped; errors name the 1-based line.
pub fn parse_env_description(text: &str, store: &CwkgStore) -> Result<Vec<(String, String)>, CfError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let n = i + 1;
        let (rel, value) = line
            .split_once('=')
            .ok_or_else(|| CfError::SchemaViolation(format!("line {}: expected relation=value, got {:?}", n, line)))?;
        let (rel, value) = (rel.trim(), value.trim());
        match store.relation(rel) {
            Some(def) if def.side == Side::Environment => {}
            Some(_) => {
                return Err(CfError::SchemaViolation(format!("line {}: {} is not an environment relation", n, rel)));
            }
            None => return Err(CfError::SchemaViolation(format!("line {}: unknown relation {:?}", n, rel))),
        }
        if out.iter().any(|(r, _)| r == rel) {
            return Err(CfError::SchemaViolation(format!("line {}: relation {} given twice", n, rel)));
        }
        let def = store.relation(rel).expect("checked");
        synth::tail_for(def, value).map_err(|m| CfError::InvalidValue(format!("line {}: {}", n, m)))?;
        out.push((rel.to_string(), value.to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recommendation {
    pub ranked: Vec<(String, f64)>,
    /// Requested `top_k` exceeded `M` and was reduced.
    pub clamped: bool,
    pub scores: ScoreVector,
}

/// Scores a transient environment built from feature values; unseen tail
/// values contribute through their numeric and text channels only. Neither
/// the store nor the model is modified.
pub fn recommend(
    env: &[(String, String)],
    model: &Model,
    store: &CwkgStore,
    top_k: usize,
) -> Result<Recommendation, CfError> {
    let side = store.side_schema(Side::Environment);
    let mut rows: Vec<Option<FeatureSlot>> = vec![None; side.len()];
    for (rel, value) in env {
        let def = store
            .relation(rel)
            .filter(|d| d.side == Side::Environment)
            .ok_or_else(|| CfError::SchemaViolation(format!("unknown environment relation {:?}", rel)))?;
        let tail = synth::tail_for(def, value).map_err(CfError::InvalidValue)?;
        let slot = &mut rows[def.row_index];
        if slot.is_some() {
            return Err(CfError::SchemaViolation(format!("relation {} given twice", rel)));
        }
        *slot = Some(FeatureSlot {
            relation: store.schema().iter().position(|r| r.name == def.name).expect("schema relation"),
            tail_entity: store
                .entity_idx(&tail.id)
                .filter(|&i| store.entity_at(i).kind == EntityKind::TailValue),
            label: tail.label,
            numeric: tail.numeric,
        });
    }
    let features = HeadFeatures {
        side: Side::Environment,
        rows,
    };
    let inputs = model.transient_inputs(store, &features)?;
    let cache = model.waveform_cache()?;
    let scores = model.score_inputs(&inputs, &cache)?.remove(0);
    let sv = ScoreVector::new("(query)".to_string(), model.waveform_ids().to_vec(), scores);
    let m = sv.m();
    let clamped = top_k > m;
    if clamped {
        log::warn!("top_k {} exceeds {} waveforms; clamped", top_k, m);
    }
    let ranked = sv
        .ranking()
        .into_iter()
        .take(top_k.min(m))
        .map(|i| (sv.waveforms[i].clone(), sv.probs[i]))
        .collect();
    Ok(Recommendation {
        ranked,
        clamped,
        scores: sv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_corpus, OracleConfig};

    #[test]
    fn hit_arithmetic_and_ties() {
        let scores: Vec<Vec<f64>> = (0..100).map(|i| if i < 75 { vec![1.0, 0.0] } else { vec![0.0, 1.0] }).collect();
        let avail = vec![BTreeSet::from([0usize]); 100];
        let h = hits_from_scores(&scores, &avail, &[1, 2]).unwrap();
        assert_eq!((h.n_hit, h.n_all), (75, 100));
        assert_eq!(h.hit_at_1, 0.75);
        assert_eq!(h.hit_at_k[&2], 1.0);
        // ties go to the lower column
        let tie = hits_from_scores(&[vec![0.5, 0.5]], &[BTreeSet::from([0usize])], &[1]).unwrap();
        assert_eq!(tie.hit_at_1, 1.0);
        assert!(matches!(hits_from_scores(&[], &[], &[1]), Err(CfError::EmptyTestSet)));
    }

    #[test]
    fn monotone_transform_keeps_hits() {
        let scores = vec![vec![0.1, 0.9, -0.3], vec![2.0, 1.0, 3.0], vec![0.0, 0.0, -1.0]];
        let avail = vec![BTreeSet::from([1usize]), BTreeSet::from([0usize]), BTreeSet::from([2usize])];
        let a = hits_from_scores(&scores, &avail, &[1, 2]).unwrap();
        let moved: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|s| 2.0 * s + 1.0).collect()).collect();
        assert_eq!(a, hits_from_scores(&moved, &avail, &[1, 2]).unwrap());
    }

    #[test]
    fn trailing_protocol_cases() {
        let flat = vec![0.5; 150];
        let t = trailing_protocol(&flat, 20, 0.002, 100);
        assert_eq!(t.converged_epoch, Some(20));
        assert_eq!(t.epochs_averaged, 100);
        assert!(t.complete && t.mean == 0.5);
        let short = vec![0.7; 30];
        let t = trailing_protocol(&short, 20, 0.002, 100);
        assert!(!t.complete);
        assert_eq!(t.epochs_averaged, 9);
        let rising: Vec<f64> = (0..60).map(|i| i as f64 * 0.01).collect();
        let t = trailing_protocol(&rising, 20, 0.002, 100);
        assert_eq!(t.converged_epoch, None);
        assert_eq!(t.epochs_averaged, 60);
    }

    #[test]
    fn config_round_trip() {
        let cfg = TrainConfig {
            ere: EreConfig {
                mode: EreMode::Conv,
                hidden: Some(7),
                ..EreConfig::default()
            },
            seed: u64::MAX,
            ..TrainConfig::default()
        };
        let map: HashMap<String, String> = cfg.to_kv().into_iter().collect();
        assert_eq!(TrainConfig::from_kv(&map).unwrap(), cfg);
        let d = TrainConfig::default();
        assert_eq!((d.lr, d.ere.k, d.ere.g, d.ere.mode), (0.001, 5, 1, EreMode::InvoThenAttn(3)));
    }

    fn tiny_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            n_emb: 4,
            ere: EreConfig {
                mode: EreMode::InvoThenAttn(1),
                k: 3,
                ..EreConfig::default()
            },
            mlp_hidden: vec![8, 4],
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_is_the_initialization() {
        let store = gen_corpus(5, 30, &OracleConfig::default(), 4).unwrap();
        let (_, test) = store.split_ewbg((10, 2), 1).unwrap();
        let out = train(&store, &test, &tiny_cfg(0)).unwrap();
        assert!(out.report.l1_curve.is_empty() && out.report.hit_curve.is_empty());
        let fresh = Model::new(&training_store(&store, &test), tiny_cfg(0).model_config()).unwrap();
        assert_eq!(out.model.checkpoint_entries(&store), fresh.checkpoint_entries(&store));
    }

    #[test]
    fn training_is_deterministic() {
        let store = gen_corpus(5, 30, &OracleConfig::default(), 4).unwrap();
        let (_, test) = store.split_ewbg((10, 2), 1).unwrap();
        let a = train(&store, &test, &tiny_cfg(3)).unwrap();
        let b = train(&store, &test, &tiny_cfg(3)).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.model.checkpoint_entries(&store), b.model.checkpoint_entries(&store));
        assert_eq!(a.report.hit_curve.len(), 3);
    }

    #[test]
    fn softmax_objective_trains() {
        let store = gen_corpus(5, 30, &OracleConfig::default(), 4).unwrap();
        let (_, test) = store.split_ewbg((10, 2), 1).unwrap();
        let cfg = TrainConfig {
            l2_loss: L2Loss::Softmax,
            ..tiny_cfg(2)
        };
        let out = train(&store, &test, &cfg).unwrap();
        assert!(out.report.l2_curve.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn env_description_errors_cite_lines() {
        let store = gen_corpus(3, 4, &OracleConfig::default(), 1).unwrap();
        let ok = parse_env_description("channel_type=Gaussian\n\njsr_db=33\n", &store).unwrap();
        assert_eq!(ok.len(), 2);
        match parse_env_description("jsr_db=30\nmodulatin=QPSK\n", &store) {
            Err(CfError::SchemaViolation(m)) => assert!(m.contains("line 2") && m.contains("modulatin"), "{}", m),
            other => panic!("{:?}", other),
        }
        assert!(matches!(parse_env_description("modulation=QPSK", &store), Err(CfError::SchemaViolation(_))));
        assert!(matches!(parse_env_description("jsr_db=loud", &store), Err(CfError::InvalidValue(_))));
    }
}
