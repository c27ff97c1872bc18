//! The full recommender: TransD tables, per-side enhancement and the MLP,
//! with cached constant block inputs and checkpoint I/O.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use autograd::{checkpoint, Graph, ParamId, ParamStore, Tensor, Var};

use crate::cf::{self, CfError, CfPair, Mlp, MlpConfig, ScoreVector};
use crate::ere::{EreConfig, EreSide};
use crate::krl::{self, BlockInputs, EmbeddingAccess, HashEmbedder, HeadFeatures, KrlError, KrlParams, TextEmbedder};
use crate::rng;
use crate::store::{CwkgStore, EntityKind, Side};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_emb: usize,
    pub ere: EreConfig,
    pub mlp_hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_emb: krl::DEFAULT_N_EMB,
            ere: EreConfig::default(),
            mlp_hidden: vec![64, 32],
            leaky_slope: 0.01,
            seed: 0,
        }
    }
}

/// Memoizes label embeddings; the hash embedder is pure.
#[derive(Debug)]
pub struct CachedEmbedder {
    inner: HashEmbedder,
    cache: RefCell<HashMap<String, Vec<f64>>>,
}

impl CachedEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            inner: HashEmbedder { dim },
            cache: RefCell::new(HashMap::new()),
        }
    }
}

impl TextEmbedder for CachedEmbedder {
    fn dim(&self) -> usize {
        self.inner.dim
    }

    fn embed(&self, label: &str) -> Result<Vec<f64>, KrlError> {
        if let Some(v) = self.cache.borrow().get(label) {
            return Ok(v.clone());
        }
        let v = self.inner.embed(label)?;
        self.cache.borrow_mut().insert(label.to_string(), v.clone());
        Ok(v)
    }
}

/// Which cross-entropy reading trains the scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum L2Loss {
    /// Per-pair sigmoid with balanced negatives.
    PairSigmoid,
    /// Softmax over all waveforms of the environment.
    Softmax,
}

impl L2Loss {
    pub fn as_str(self) -> &'static str {
        match self {
            L2Loss::PairSigmoid => "pair_sigmoid",
            L2Loss::Softmax => "softmax",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pair_sigmoid" => Some(L2Loss::PairSigmoid),
            "softmax" => Some(L2Loss::Softmax),
            _ => None,
        }
    }
}

/// Constant data of one cross-entropy step; cells are `(batch row, score column)`.
#[derive(Debug, Clone)]
pub struct L2Batch {
    pub inputs: BlockInputs,
    pub n_envs: usize,
    pub positives: Vec<(usize, usize)>,
    /// Positives then negatives; empty for the softmax objective.
    pub pairs: Vec<(usize, usize)>,
    pub labels: Vec<f64>,
    pub loss: L2Loss,
}

/// Parameters plus constant inputs bound to one store's entity order.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub krl: KrlParams,
    pub ere_wf: EreSide,
    pub ere_env: EreSide,
    pub mlp: Mlp,
    text: CachedEmbedder,
    /// Store indices of waveform heads, ascending by id.
    waveforms: Vec<usize>,
    wf_ids: Vec<String>,
    wf_inputs: BlockInputs,
    env_inputs: HashMap<usize, BlockInputs>,
}

impl Model {
    pub fn new(store: &CwkgStore, config: ModelConfig) -> Result<Self, CfError> {
        let mut params = ParamStore::new();
        let seed = config.seed;
        let n = config.n_emb;
        let krl = KrlParams::init(store, n, &mut params, rng::mix(seed, &[1]))?;
        let wf_rows = store.side_len(Side::Waveform);
        let env_rows = store.side_len(Side::Environment);
        let wf_c = krl::channels(Side::Waveform);
        let env_c = krl::channels(Side::Environment);
        let ere_wf = EreSide::init(Side::Waveform, wf_rows, n, wf_c, config.ere, &mut params, rng::mix(seed, &[2]))?;
        let ere_env = EreSide::init(Side::Environment, env_rows, n, env_c, config.ere, &mut params, rng::mix(seed, &[3]))?;
        let d_u = ere_env.output_len();
        let mut mlp_cfg = MlpConfig::new(d_u + ere_wf.output_len(), &config.mlp_hidden);
        mlp_cfg.activation = crate::cf::Activation::LeakyRelu(config.leaky_slope);
        let mlp = Mlp::init(mlp_cfg, d_u, &mut params, rng::mix(seed, &[4]))?;

        let text = CachedEmbedder::new(n);
        let wf_ids: Vec<String> = store.heads(EntityKind::WaveformHead).into_iter().map(String::from).collect();
        if wf_ids.is_empty() {
            return Err(CfError::InvalidValue("store has no waveforms".into()));
        }
        let waveforms: Vec<usize> = wf_ids.iter().map(|id| store.entity_idx(id).expect("listed head")).collect();
        let mut wf_inputs = BlockInputs::default();
        for &w in &waveforms {
            let f = krl::head_features(store, w)?;
            wf_inputs.extend(&krl.block_inputs(store, &f, &text)?);
        }
        let mut env_inputs = HashMap::new();
        for id in store.heads(EntityKind::EnvironmentHead) {
            let idx = store.entity_idx(id).expect("listed head");
            let f = krl::head_features(store, idx)?;
            env_inputs.insert(idx, krl.block_inputs(store, &f, &text)?);
        }
        Ok(Self {
            config,
            params,
            krl,
            ere_wf,
            ere_env,
            mlp,
            text,
            waveforms,
            wf_ids,
            wf_inputs,
            env_inputs,
        })
    }

    pub fn m(&self) -> usize {
        self.waveforms.len()
    }

    pub fn waveform_ids(&self) -> &[String] {
        &self.wf_ids
    }

    /// Store indices of the waveforms, in scoring order.
    pub fn waveform_indices(&self) -> &[usize] {
        &self.waveforms
    }

    /// Column of a waveform store index in score vectors.
    pub fn waveform_column(&self, idx: usize) -> Option<usize> {
        self.waveforms.iter().position(|&w| w == idx)
    }

    pub fn text_embedder(&self) -> &dyn TextEmbedder {
        &self.text
    }

    /// Parameters updated by the cross-entropy objective.
    pub fn l2_ids(&self, train_entities: bool) -> Vec<ParamId> {
        let mut ids = self.ere_wf.ids();
        ids.extend(self.ere_env.ids());
        ids.extend(self.mlp.ids());
        ids.push(self.krl.numeric_dir);
        if train_entities {
            ids.push(self.krl.entity_e);
        }
        ids
    }

    pub fn env_block_inputs(&self, env: usize) -> Result<&BlockInputs, CfError> {
        self.env_inputs
            .get(&env)
            .ok_or_else(|| CfError::UnknownEntity(format!("environment #{}", env)))
    }

    /// Block inputs of an environment described by features alone.
    pub fn transient_inputs(&self, store: &CwkgStore, features: &HeadFeatures) -> Result<BlockInputs, CfError> {
        Ok(self.krl.block_inputs(store, features, &self.text)?)
    }

    /// Enhanced waveform vectors `(M, len(Z_v))`.
    pub fn waveform_vectors(&self, g: &mut Graph, access: EmbeddingAccess) -> Result<Var, CfError> {
        self.waveform_vectors_in(g, &self.params, access)
    }

    /// As [`waveform_vectors`](Self::waveform_vectors) with explicit parameters.
    pub fn waveform_vectors_in(&self, g: &mut Graph, ps: &ParamStore, access: EmbeddingAccess) -> Result<Var, CfError> {
        let block = self.krl.assemble(g, ps, &self.wf_inputs, Side::Waveform, access)?;
        Ok(self.ere_wf.enhance(g, ps, block)?)
    }

    /// Enhanced environment vectors `(B, len(Z_u))`.
    pub fn environment_vectors(&self, g: &mut Graph, inputs: &BlockInputs) -> Result<Var, CfError> {
        self.environment_vectors_in(g, &self.params, inputs)
    }

    pub fn environment_vectors_in(&self, g: &mut Graph, ps: &ParamStore, inputs: &BlockInputs) -> Result<Var, CfError> {
        let block = self.krl.assemble(g, ps, inputs, Side::Environment, EmbeddingAccess::Frozen)?;
        Ok(self.ere_env.enhance(g, ps, block)?)
    }

    /// Builds one cross-entropy batch over `envs`, each with all its
    /// positives; the pair objective adds one sampled negative per positive.
    pub fn l2_batch(
        &self,
        train_store: &CwkgStore,
        envs: &[usize],
        positives: &BTreeMap<usize, Vec<usize>>,
        loss: L2Loss,
        seed: u64,
    ) -> Result<L2Batch, CfError> {
        let col = |w: usize| {
            self.waveform_column(w)
                .ok_or_else(|| CfError::UnknownEntity(train_store.entity_at(w).id.clone()))
        };
        let pos: Vec<CfPair> = envs
            .iter()
            .flat_map(|&e| positives.get(&e).into_iter().flatten().map(move |&w| CfPair { env: e, wf: w }))
            .collect();
        let row: HashMap<usize, usize> = envs.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        let positive_cells = pos.iter().map(|p| Ok((row[&p.env], col(p.wf)?))).collect::<Result<Vec<_>, CfError>>()?;
        let (pairs, labels) = match loss {
            L2Loss::PairSigmoid => {
                let neg = cf::sample_cf_negatives(&pos, train_store, seed)?;
                let mut pairs = positive_cells.clone();
                for n in &neg {
                    pairs.push((row[&n.env], col(n.wf)?));
                }
                let labels = (0..pairs.len()).map(|i| f64::from(u8::from(i < pos.len()))).collect();
                (pairs, labels)
            }
            L2Loss::Softmax => (Vec::new(), Vec::new()),
        };
        Ok(L2Batch {
            inputs: self.batch_inputs(envs)?,
            n_envs: envs.len(),
            positives: positive_cells,
            pairs,
            labels,
            loss,
        })
    }

    /// Mean cross-entropy of a batch under parameters `ps`.
    pub fn l2_loss(&self, g: &mut Graph, ps: &ParamStore, batch: &L2Batch, access: EmbeddingAccess) -> Result<Var, CfError> {
        let zv = self.waveform_vectors_in(g, ps, access)?;
        let zu = self.environment_vectors_in(g, ps, &batch.inputs)?;
        match batch.loss {
            L2Loss::PairSigmoid => {
                let s = self.mlp.pair_scores(g, ps, zu, zv, &batch.pairs)?;
                let p = g.sigmoid(s)?;
                let l = cf::ce_loss(g, p, &batch.labels)?;
                Ok(g.scale(l, 1.0 / batch.pairs.len() as f64)?)
            }
            L2Loss::Softmax => {
                let m = self.m();
                let all: Vec<(usize, usize)> = (0..batch.n_envs).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
                let s = self.mlp.pair_scores(g, ps, zu, zv, &all)?;
                let s = g.reshape(s, &[batch.n_envs, m])?;
                let p = g.softmax(s)?;
                let rows: Vec<usize> = batch.positives.iter().map(|c| c.0).collect();
                let targets: Vec<usize> = batch.positives.iter().map(|c| c.1).collect();
                let pr = g.gather_rows(p, &rows)?;
                let l = g.nll(pr, &targets)?;
                Ok(g.scale(l, 1.0 / batch.positives.len() as f64)?)
            }
        }
    }

    pub fn batch_inputs(&self, envs: &[usize]) -> Result<BlockInputs, CfError> {
        let mut out = BlockInputs::default();
        for &e in envs {
            out.extend(self.env_block_inputs(e)?);
        }
        Ok(out)
    }

    /// First-layer waveform contributions, reusable across environments.
    pub fn waveform_cache(&self) -> Result<Tensor, CfError> {
        let mut g = Graph::new();
        let zv = self.waveform_vectors(&mut g, EmbeddingAccess::Frozen)?;
        let w0 = g.frozen(&self.params, self.mlp.w[0]);
        let wv = g.slice_rows(w0, self.mlp.d_u, self.mlp.d_in())?;
        let hv = g.matmul(zv, wv)?;
        Ok(g.value(hv).clone())
    }

    /// Raw scores `s_u` of each environment over all waveforms.
    pub fn score_inputs(&self, inputs: &BlockInputs, cache: &Tensor) -> Result<Vec<Vec<f64>>, CfError> {
        let b = inputs.heads;
        let m = self.m();
        let mut g = Graph::new();
        let zu = self.environment_vectors(&mut g, inputs)?;
        let w0 = g.frozen(&self.params, self.mlp.w[0]);
        let wu = g.slice_rows(w0, 0, self.mlp.d_u)?;
        let hu = g.matmul(zu, wu)?;
        let hv = g.constant(cache.clone())?;
        let iu: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat(i).take(m)).collect();
        let iv: Vec<usize> = (0..b).flat_map(|_| 0..m).collect();
        let a = g.gather_rows(hu, &iu)?;
        let c = g.gather_rows(hv, &iv)?;
        let pre = g.add(a, c)?;
        let s = self.mlp.head(&mut g, &self.params, pre)?;
        Ok(g.value(s).data().chunks(m).map(<[f64]>::to_vec).collect())
    }

    /// Scores of registered environments, batched.
    pub fn score_envs(&self, envs: &[usize]) -> Result<Vec<Vec<f64>>, CfError> {
        let cache = self.waveform_cache()?;
        let mut out = Vec::with_capacity(envs.len());
        for chunk in envs.chunks(128) {
            out.extend(self.score_inputs(&self.batch_inputs(chunk)?, &cache)?);
        }
        Ok(out)
    }

    pub fn score_all(&self, env: &str, store: &CwkgStore) -> Result<ScoreVector, CfError> {
        let idx = store
            .entity_idx(env)
            .filter(|&i| store.entity_at(i).kind == EntityKind::EnvironmentHead)
            .ok_or_else(|| CfError::UnknownEntity(env.to_string()))?;
        let scores = self.score_envs(&[idx])?.remove(0);
        Ok(ScoreVector::new(env.to_string(), self.wf_ids.clone(), scores))
    }

    /// Named checkpoint entries; entity and relation rows are keyed by id.
    pub fn checkpoint_entries(&self, store: &CwkgStore) -> Vec<(String, Tensor)> {
        let mut out = self.krl.named_entries(store, &self.params);
        for (_, p) in self.params.iter() {
            if p.name.starts_with("ere/") || p.name.starts_with("cf/") {
                out.push((p.name.clone(), p.value.clone()));
            }
        }
        out
    }

    pub fn save(&self, store: &CwkgStore, path: &Path) -> Result<(), CfError> {
        Ok(checkpoint::save(&self.checkpoint_entries(store), path)?)
    }

    pub fn load_entries(&mut self, store: &CwkgStore, entries: Vec<(String, Tensor)>) -> Result<(), CfError> {
        let map: HashMap<String, Tensor> = entries.into_iter().collect();
        self.krl.load_entries(store, &mut self.params, &map)?;
        let names: Vec<(ParamId, String)> = self
            .params
            .iter()
            .filter(|(_, p)| p.name.starts_with("ere/") || p.name.starts_with("cf/"))
            .map(|(id, p)| (id, p.name.clone()))
            .collect();
        for (id, name) in names {
            let t = map
                .get(&name)
                .ok_or_else(|| CfError::Checkpoint(format!("missing {}", name)))?;
            if t.shape() != self.params.value(id).shape() {
                return Err(CfError::Checkpoint(format!(
                    "{} has shape {:?}, expected {:?}",
                    name,
                    t.shape(),
                    self.params.value(id).shape()
                )));
            }
            *self.params.value_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn load(store: &CwkgStore, config: ModelConfig, path: &Path) -> Result<Self, CfError> {
        let mut m = Self::new(store, config)?;
        let entries = checkpoint::load(path)?;
        m.load_entries(store, entries)?;
        Ok(m)
    }
}
