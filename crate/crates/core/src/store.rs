//! Typed triplet store for the waveform knowledge graph.
//!
//! The graph is the union of three subgraphs: waveform facts (WKG),
//! environment facts (EKG) and the `feasible` edges linking environments to
//! the waveforms that satisfy them (EWBG).

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Relation token of the environment/waveform bipartite edges.
pub const FEASIBLE: &str = "feasible";

/// Internal relation key of `feasible`.
pub(crate) const FEASIBLE_KEY: usize = usize::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum StoreError {
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("unknown relation {0}")]
    UnknownRelation(String),
    #[error("subgraph mismatch: {0}")]
    SubgraphMismatch(String),
    #[error("duplicate triple ({0}, {1}, {2})")]
    DuplicateTriple(String, String, String),
    #[error("duplicate entity {0}")]
    DuplicateEntity(String),
    #[error("{head} already has a value for {relation}")]
    ConflictingFeature { head: String, relation: String },
    #[error("invalid entity {id}: {reason}")]
    InvalidEntity { id: String, reason: String },
    #[error("{0} is not a head entity")]
    NotAHead(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("EWBG is empty")]
    EmptyEwbg,
    #[error("invalid split ratio {0}:{1}")]
    InvalidRatio(u32, u32),
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("i/o failure: {0}")]
    IoFailure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Waveform,
    Environment,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Waveform => "waveform",
            Side::Environment => "environment",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "waveform" => Some(Side::Waveform),
            "environment" => Some(Side::Environment),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RelationKind {
    Categorical,
    Numeric,
    Boolean,
}

impl RelationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RelationKind::Categorical => "categorical",
            RelationKind::Numeric => "numeric",
            RelationKind::Boolean => "boolean",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "categorical" => Some(RelationKind::Categorical),
            "numeric" => Some(RelationKind::Numeric),
            "boolean" => Some(RelationKind::Boolean),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationDef {
    pub name: String,
    pub kind: RelationKind,
    pub side: Side,
    pub units: Option<String>,
    pub value_range: Option<(f64, f64)>,
    /// Position of this relation in its side's feature matrix.
    pub row_index: usize,
}

impl RelationDef {
    pub fn categorical(name: &str, side: Side, row_index: usize) -> Self {
        Self {
            name: name.to_string(),
            kind: RelationKind::Categorical,
            side,
            units: None,
            value_range: None,
            row_index,
        }
    }

    pub fn boolean(name: &str, side: Side, row_index: usize) -> Self {
        Self {
            kind: RelationKind::Boolean,
            ..Self::categorical(name, side, row_index)
        }
    }

    pub fn numeric(name: &str, side: Side, row_index: usize, range: (f64, f64), units: Option<&str>) -> Self {
        Self {
            name: name.to_string(),
            kind: RelationKind::Numeric,
            side,
            units: units.map(str::to_string),
            value_range: Some(range),
            row_index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntityKind {
    WaveformHead,
    EnvironmentHead,
    TailValue,
}

impl EntityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::WaveformHead => "waveform_head",
            EntityKind::EnvironmentHead => "environment_head",
            EntityKind::TailValue => "tail_value",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "waveform_head" => Some(EntityKind::WaveformHead),
            "environment_head" => Some(EntityKind::EnvironmentHead),
            "tail_value" => Some(EntityKind::TailValue),
            _ => None,
        }
    }

    pub fn side(self) -> Option<Side> {
        match self {
            EntityKind::WaveformHead => Some(Side::Waveform),
            EntityKind::EnvironmentHead => Some(Side::Environment),
            EntityKind::TailValue => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub id: String,
    pub kind: EntityKind,
    pub numeric_value: Option<f64>,
    pub text_label: String,
}

impl Entity {
    pub fn head(id: &str, kind: EntityKind, label: &str) -> Self {
        Self {
            id: id.to_string(),
            kind,
            numeric_value: None,
            text_label: label.to_string(),
        }
    }

    pub fn tail(id: &str, label: &str, numeric_value: Option<f64>) -> Self {
        Self {
            id: id.to_string(),
            kind: EntityKind::TailValue,
            numeric_value,
            text_label: label.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Subgraph {
    Wkg,
    Ekg,
    Ewbg,
}

impl Subgraph {
    pub fn as_str(self) -> &'static str {
        match self {
            Subgraph::Wkg => "WKG",
            Subgraph::Ekg => "EKG",
            Subgraph::Ewbg => "EWBG",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "WKG" => Some(Subgraph::Wkg),
            "EKG" => Some(Subgraph::Ekg),
            "EWBG" => Some(Subgraph::Ewbg),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub subgraph: Subgraph,
}

impl Triple {
    pub fn new(head: &str, relation: &str, tail: &str, subgraph: Subgraph) -> Self {
        Self {
            head: head.to_string(),
            relation: relation.to_string(),
            tail: tail.to_string(),
            subgraph,
        }
    }

    pub fn feasible(env: &str, waveform: &str) -> Self {
        Self::new(env, FEASIBLE, waveform, Subgraph::Ewbg)
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

/// Triple resolved to registry indices. `relation` is a schema index or
/// [`FEASIBLE_KEY`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IndexedTriple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub relation: String,
    pub tail_id: Option<String>,
    pub numeric_value: Option<f64>,
    pub missing: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub relation: String,
    pub tail: String,
}

#[derive(Debug, Clone)]
pub struct CwkgStore {
    schema: Vec<RelationDef>,
    relation_index: HashMap<String, usize>,
    entities: Vec<Entity>,
    entity_index: HashMap<String, usize>,
    triples: Vec<Triple>,
    indexed: Vec<IndexedTriple>,
    triple_set: HashSet<(usize, usize, usize)>,
    adjacency: HashMap<usize, Vec<(usize, usize)>>,
}

impl PartialEq for CwkgStore {
    fn eq(&self, other: &Self) -> bool {
        self.schema == other.schema && self.entities == other.entities && self.triples == other.triples
    }
}

fn validate_schema(schema: &[RelationDef]) -> Result<(), StoreError> {
    let mut names = HashSet::new();
    for side in [Side::Waveform, Side::Environment] {
        let mut idx: Vec<usize> = schema.iter().filter(|r| r.side == side).map(|r| r.row_index).collect();
        idx.sort_unstable();
        if idx.iter().enumerate().any(|(i, &r)| i != r) {
            return Err(StoreError::SchemaViolation(format!(
                "{} row indices must be contiguous from 0, got {:?}",
                side.as_str(),
                idx
            )));
        }
    }
    for r in schema {
        if r.name.is_empty() || r.name.chars().any(char::is_whitespace) {
            return Err(StoreError::SchemaViolation(format!("invalid relation name {:?}", r.name)));
        }
        if r.name == FEASIBLE {
            return Err(StoreError::SchemaViolation("`feasible` is reserved".into()));
        }
        if !names.insert(r.name.as_str()) {
            return Err(StoreError::SchemaViolation(format!("duplicate relation {}", r.name)));
        }
        match (r.kind, r.value_range) {
            (RelationKind::Numeric, Some((lo, hi))) if lo.is_finite() && hi.is_finite() && lo < hi => {}
            (RelationKind::Numeric, _) => {
                return Err(StoreError::SchemaViolation(format!(
                    "numeric relation {} needs a finite range with min < max",
                    r.name
                )))
            }
            (_, Some(_)) => {
                return Err(StoreError::SchemaViolation(format!(
                    "only numeric relations carry a range ({})",
                    r.name
                )))
            }
            _ => {}
        }
        if let Some(u) = &r.units {
            if u.is_empty() || u.chars().any(char::is_whitespace) {
                return Err(StoreError::SchemaViolation(format!("invalid units for {}", r.name)));
            }
        }
    }
    Ok(())
}

impl CwkgStore {
    /// Creates an empty store over a validated schema.
    pub fn new(schema: Vec<RelationDef>) -> Result<Self, StoreError> {
        validate_schema(&schema)?;
        let relation_index = schema.iter().enumerate().map(|(i, r)| (r.name.clone(), i)).collect();
        Ok(Self {
            schema,
            relation_index,
            entities: Vec::new(),
            entity_index: HashMap::new(),
            triples: Vec::new(),
            indexed: Vec::new(),
            triple_set: HashSet::new(),
            adjacency: HashMap::new(),
        })
    }

    pub fn schema(&self) -> &[RelationDef] {
        &self.schema
    }

    pub fn relation(&self, name: &str) -> Option<&RelationDef> {
        self.relation_index.get(name).map(|&i| &self.schema[i])
    }

    pub(crate) fn relation_key(&self, name: &str) -> Option<usize> {
        if name == FEASIBLE {
            Some(FEASIBLE_KEY)
        } else {
            self.relation_index.get(name).copied()
        }
    }

    /// Schema relations of one side in row order.
    pub fn side_schema(&self, side: Side) -> Vec<&RelationDef> {
        let mut rels: Vec<&RelationDef> = self.schema.iter().filter(|r| r.side == side).collect();
        rels.sort_by_key(|r| r.row_index);
        rels
    }

    pub fn side_len(&self, side: Side) -> usize {
        self.schema.iter().filter(|r| r.side == side).count()
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn entity(&self, id: &str) -> Option<&Entity> {
        self.entity_index.get(id).map(|&i| &self.entities[i])
    }

    pub fn entity_idx(&self, id: &str) -> Option<usize> {
        self.entity_index.get(id).copied()
    }

    pub fn entity_at(&self, idx: usize) -> &Entity {
        &self.entities[idx]
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn indexed_triples(&self) -> &[IndexedTriple] {
        &self.indexed
    }

    pub fn contains(&self, head: usize, relation: usize, tail: usize) -> bool {
        self.triple_set.contains(&(head, relation, tail))
    }

    pub fn contains_triple(&self, t: &Triple) -> bool {
        match (self.entity_idx(&t.head), self.relation_key(&t.relation), self.entity_idx(&t.tail)) {
            (Some(h), Some(r), Some(tl)) => self.contains(h, r, tl),
            _ => false,
        }
    }

    /// Head ids of one kind, sorted by id.
    pub fn heads(&self, kind: EntityKind) -> Vec<&str> {
        let mut ids: Vec<&str> = self
            .entities
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.id.as_str())
            .collect();
        ids.sort_unstable();
        ids
    }

    pub fn subgraph_triples(&self, sub: Subgraph) -> Vec<&Triple> {
        self.triples.iter().filter(|t| t.subgraph == sub).collect()
    }

    pub fn add_entity(&mut self, entity: Entity) -> Result<(), StoreError> {
        let invalid = |reason: &str| StoreError::InvalidEntity {
            id: entity.id.clone(),
            reason: reason.to_string(),
        };
        if entity.id.is_empty() || entity.id.chars().any(char::is_whitespace) || entity.id == "-" {
            return Err(invalid("id must be a non-empty token"));
        }
        if entity.text_label.contains('\n') || entity.text_label.trim() != entity.text_label {
            return Err(invalid("label must be a single trimmed line"));
        }
        if let Some(v) = entity.numeric_value {
            if !v.is_finite() {
                return Err(invalid("numeric value must be finite"));
            }
            if entity.kind != EntityKind::TailValue {
                return Err(invalid("only tail values carry numbers"));
            }
        }
        if self.entity_index.contains_key(&entity.id) {
            return Err(StoreError::DuplicateEntity(entity.id));
        }
        self.entity_index.insert(entity.id.clone(), self.entities.len());
        self.entities.push(entity);
        Ok(())
    }

    /// Inserts a fact after checking registries and the subgraph rules.
    pub fn add_triple(&mut self, triple: Triple) -> Result<(), StoreError> {
        let h = self
            .entity_idx(&triple.head)
            .ok_or_else(|| StoreError::UnknownEntity(triple.head.clone()))?;
        let t = self
            .entity_idx(&triple.tail)
            .ok_or_else(|| StoreError::UnknownEntity(triple.tail.clone()))?;
        let r = self
            .relation_key(&triple.relation)
            .ok_or_else(|| StoreError::UnknownRelation(triple.relation.clone()))?;
        let head_kind = self.entities[h].kind;
        let tail_kind = self.entities[t].kind;
        let mismatch = |msg: String| Err(StoreError::SubgraphMismatch(format!("{} {}", triple, msg)));

        if r == FEASIBLE_KEY {
            if triple.subgraph != Subgraph::Ewbg {
                return mismatch(format!("uses `feasible` inside {}", triple.subgraph.as_str()));
            }
            if head_kind != EntityKind::EnvironmentHead || tail_kind != EntityKind::WaveformHead {
                return mismatch("must link an environment head to a waveform head".into());
            }
        } else {
            let rel = &self.schema[r];
            let (want_sub, want_head) = match rel.side {
                Side::Waveform => (Subgraph::Wkg, EntityKind::WaveformHead),
                Side::Environment => (Subgraph::Ekg, EntityKind::EnvironmentHead),
            };
            if triple.subgraph != want_sub {
                return mismatch(format!("relation {} belongs to {}", rel.name, want_sub.as_str()));
            }
            if head_kind != want_head {
                return mismatch(format!("head must be a {}", want_head.as_str()));
            }
            if tail_kind != EntityKind::TailValue {
                return mismatch("tail must be a tail value".into());
            }
            if rel.kind == RelationKind::Numeric && self.entities[t].numeric_value.is_none() {
                return mismatch(format!("numeric relation {} needs a numeric tail", rel.name));
            }
            if self.adjacency.get(&h).is_some_and(|n| n.iter().any(|&(rr, _)| rr == r)) {
                if self.triple_set.contains(&(h, r, t)) {
                    return Err(StoreError::DuplicateTriple(triple.head, triple.relation, triple.tail));
                }
                return Err(StoreError::ConflictingFeature {
                    head: triple.head,
                    relation: triple.relation,
                });
            }
        }
        if !self.triple_set.insert((h, r, t)) {
            return Err(StoreError::DuplicateTriple(triple.head, triple.relation, triple.tail));
        }
        self.adjacency.entry(h).or_default().push((r, t));
        self.indexed.push(IndexedTriple {
            head: h,
            relation: r,
            tail: t,
        });
        self.triples.push(triple);
        Ok(())
    }

    /// Removes a triple if present; used to build perturbed stores in tests and tools.
    pub fn remove_triple(&mut self, triple: &Triple) -> bool {
        let Some(pos) = self.triples.iter().position(|t| t == triple) else {
            return false;
        };
        self.triples.remove(pos);
        let it = self.indexed.remove(pos);
        self.triple_set.remove(&(it.head, it.relation, it.tail));
        self.adjacency = self.rebuild_adjacency();
        true
    }

    pub fn adjacency(&self) -> &HashMap<usize, Vec<(usize, usize)>> {
        &self.adjacency
    }

    /// Adjacency recomputed from the triple list.
    pub fn rebuild_adjacency(&self) -> HashMap<usize, Vec<(usize, usize)>> {
        let mut adj: HashMap<usize, Vec<(usize, usize)>> = HashMap::new();
        for t in &self.indexed {
            adj.entry(t.head).or_default().push((t.relation, t.tail));
        }
        adj
    }

    fn relation_name(&self, key: usize) -> &str {
        if key == FEASIBLE_KEY {
            FEASIBLE
        } else {
            &self.schema[key].name
        }
    }

    /// First-order neighbors ordered by relation row index then tail id;
    /// `feasible` edges come last.
    pub fn neighbors(&self, head: &str) -> Result<Vec<Neighbor>, StoreError> {
        let h = self
            .entity_idx(head)
            .ok_or_else(|| StoreError::UnknownEntity(head.to_string()))?;
        let mut out: Vec<(usize, &str, usize)> = self
            .adjacency
            .get(&h)
            .map(|n| {
                n.iter()
                    .map(|&(r, t)| {
                        let order = if r == FEASIBLE_KEY { usize::MAX } else { self.schema[r].row_index };
                        (order, self.entities[t].id.as_str(), r)
                    })
                    .collect()
            })
            .unwrap_or_default();
        out.sort();
        Ok(out
            .into_iter()
            .map(|(_, tail, r)| Neighbor {
                relation: self.relation_name(r).to_string(),
                tail: tail.to_string(),
            })
            .collect())
    }

    /// Tail entity index per schema row of the head's side (`None` = missing).
    pub(crate) fn feature_tails(&self, head: usize) -> Result<(Side, Vec<Option<usize>>), StoreError> {
        let e = &self.entities[head];
        let side = e.kind.side().ok_or_else(|| StoreError::NotAHead(e.id.clone()))?;
        let mut rows = vec![None; self.side_len(side)];
        if let Some(n) = self.adjacency.get(&head) {
            for &(r, t) in n {
                if r != FEASIBLE_KEY && self.schema[r].side == side {
                    rows[self.schema[r].row_index] = Some(t);
                }
            }
        }
        Ok((side, rows))
    }

    /// One row per schema relation of the head's side, in row order.
    pub fn feature_rows(&self, head: &str) -> Result<Vec<FeatureRow>, StoreError> {
        let h = self
            .entity_idx(head)
            .ok_or_else(|| StoreError::UnknownEntity(head.to_string()))?;
        let (side, tails) = self.feature_tails(h)?;
        Ok(self
            .side_schema(side)
            .into_iter()
            .zip(tails)
            .map(|(rel, tail)| FeatureRow {
                relation: rel.name.clone(),
                tail_id: tail.map(|t| self.entities[t].id.clone()),
                numeric_value: tail.and_then(|t| self.entities[t].numeric_value),
                missing: tail.is_none(),
            })
            .collect())
    }

    /// Splits the EWBG edges by whole environments so that test environments
    /// share no edge with training, while the test edge count lands as close
    /// as possible to `b / (a + b)` of the total.
    pub fn split_ewbg(&self, ratio: (u32, u32), seed: u64) -> Result<(Vec<Triple>, Vec<Triple>), StoreError> {
        let (a, b) = ratio;
        if a == 0 {
            return Err(StoreError::InvalidRatio(a, b));
        }
        let ewbg: Vec<usize> = (0..self.triples.len())
            .filter(|&i| self.triples[i].subgraph == Subgraph::Ewbg)
            .collect();
        if ewbg.is_empty() {
            return Err(StoreError::EmptyEwbg);
        }
        let total = ewbg.len();
        let target = ((total as u64 * b as u64) as f64 / (a + b) as f64).round() as usize;

        // group by environment in first-seen order, then shuffle groups
        let mut order: Vec<usize> = Vec::new();
        let mut degree: HashMap<usize, usize> = HashMap::new();
        for &i in &ewbg {
            let h = self.indexed[i].head;
            let d = degree.entry(h).or_insert(0);
            if *d == 0 {
                order.push(h);
            }
            *d += 1;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);

        let test_envs = pick_subset_near(&order, &degree, target);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for &i in &ewbg {
            if test_envs.contains(&self.indexed[i].head) {
                test.push(self.triples[i].clone());
            } else {
                train.push(self.triples[i].clone());
            }
        }
        Ok((train, test))
    }
}

/// Subset of `groups` whose degree sum is closest to `target` (exact when
/// reachable). Earlier groups are preferred, so a shuffled order gives a
/// random subset.
fn pick_subset_near(groups: &[usize], degree: &HashMap<usize, usize>, target: usize) -> HashSet<usize> {
    if target == 0 {
        return HashSet::new();
    }
    let cap = target + 1;
    // parent[s] = group position that first reached sum s
    let mut parent: Vec<Option<usize>> = vec![None; cap + 1];
    let mut reach = vec![false; cap + 1];
    reach[0] = true;
    for (pos, g) in groups.iter().enumerate() {
        let d = degree[g];
        if reach[target] {
            break;
        }
        for s in (d..=cap).rev() {
            if !reach[s] && reach[s - d] {
                reach[s] = true;
                parent[s] = Some(pos);
            }
        }
    }
    let best = (0..=cap)
        .filter(|&s| reach[s])
        .min_by_key(|&s| (s.abs_diff(target), s > target))
        .unwrap_or(0);
    let mut chosen = HashSet::new();
    let mut s = best;
    while s > 0 {
        let pos = parent[s].expect("reachable sum has a parent");
        let g = groups[pos];
        chosen.insert(g);
        s -= degree[&g];
    }
    chosen
}
