//! Synthetic corpora labelled by an analytic dB-margin feasibility oracle.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::rng;
use crate::store::{
    CwkgStore, Entity, EntityKind, RelationDef, RelationKind, Side, StoreError, Subgraph, Triple, FEASIBLE,
};

/// Shipped default oracle tables.
pub const DEFAULT_ORACLE_CONFIG: &str = include_str!("../config/oracle_default.txt");

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("environment {index} stayed unsatisfiable after {retries} resamples")]
    DegenerateCorpus { index: usize, retries: usize },
    #[error("cannot reconstruct spec of {head}: {reason}")]
    SpecReconstructionError { head: String, reason: String },
    #[error("oracle config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

macro_rules! vocab {
    ($(#[$m:meta])* $name:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($var),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$var => $s),+ }
            }

            pub fn parse(s: &str) -> Option<Self> {
                match s { $($s => Some($name::$var),)+ _ => None }
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }
    };
}

vocab!(Modulation { Bpsk => "BPSK", Qpsk => "QPSK", Msk => "MSK", Qam16 => "16QAM" });
vocab!(CodingType { Rs => "RS", Turbo => "Turbo", Ldpc => "LDPC" });
vocab!(CodingRate { TwoThirds => "2/3", OneHalf => "1/2", OneThird => "1/3" });
vocab!(Crc { Crc4 => "CRC-4", Crc8 => "CRC-8", Crc64 => "CRC-64" });
vocab!(ChannelType { Gaussian => "Gaussian", Rician => "Rician", Rayleigh => "Rayleigh" });
vocab!(JammingType {
    None => "none",
    SingleTone => "single_tone",
    MultiTone => "multi_tone",
    PartialBand => "partial_band",
    GaussianPulse => "gaussian_pulse",
});

impl Modulation {
    pub fn bits_per_symbol(self) -> f64 {
        match self {
            Modulation::Bpsk | Modulation::Msk => 1.0,
            Modulation::Qpsk => 2.0,
            Modulation::Qam16 => 4.0,
        }
    }
}

impl CodingRate {
    pub fn value(self) -> f64 {
        match self {
            CodingRate::TwoThirds => 2.0 / 3.0,
            CodingRate::OneHalf => 0.5,
            CodingRate::OneThird => 1.0 / 3.0,
        }
    }

    pub fn from_value(v: f64) -> Option<Self> {
        Self::ALL.iter().copied().find(|r| (r.value() - v).abs() < 1e-9)
    }
}

/// Relation names of the standard schema.
pub mod rel {
    pub const CRC: &str = "crc";
    pub const MODULATION: &str = "modulation";
    pub const CODING_TYPE: &str = "coding_type";
    pub const CODING_RATE: &str = "coding_rate";
    pub const JAMMING_SUPPRESSION: &str = "jamming_suppression";
    pub const SOFT_DEMODULATION: &str = "soft_demodulation";
    pub const BIT_RATE: &str = "bit_rate";

    pub const CHANNEL_TYPE: &str = "channel_type";
    pub const JAMMING_TYPE: &str = "jamming_type";
    pub const NUM_TONES: &str = "num_tones";
    pub const BANDWIDTH_FACTOR: &str = "bandwidth_factor";
    pub const JSR_DB: &str = "jsr_db";
    pub const EBN0_DB: &str = "ebn0_db";
    pub const REQUIRED_BIT_RATE: &str = "required_bit_rate";
    pub const BER_EXPONENT: &str = "ber_exponent";
}

pub fn standard_schema() -> Vec<RelationDef> {
    use Side::{Environment as E, Waveform as W};
    vec![
        RelationDef::categorical(rel::CRC, W, 0),
        RelationDef::categorical(rel::MODULATION, W, 1),
        RelationDef::categorical(rel::CODING_TYPE, W, 2),
        RelationDef::numeric(rel::CODING_RATE, W, 3, (0.0, 1.0), None),
        RelationDef::boolean(rel::JAMMING_SUPPRESSION, W, 4),
        RelationDef::boolean(rel::SOFT_DEMODULATION, W, 5),
        RelationDef::numeric(rel::BIT_RATE, W, 6, (0.0, 100.0), Some("Mbps")),
        RelationDef::categorical(rel::CHANNEL_TYPE, E, 0),
        RelationDef::categorical(rel::JAMMING_TYPE, E, 1),
        RelationDef::numeric(rel::NUM_TONES, E, 2, (0.0, 16.0), None),
        RelationDef::numeric(rel::BANDWIDTH_FACTOR, E, 3, (0.0, 1.0), None),
        RelationDef::numeric(rel::JSR_DB, E, 4, (0.0, 40.0), Some("dB")),
        RelationDef::numeric(rel::EBN0_DB, E, 5, (0.0, 30.0), Some("dB")),
        RelationDef::numeric(rel::REQUIRED_BIT_RATE, E, 6, (0.0, 100.0), Some("Mbps")),
        RelationDef::numeric(rel::BER_EXPONENT, E, 7, (-9.0, -2.0), None),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveformSpec {
    pub id: String,
    pub modulation: Modulation,
    pub coding_type: CodingType,
    pub coding_rate: CodingRate,
    pub crc: Crc,
    pub jamming_suppression: bool,
    pub soft_demodulation: bool,
    pub supported_rate_bps: f64,
}

impl WaveformSpec {
    /// QPSK, rate-1/3 Turbo, suppression on, 6.8246 Mbps.
    pub fn narrative(id: &str) -> Self {
        Self {
            id: id.to_string(),
            modulation: Modulation::Qpsk,
            coding_type: CodingType::Turbo,
            coding_rate: CodingRate::OneThird,
            crc: Crc::Crc64,
            jamming_suppression: true,
            soft_demodulation: true,
            supported_rate_bps: 6.8246e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentSpec {
    pub id: String,
    pub channel_type: ChannelType,
    pub jamming_type: JammingType,
    pub num_tones: u32,
    pub bandwidth_factor: f64,
    pub jsr_db: f64,
    pub ebn0_db: f64,
    pub required_rate_bps: f64,
    pub required_ber_exponent: i32,
}

impl EnvironmentSpec {
    /// Gaussian channel, single-tone jamming at 30 dB JSR, 5 Mbps at BER 1e-6, Eb/N0 4 dB.
    pub fn narrative(id: &str) -> Self {
        Self {
            id: id.to_string(),
            channel_type: ChannelType::Gaussian,
            jamming_type: JammingType::SingleTone,
            num_tones: 1,
            bandwidth_factor: 0.1,
            jsr_db: 30.0,
            ebn0_db: 4.0,
            required_rate_bps: 5e6,
            required_ber_exponent: -6,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let tones_ok = match self.jamming_type {
            JammingType::SingleTone => self.num_tones == 1,
            JammingType::MultiTone => self.num_tones > 1,
            _ => self.num_tones == 0,
        };
        if !tones_ok {
            return Err(format!("{} tones with {}", self.num_tones, self.jamming_type.as_str()));
        }
        if !(0.0..=1.0).contains(&self.bandwidth_factor) {
            return Err(format!("bandwidth factor {}", self.bandwidth_factor));
        }
        if !(self.required_rate_bps > 0.0) || !self.jsr_db.is_finite() || !self.ebn0_db.is_finite() {
            return Err("non-finite or non-positive quantity".into());
        }
        if self.required_ber_exponent >= 0 {
            return Err(format!("BER exponent {}", self.required_ber_exponent));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    /// Required Eb/N0 per [`Modulation`].
    pub base_threshold_db: [f64; 4],
    /// Gain per [`CodingType`] then [`CodingRate`].
    pub coding_gain_db: [[f64; 3]; 3],
    pub channel_penalty_db: [f64; 3],
    /// Gain per [`JammingType`] when the waveform suppresses jamming.
    pub suppression_gain_db: [f64; 5],
    pub jsr_penalty_slope: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            base_threshold_db: [10.5, 10.5, 11.0, 14.5],
            coding_gain_db: [[3.0, 3.5, 4.0], [5.5, 7.0, 8.0], [5.0, 6.5, 7.5]],
            channel_penalty_db: [0.0, 2.0, 5.0],
            suppression_gain_db: [0.0, 20.0, 14.0, 10.0, 8.0],
            jsr_penalty_slope: 0.5,
        }
    }
}

impl OracleConfig {
    /// Every pair passes the margin gate.
    pub fn permissive() -> Self {
        Self {
            base_threshold_db: [-100.0; 4],
            ..Self::default()
        }
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for m in Modulation::ALL {
            let _ = writeln!(out, "base_threshold_db.{}={}", m.as_str(), self.base_threshold_db[m.index()]);
        }
        for c in CodingType::ALL {
            for r in CodingRate::ALL {
                let _ = writeln!(
                    out,
                    "coding_gain_db.{}.{}={}",
                    c.as_str(),
                    r.as_str(),
                    self.coding_gain_db[c.index()][r.index()]
                );
            }
        }
        for ch in ChannelType::ALL {
            let _ = writeln!(out, "channel_penalty_db.{}={}", ch.as_str(), self.channel_penalty_db[ch.index()]);
        }
        for j in JammingType::ALL {
            let _ = writeln!(out, "suppression_gain_db.{}={}", j.as_str(), self.suppression_gain_db[j.index()]);
        }
        let _ = writeln!(out, "jsr_penalty_slope={}", self.jsr_penalty_slope);
        out
    }

    /// Parses `key=value` lines; every table entry must appear exactly once.
    pub fn parse(text: &str) -> Result<Self, SynthError> {
        let mut values: HashMap<String, (f64, usize)> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.trim();
            if body.is_empty() || body.starts_with('#') {
                continue;
            }
            let err = |message: String| SynthError::Config { line, message };
            let (k, v) = body.split_once('=').ok_or_else(|| err(format!("expected key=value, got {:?}", body)))?;
            let v: f64 = v
                .trim()
                .parse()
                .ok()
                .filter(|x: &f64| x.is_finite())
                .ok_or_else(|| err(format!("invalid number for {}", k.trim())))?;
            if values.insert(k.trim().to_string(), (v, line)).is_some() {
                return Err(err(format!("duplicate key {}", k.trim())));
            }
        }
        let mut take = |key: String| -> Result<f64, SynthError> {
            values.remove(&key).map(|(v, _)| v).ok_or(SynthError::Config {
                line: 0,
                message: format!("missing key {}", key),
            })
        };
        let mut cfg = Self::default();
        for m in Modulation::ALL {
            cfg.base_threshold_db[m.index()] = take(format!("base_threshold_db.{}", m.as_str()))?;
        }
        for c in CodingType::ALL {
            for r in CodingRate::ALL {
                cfg.coding_gain_db[c.index()][r.index()] = take(format!("coding_gain_db.{}.{}", c.as_str(), r.as_str()))?;
            }
        }
        for ch in ChannelType::ALL {
            cfg.channel_penalty_db[ch.index()] = take(format!("channel_penalty_db.{}", ch.as_str()))?;
        }
        for j in JammingType::ALL {
            cfg.suppression_gain_db[j.index()] = take(format!("suppression_gain_db.{}", j.as_str()))?;
        }
        cfg.jsr_penalty_slope = take("jsr_penalty_slope".into())?;
        if let Some((k, (_, line))) = values.into_iter().min_by_key(|(_, (_, l))| *l) {
            return Err(SynthError::Config {
                line,
                message: format!("unknown key {}", k),
            });
        }
        Ok(cfg)
    }
}

/// Link margin in dB; feasibility additionally needs the rate gate.
pub fn margin_db(env: &EnvironmentSpec, wf: &WaveformSpec, cfg: &OracleConfig) -> f64 {
    let jam_penalty = if env.jamming_type == JammingType::None {
        0.0
    } else {
        let relief = if wf.jamming_suppression {
            cfg.suppression_gain_db[env.jamming_type.index()]
        } else {
            0.0
        };
        (cfg.jsr_penalty_slope * env.jsr_db - relief).max(0.0)
    };
    env.ebn0_db - cfg.base_threshold_db[wf.modulation.index()]
        + cfg.coding_gain_db[wf.coding_type.index()][wf.coding_rate.index()]
        - cfg.channel_penalty_db[env.channel_type.index()]
        - jam_penalty
}

pub fn oracle_feasible(env: &EnvironmentSpec, wf: &WaveformSpec, cfg: &OracleConfig) -> bool {
    wf.supported_rate_bps >= env.required_rate_bps && margin_db(env, wf, cfg) >= 0.0
}

/// Sampling distributions of the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Symbol rates in Msym/s; waveform rate = symbol rate · bits/symbol ·
    /// code rate, scaled by `suppression_rate_factor` when suppression is on.
    pub symbol_rates_msps: Vec<f64>,
    pub suppression_rate_factor: f64,
    pub required_rates_mbps: Vec<f64>,
    /// Eb/N0 grid in dB: `low + step·i` up to `high`.
    pub ebn0_grid_db: (f64, f64, f64),
    pub max_jsr_db: u32,
    pub max_multi_tones: u32,
    /// First waveform is [`WaveformSpec::narrative`].
    pub narrative_waveform: bool,
    pub max_resamples: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            symbol_rates_msps: vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
            suppression_rate_factor: 0.5,
            required_rates_mbps: vec![1.0, 2.0, 5.0, 10.0, 20.0, 40.0],
            ebn0_grid_db: (0.0, 25.0, 0.5),
            max_jsr_db: 40,
            max_multi_tones: 16,
            narrative_waveform: true,
            max_resamples: 1000,
        }
    }
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (v * s).round() / s
}

pub fn sample_waveform<R: Rng>(id: &str, gen: &GeneratorConfig, rng: &mut R) -> WaveformSpec {
    let modulation = *Modulation::ALL.choose(rng).expect("nonempty");
    let coding_type = *CodingType::ALL.choose(rng).expect("nonempty");
    let coding_rate = *CodingRate::ALL.choose(rng).expect("nonempty");
    let crc = *Crc::ALL.choose(rng).expect("nonempty");
    let jamming_suppression = rng.gen_bool(0.5);
    let soft_demodulation = rng.gen_bool(0.5);
    let sym = *gen.symbol_rates_msps.choose(rng).expect("symbol rate set is empty");
    let mut mbps = sym * modulation.bits_per_symbol() * coding_rate.value();
    if jamming_suppression {
        mbps *= gen.suppression_rate_factor;
    }
    WaveformSpec {
        id: id.to_string(),
        modulation,
        coding_type,
        coding_rate,
        crc,
        jamming_suppression,
        soft_demodulation,
        supported_rate_bps: round_to(mbps, 4) * 1e6,
    }
}

pub fn sample_environment<R: Rng>(id: &str, gen: &GeneratorConfig, rng: &mut R) -> EnvironmentSpec {
    let channel_type = *ChannelType::ALL.choose(rng).expect("nonempty");
    let jamming_type = *JammingType::ALL.choose(rng).expect("nonempty");
    let num_tones = match jamming_type {
        JammingType::SingleTone => 1,
        JammingType::MultiTone => rng.gen_range(2..=gen.max_multi_tones.max(2)),
        _ => 0,
    };
    let jsr_db = if jamming_type == JammingType::None {
        0.0
    } else {
        rng.gen_range(0..=gen.max_jsr_db) as f64
    };
    let (lo, hi, step) = gen.ebn0_grid_db;
    let steps = ((hi - lo) / step).round() as u32;
    let ebn0_db = lo + step * rng.gen_range(0..=steps) as f64;
    EnvironmentSpec {
        id: id.to_string(),
        channel_type,
        jamming_type,
        num_tones,
        bandwidth_factor: rng.gen_range(0..=20) as f64 / 20.0,
        jsr_db,
        ebn0_db,
        required_rate_bps: gen.required_rates_mbps.choose(rng).expect("rate set is empty") * 1e6,
        required_ber_exponent: rng.gen_range(-9..=-2),
    }
}

/// Tail entity standing for a feature value.
#[derive(Debug, Clone, PartialEq)]
pub struct TailValue {
    pub id: String,
    pub label: String,
    pub numeric: Option<f64>,
}

/// Label of a numeric tail: the shortest round-trip decimal followed by units.
pub fn numeric_label(value: f64, units: Option<&str>) -> String {
    format!("{}{}", value, units.unwrap_or(""))
}

/// Tail for a raw value token under `relation`. Numeric tails accept plain
/// numbers or `a/b` fractions; booleans accept `on`/`off`.
pub fn tail_for(relation: &RelationDef, raw: &str) -> Result<TailValue, String> {
    let raw = raw.trim();
    if raw.is_empty() || raw.chars().any(char::is_whitespace) {
        return Err(format!("invalid value {:?} for {}", raw, relation.name));
    }
    match relation.kind {
        RelationKind::Categorical => Ok(TailValue {
            id: format!("{}:{}", relation.name, raw),
            label: raw.to_string(),
            numeric: None,
        }),
        RelationKind::Boolean => match raw {
            "on" | "off" => Ok(TailValue {
                id: format!("{}:{}", relation.name, raw),
                label: raw.to_string(),
                numeric: None,
            }),
            _ => Err(format!("{} expects on or off, got {:?}", relation.name, raw)),
        },
        RelationKind::Numeric => {
            let value = match raw.split_once('/') {
                Some((a, b)) => match (a.parse::<f64>(), b.parse::<f64>()) {
                    (Ok(a), Ok(b)) if b != 0.0 => a / b,
                    _ => f64::NAN,
                },
                None => raw.parse::<f64>().unwrap_or(f64::NAN),
            };
            if !value.is_finite() {
                return Err(format!("{} expects a number, got {:?}", relation.name, raw));
            }
            let fraction = raw.contains('/');
            let label = if fraction {
                raw.to_string()
            } else {
                numeric_label(value, relation.units.as_deref())
            };
            let token = if fraction { raw.to_string() } else { value.to_string() };
            Ok(TailValue {
                id: format!("{}:{}", relation.name, token),
                label,
                numeric: Some(value),
            })
        }
    }
}

fn waveform_values(wf: &WaveformSpec) -> Vec<(&'static str, String)> {
    let flag = |b: bool| if b { "on" } else { "off" }.to_string();
    vec![
        (rel::CRC, wf.crc.as_str().to_string()),
        (rel::MODULATION, wf.modulation.as_str().to_string()),
        (rel::CODING_TYPE, wf.coding_type.as_str().to_string()),
        (rel::CODING_RATE, wf.coding_rate.as_str().to_string()),
        (rel::JAMMING_SUPPRESSION, flag(wf.jamming_suppression)),
        (rel::SOFT_DEMODULATION, flag(wf.soft_demodulation)),
        (rel::BIT_RATE, (wf.supported_rate_bps / 1e6).to_string()),
    ]
}

/// `relation=value` pairs describing an environment, in schema order.
pub fn environment_values(env: &EnvironmentSpec) -> Vec<(&'static str, String)> {
    vec![
        (rel::CHANNEL_TYPE, env.channel_type.as_str().to_string()),
        (rel::JAMMING_TYPE, env.jamming_type.as_str().to_string()),
        (rel::NUM_TONES, env.num_tones.to_string()),
        (rel::BANDWIDTH_FACTOR, env.bandwidth_factor.to_string()),
        (rel::JSR_DB, env.jsr_db.to_string()),
        (rel::EBN0_DB, env.ebn0_db.to_string()),
        (rel::REQUIRED_BIT_RATE, (env.required_rate_bps / 1e6).to_string()),
        (rel::BER_EXPONENT, env.required_ber_exponent.to_string()),
    ]
}

/// Registers the tail if absent and links it to `head`.
pub fn add_feature(store: &mut CwkgStore, head: &str, relation: &str, raw: &str) -> Result<(), StoreError> {
    let def = store
        .relation(relation)
        .ok_or_else(|| StoreError::UnknownRelation(relation.to_string()))?
        .clone();
    let tail = tail_for(&def, raw).map_err(|reason| StoreError::InvalidEntity {
        id: format!("{}:{}", relation, raw),
        reason,
    })?;
    if store.entity(&tail.id).is_none() {
        store.add_entity(Entity::tail(&tail.id, &tail.label, tail.numeric))?;
    }
    let sub = match def.side {
        Side::Waveform => Subgraph::Wkg,
        Side::Environment => Subgraph::Ekg,
    };
    store.add_triple(Triple::new(head, relation, &tail.id, sub))
}

pub fn add_waveform(store: &mut CwkgStore, wf: &WaveformSpec) -> Result<(), StoreError> {
    store.add_entity(Entity::head(&wf.id, EntityKind::WaveformHead, &wf.id))?;
    for (r, v) in waveform_values(wf) {
        add_feature(store, &wf.id, r, &v)?;
    }
    Ok(())
}

pub fn add_environment(store: &mut CwkgStore, env: &EnvironmentSpec) -> Result<(), StoreError> {
    store.add_entity(Entity::head(&env.id, EntityKind::EnvironmentHead, &env.id))?;
    for (r, v) in environment_values(env) {
        add_feature(store, &env.id, r, &v)?;
    }
    Ok(())
}

/// A generated store together with the specs it encodes.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub store: CwkgStore,
    pub waveforms: Vec<WaveformSpec>,
    pub environments: Vec<EnvironmentSpec>,
}

impl Corpus {
    pub fn density(&self) -> f64 {
        ewbg_density(&self.store)
    }
}

/// Fraction of environment/waveform pairs joined by a feasible edge.
pub fn ewbg_density(store: &CwkgStore) -> f64 {
    let m = store.heads(EntityKind::WaveformHead).len();
    let n = store.heads(EntityKind::EnvironmentHead).len();
    if m * n == 0 {
        return 0.0;
    }
    store.subgraph_triples(Subgraph::Ewbg).len() as f64 / (m * n) as f64
}

pub fn waveform_id(i: usize) -> String {
    format!("W{:03}", i)
}

pub fn environment_id(i: usize) -> String {
    format!("E{:04}", i)
}

const WAVEFORM_STREAM: u64 = 1;
const ENVIRONMENT_STREAM: u64 = 2;

pub fn gen_corpus(n_waveforms: usize, n_environments: usize, cfg: &OracleConfig, seed: u64) -> Result<CwkgStore, SynthError> {
    generate(n_waveforms, n_environments, cfg, &GeneratorConfig::default(), seed).map(|c| c.store)
}

/// Samples specs, resampling environments no waveform satisfies, and encodes
/// them with EWBG edges exactly for oracle-positive pairs.
pub fn generate(
    n_waveforms: usize,
    n_environments: usize,
    cfg: &OracleConfig,
    gen: &GeneratorConfig,
    seed: u64,
) -> Result<Corpus, SynthError> {
    if n_waveforms < 2 || n_environments < 2 {
        return Err(SynthError::InvalidArgument(format!(
            "need at least 2 waveforms and 2 environments, got {} and {}",
            n_waveforms, n_environments
        )));
    }
    let waveforms: Vec<WaveformSpec> = (0..n_waveforms)
        .map(|i| {
            let id = waveform_id(i);
            if i == 0 && gen.narrative_waveform {
                WaveformSpec::narrative(&id)
            } else {
                sample_waveform(&id, gen, &mut rng::stream(seed, &[WAVEFORM_STREAM, i as u64]))
            }
        })
        .collect();

    let mut environments = Vec::with_capacity(n_environments);
    let mut feasible: Vec<Vec<usize>> = Vec::with_capacity(n_environments);
    for i in 0..n_environments {
        let id = environment_id(i);
        let mut r = rng::stream(seed, &[ENVIRONMENT_STREAM, i as u64]);
        let mut attempt = 0;
        loop {
            let env = sample_environment(&id, gen, &mut r);
            let ok: Vec<usize> = (0..n_waveforms).filter(|&w| oracle_feasible(&env, &waveforms[w], cfg)).collect();
            if !ok.is_empty() {
                environments.push(env);
                feasible.push(ok);
                break;
            }
            attempt += 1;
            if attempt > gen.max_resamples {
                return Err(SynthError::DegenerateCorpus {
                    index: i,
                    retries: gen.max_resamples,
                });
            }
        }
    }

    let mut store = CwkgStore::new(standard_schema())?;
    for wf in &waveforms {
        add_waveform(&mut store, wf)?;
    }
    for env in &environments {
        add_environment(&mut store, env)?;
    }
    for (env, ok) in environments.iter().zip(&feasible) {
        for &w in ok {
            store.add_triple(Triple::feasible(&env.id, &waveforms[w].id))?;
        }
    }
    Ok(Corpus {
        store,
        waveforms,
        environments,
    })
}

fn feature_map(store: &CwkgStore, head: &str) -> Result<HashMap<String, Entity>, SynthError> {
    let rows = store.feature_rows(head)?;
    let mut out = HashMap::new();
    for row in rows {
        if let Some(t) = row.tail_id {
            out.insert(row.relation, store.entity(&t).expect("tail registered").clone());
        }
    }
    Ok(out)
}

struct Fields<'a> {
    head: &'a str,
    map: HashMap<String, Entity>,
}

impl Fields<'_> {
    fn fail(&self, reason: String) -> SynthError {
        SynthError::SpecReconstructionError {
            head: self.head.to_string(),
            reason,
        }
    }

    fn get(&self, r: &str) -> Result<&Entity, SynthError> {
        self.map.get(r).ok_or_else(|| self.fail(format!("missing {}", r)))
    }

    fn vocab<T>(&self, r: &str, parse: fn(&str) -> Option<T>) -> Result<T, SynthError> {
        let e = self.get(r)?;
        parse(&e.text_label).ok_or_else(|| self.fail(format!("unknown {} {:?}", r, e.text_label)))
    }

    fn number(&self, r: &str) -> Result<f64, SynthError> {
        let e = self.get(r)?;
        e.numeric_value.ok_or_else(|| self.fail(format!("{} has no number", r)))
    }

    fn flag(&self, r: &str) -> Result<bool, SynthError> {
        match self.get(r)?.text_label.as_str() {
            "on" => Ok(true),
            "off" => Ok(false),
            other => Err(self.fail(format!("{} = {:?}", r, other))),
        }
    }
}

pub fn waveform_from_store(store: &CwkgStore, head: &str) -> Result<WaveformSpec, SynthError> {
    let f = Fields {
        head,
        map: feature_map(store, head)?,
    };
    let rate = f.number(rel::CODING_RATE)?;
    Ok(WaveformSpec {
        id: head.to_string(),
        modulation: f.vocab(rel::MODULATION, Modulation::parse)?,
        coding_type: f.vocab(rel::CODING_TYPE, CodingType::parse)?,
        coding_rate: CodingRate::from_value(rate).ok_or_else(|| f.fail(format!("coding rate {}", rate)))?,
        crc: f.vocab(rel::CRC, Crc::parse)?,
        jamming_suppression: f.flag(rel::JAMMING_SUPPRESSION)?,
        soft_demodulation: f.flag(rel::SOFT_DEMODULATION)?,
        supported_rate_bps: f.number(rel::BIT_RATE)? * 1e6,
    })
}

pub fn environment_from_store(store: &CwkgStore, head: &str) -> Result<EnvironmentSpec, SynthError> {
    let f = Fields {
        head,
        map: feature_map(store, head)?,
    };
    let tones = f.number(rel::NUM_TONES)?;
    let ber = f.number(rel::BER_EXPONENT)?;
    let env = EnvironmentSpec {
        id: head.to_string(),
        channel_type: f.vocab(rel::CHANNEL_TYPE, ChannelType::parse)?,
        jamming_type: f.vocab(rel::JAMMING_TYPE, JammingType::parse)?,
        num_tones: if tones >= 0.0 && tones.fract() == 0.0 {
            tones as u32
        } else {
            return Err(f.fail(format!("num_tones {}", tones)));
        },
        bandwidth_factor: f.number(rel::BANDWIDTH_FACTOR)?,
        jsr_db: f.number(rel::JSR_DB)?,
        ebn0_db: f.number(rel::EBN0_DB)?,
        required_rate_bps: f.number(rel::REQUIRED_BIT_RATE)? * 1e6,
        required_ber_exponent: if ber.fract() == 0.0 {
            ber as i32
        } else {
            return Err(f.fail(format!("ber_exponent {}", ber)));
        },
    };
    env.validate().map_err(|r| f.fail(r))?;
    Ok(env)
}

/// Number of environment/waveform pairs where the stored EWBG disagrees with
/// a fresh oracle evaluation.
pub fn recount_ewbg(store: &CwkgStore, cfg: &OracleConfig) -> Result<usize, SynthError> {
    let waveforms = store
        .heads(EntityKind::WaveformHead)
        .into_iter()
        .map(|h| waveform_from_store(store, h))
        .collect::<Result<Vec<_>, _>>()?;
    let mut disagreements = 0;
    for env_id in store.heads(EntityKind::EnvironmentHead) {
        let env = environment_from_store(store, env_id)?;
        for wf in &waveforms {
            let stored = store.contains_triple(&Triple::new(env_id, FEASIBLE, &wf.id, Subgraph::Ewbg));
            if stored != oracle_feasible(&env, wf, cfg) {
                disagreements += 1;
            }
        }
    }
    Ok(disagreements)
}
