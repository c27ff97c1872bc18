//! Mode, head-count and cascade sweeps scored by the trailing-window Hit@1,
//! with the per-seed ordering checks.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::cf::CfError;
use crate::ere::EreMode;
use crate::store::CwkgStore;
use crate::train::{self, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sweep {
    Modes,
    Heads,
    Cascades,
}

impl Sweep {
    pub const ALL: [Sweep; 3] = [Sweep::Modes, Sweep::Heads, Sweep::Cascades];

    pub fn as_str(self) -> &'static str {
        match self {
            Sweep::Modes => "modes",
            Sweep::Heads => "heads",
            Sweep::Cascades => "cascades",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|w| w.as_str() == s)
    }

    pub fn title(self) -> &'static str {
        match self {
            Sweep::Modes => "ERE methods",
            Sweep::Heads => "attention heads",
            Sweep::Cascades => "cascades",
        }
    }

    pub fn modes(self) -> Vec<EreMode> {
        match self {
            Sweep::Modes => vec![EreMode::KrlOnly, EreMode::Conv, EreMode::Attn(1), EreMode::Invo],
            Sweep::Heads => [1, 3, 5, 8].into_iter().map(EreMode::Attn).collect(),
            Sweep::Cascades => vec![EreMode::InvoThenAttn(1), EreMode::AttnThenInvo(1), EreMode::InvoThenAttn(3)],
        }
    }
}

/// One training run's outcome for a cell.
#[derive(Debug, Clone, PartialEq)]
pub enum CellRun {
    Done { hit_at_1: f64, complete: bool },
    Failed(String),
}

impl CellRun {
    pub fn value(&self) -> Option<f64> {
        match self {
            CellRun::Done { hit_at_1, .. } => Some(*hit_at_1),
            CellRun::Failed(_) => None,
        }
    }

    fn complete(&self) -> bool {
        matches!(self, CellRun::Done { complete: true, .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClaimCheck {
    pub name: String,
    pub per_seed: Vec<Option<bool>>,
}

impl ClaimCheck {
    pub fn satisfied_by_majority(&self) -> bool {
        let yes = self.per_seed.iter().filter(|s| **s == Some(true)).count();
        2 * yes > self.per_seed.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub tolerance: f64,
    pub sweeps: Vec<Sweep>,
    /// Keyed by mode label, one entry per seed.
    pub runs: BTreeMap<String, Vec<CellRun>>,
}

pub const DEFAULT_TOLERANCE: f64 = 0.01;

/// Trains every distinct cell of `sweeps` once per seed. The seed drives
/// both the environment split and the training streams.
pub fn run_ablation(
    store: &CwkgStore,
    base: &TrainConfig,
    ratio: (u32, u32),
    seeds: &[u64],
    sweeps: &[Sweep],
    mut progress: impl FnMut(&str, u64, &CellRun),
) -> Result<AblationReport, CfError> {
    let mut modes: Vec<EreMode> = Vec::new();
    for s in sweeps {
        for m in s.modes() {
            if !modes.contains(&m) {
                modes.push(m);
            }
        }
    }
    let mut runs: BTreeMap<String, Vec<CellRun>> = BTreeMap::new();
    for &seed in seeds {
        let (_, test) = store.split_ewbg(ratio, seed)?;
        for &mode in &modes {
            let cfg = TrainConfig {
                seed,
                ere: crate::ere::EreConfig { mode, ..base.ere },
                ..base.clone()
            };
            let run = match train::train(store, &test, &cfg) {
                Ok(out) => match out.report.trailing {
                    Some(t) => CellRun::Done {
                        hit_at_1: t.mean,
                        complete: t.complete,
                    },
                    None => CellRun::Failed("no test evaluations".into()),
                },
                Err(e) => CellRun::Failed(e.to_string()),
            };
            progress(&mode.label(), seed, &run);
            runs.entry(mode.label()).or_default().push(run);
        }
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        tolerance: DEFAULT_TOLERANCE,
        sweeps: sweeps.to_vec(),
        runs,
    })
}

impl AblationReport {
    fn value(&self, mode: EreMode, seed_idx: usize) -> Option<f64> {
        self.runs.get(&mode.label()).and_then(|r| r.get(seed_idx)).and_then(CellRun::value)
    }

    pub fn mean(&self, mode: EreMode) -> Option<f64> {
        let v: Option<Vec<f64>> = (0..self.seeds.len()).map(|i| self.value(mode, i)).collect();
        v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    fn per_seed(&self, f: impl Fn(&dyn Fn(EreMode) -> Option<f64>) -> Option<bool>) -> Vec<Option<bool>> {
        (0..self.seeds.len()).map(|i| f(&|m| self.value(m, i))).collect()
    }

    /// Ordering claims of the sweeps present, each evaluated per seed.
    pub fn claims(&self) -> Vec<ClaimCheck> {
        let tol = self.tolerance;
        let mut out = Vec::new();
        if self.sweeps.contains(&Sweep::Modes) {
            out.push(ClaimCheck {
                name: "attn(1) >= krl_only and invo >= krl_only".into(),
                per_seed: self.per_seed(|v| {
                    let k = v(EreMode::KrlOnly)?;
                    Some(v(EreMode::Attn(1))? >= k - tol && v(EreMode::Invo)? >= k - tol)
                }),
            });
        }
        if self.sweeps.contains(&Sweep::Heads) {
            out.push(ClaimCheck {
                name: "Hit@1 non-decreasing in H over 1,3,5,8".into(),
                per_seed: self.per_seed(|v| {
                    let h: Option<Vec<f64>> = Sweep::Heads.modes().into_iter().map(v).collect();
                    Some(h?.windows(2).all(|w| w[1] >= w[0] - tol))
                }),
            });
        }
        if self.sweeps.contains(&Sweep::Cascades) {
            out.push(ClaimCheck {
                name: "invo_then_attn(3) is the best cascade".into(),
                per_seed: self.per_seed(|v| {
                    let best = v(EreMode::InvoThenAttn(3))?;
                    let others: Option<Vec<f64>> = Sweep::Cascades
                        .modes()
                        .into_iter()
                        .filter(|&m| m != EreMode::InvoThenAttn(3))
                        .map(v)
                        .collect();
                    Some(others?.iter().all(|&o| best >= o - tol))
                }),
            });
        }
        out
    }

    /// One table per sweep; cells with a failed or incomplete run are marked.
    pub fn tables(&self) -> String {
        let mut out = String::new();
        for s in &self.sweeps {
            let mut incomplete = false;
            let _ = writeln!(out, "## {} (trailing Hit@1)", s.title());
            let _ = write!(out, "{:<20}", "cell");
            for seed in &self.seeds {
                let _ = write!(out, "{:>12}", format!("seed {}", seed));
            }
            let _ = writeln!(out, "{:>12}", "mean");
            for m in s.modes() {
                let _ = write!(out, "{:<20}", m.label());
                let runs = self.runs.get(&m.label()).cloned().unwrap_or_default();
                for i in 0..self.seeds.len() {
                    let cell = match runs.get(i) {
                        Some(r @ CellRun::Done { hit_at_1, .. }) => {
                            let mark = if r.complete() { "" } else { "*" };
                            if !r.complete() {
                                incomplete = true;
                            }
                            format!("{:.4}{}", hit_at_1, mark)
                        }
                        _ => {
                            incomplete = true;
                            "failed".to_string()
                        }
                    };
                    let _ = write!(out, "{:>12}", cell);
                }
                let mean = self.mean(m).map_or_else(|| "-".to_string(), |v| format!("{:.4}", v));
                let _ = writeln!(out, "{:>12}", mean);
            }
            if incomplete {
                let _ = writeln!(out, "(incomplete: * marks runs without a full averaging span)");
            }
            out.push('\n');
        }
        for c in self.claims() {
            let marks: Vec<&str> = c
                .per_seed
                .iter()
                .map(|s| match s {
                    Some(true) => "yes",
                    Some(false) => "no",
                    None => "n/a",
                })
                .collect();
            let verdict = if c.satisfied_by_majority() { "holds" } else { "fails" };
            let _ = writeln!(out, "claim: {} [{}] {}", c.name, marks.join(" "), verdict);
        }
        out
    }

    /// `key=value` lines of cell means.
    pub fn metrics_text(&self) -> String {
        let mut out = String::new();
        for (label, runs) in &self.runs {
            for (seed, r) in self.seeds.iter().zip(runs) {
                match r.value() {
                    Some(v) => {
                        let _ = writeln!(out, "{}@seed{}={:.6}", label, seed, v);
                    }
                    None => {
                        let _ = writeln!(out, "{}@seed{}=failed", label, seed);
                    }
                }
            }
        }
        out
    }
}
