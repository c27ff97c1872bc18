//! `waverec`: corpus synthesis, training, evaluation, recommendation and
//! ablation sweeps. Exit codes: 0 success, 1 usage, 2 data, 3 numeric.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use waverec::ablation::{self, Sweep};
use waverec::cf::CfError;
use waverec::ere::{EreConfig, EreMode};
use waverec::krl::BprSign;
use waverec::model::Model;
use waverec::store::{CwkgStore, EntityKind};
use waverec::synth::{self, GeneratorConfig, OracleConfig, SynthError};
use waverec::train::{self, L2Loss, TrainConfig};
use waverec::{kgfile, store::StoreError};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<CfError> for CliError {
    fn from(e: CfError) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Data(e.to_string())
    }
}

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {}", path.display(), e))
}

#[derive(Parser, Debug)]
#[command(name = "waverec", version, about = "Knowledge-graph waveform recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct TrainArgs {
    #[arg(long, default_value = "invo_then_attn")]
    ere_mode: String,
    #[arg(long, default_value_t = 3)]
    heads: usize,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    g: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    n_emb: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train:test ratio of feasible edges, split by whole environments.
    #[arg(long, default_value = "10:2")]
    split: String,
    /// `consistent` or `paper`.
    #[arg(long, default_value = "consistent")]
    bpr_sign: String,
    /// `pair_sigmoid` or `softmax`.
    #[arg(long, default_value = "pair_sigmoid")]
    l2_loss: String,
    /// Let the cross-entropy pass update entity embeddings too.
    #[arg(long)]
    no_freeze: bool,
    #[arg(long)]
    scale_attention: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic knowledge graph.
    Synth {
        #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
        waveforms: u64,
        #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
        environments: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Oracle tables as key=value lines; defaults to the built-in set.
        #[arg(long)]
        oracle_config: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train a model and write checkpoint, manifest and metrics.
    Train {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Re-evaluate a trained model on its held-out split.
    Evaluate {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        checkpoint_dir: PathBuf,
        #[arg(long, default_value = "1,3,5")]
        k_list: String,
    },
    /// Rank waveforms for an environment given as relation=value lines.
    Recommend {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        checkpoint_dir: PathBuf,
        #[arg(long)]
        env: PathBuf,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
    /// Run the mode, head and cascade sweeps.
    Ablate {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[arg(long, default_value = "modes,heads,cascades")]
        sweeps: String,
        #[command(flatten)]
        args: TrainArgs,
    },
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| CliError::Usage(format!("invalid {} {:?}", what, x))))
        .collect()
}

fn parse_split(s: &str) -> Result<(u32, u32), CliError> {
    let bad = || CliError::Usage(format!("--split expects a:b with a > 0, got {:?}", s));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let (a, b): (u32, u32) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
    if a == 0 {
        return Err(bad());
    }
    Ok((a, b))
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let mode = EreMode::parse(&a.ere_mode, a.heads).map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        bpr_sign: BprSign::parse(&a.bpr_sign).ok_or_else(|| CliError::Usage(format!("unknown --bpr-sign {}", a.bpr_sign)))?,
        ere: EreConfig {
            mode,
            k: a.k,
            g: a.g,
            scale_by_sqrt_d: a.scale_attention,
            ..EreConfig::default()
        },
        n_emb: a.n_emb,
        seed: a.seed,
        freeze_embeddings_in_l2: !a.no_freeze,
        l2_loss: L2Loss::parse(&a.l2_loss).ok_or_else(|| CliError::Usage(format!("unknown --l2-loss {}", a.l2_loss)))?,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{:02x}", b);
        s
    })
}

fn load_kg(path: &Path) -> Result<(CwkgStore, String), CliError> {
    let bytes = fs::read(path).map_err(|e| io(path, e))?;
    let text = String::from_utf8(bytes).map_err(|_| CliError::Data(format!("{}: not UTF-8", path.display())))?;
    let store = kgfile::parse(&text).map_err(|e| CliError::Data(format!("{}: {}", path.display(), e)))?;
    Ok((store, sha256_hex(text.as_bytes())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io(path, e))
}

fn read_kv(path: &Path) -> Result<HashMap<String, String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Data(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

const CHECKPOINT: &str = "checkpoint.bin";
const MANIFEST: &str = "manifest.txt";
const METRICS: &str = "metrics.txt";
const REPORT: &str = "report.txt";

fn cmd_synth(
    waveforms: usize,
    environments: usize,
    seed: u64,
    oracle: Option<&Path>,
    output: &Path,
) -> Result<(), CliError> {
    let cfg = match oracle {
        Some(p) => OracleConfig::parse(&fs::read_to_string(p).map_err(|e| io(p, e))?)?,
        None => OracleConfig::default(),
    };
    let corpus = synth::generate(waveforms, environments, &cfg, &GeneratorConfig::default(), seed)?;
    kgfile::save(&corpus.store, output)?;
    let s = &corpus.store;
    println!("wrote {}", output.display());
    println!("seed={}", seed);
    println!("waveforms={}", s.heads(EntityKind::WaveformHead).len());
    println!("environments={}", s.heads(EntityKind::EnvironmentHead).len());
    println!(
        "tail_values={}",
        s.entities().iter().filter(|e| e.kind == EntityKind::TailValue).count()
    );
    println!("triples={}", s.triples().len());
    println!("ewbg_density={:.4}", corpus.density());
    Ok(())
}

fn manifest_text(cfg: &TrainConfig, kg: &Path, kg_sha: &str, split: (u32, u32)) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "kg={}", kg.display());
    let _ = writeln!(out, "kg_sha256={}", kg_sha);
    let _ = writeln!(out, "split={}:{}", split.0, split.1);
    for (k, v) in cfg.to_kv() {
        let _ = writeln!(out, "{}={}", k, v);
    }
    out
}

fn cmd_train(kg: &Path, out_dir: &Path, args: &TrainArgs) -> Result<(), CliError> {
    let cfg = train_config(args)?;
    let split = parse_split(&args.split)?;
    let (store, sha) = load_kg(kg)?;
    let (_, test) = store.split_ewbg(split, cfg.seed)?;
    fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    let out = train::train_with(&store, &test, &cfg, |s| {
        if s.epoch % 10 == 0 {
            eprintln!(
                "epoch {} L1 {:.4} L2 {:.4} hit@1 {}",
                s.epoch,
                s.l1,
                s.l2,
                s.hit_at_1.map_or_else(|| "-".into(), |h| format!("{:.4}", h))
            );
        }
    })?;
    out.model.save(&store, &out_dir.join(CHECKPOINT))?;
    write(&out_dir.join(MANIFEST), &manifest_text(&cfg, kg, &sha, split))?;
    write(&out_dir.join(METRICS), &out.report.metrics_text())?;
    write(&out_dir.join(REPORT), &out.report.text())?;
    print!("{}", out.report.metrics_text());
    Ok(())
}

fn load_trained(kg: &Path, dir: &Path) -> Result<(CwkgStore, Model, HashMap<String, String>), CliError> {
    let (store, sha) = load_kg(kg)?;
    let manifest = read_kv(&dir.join(MANIFEST))?;
    if manifest.get("kg_sha256").is_some_and(|m| *m != sha) {
        return Err(CliError::Data(format!("{} does not match the graph the model was trained on", kg.display())));
    }
    let cfg = TrainConfig::from_kv(&manifest)?;
    let model = Model::load(&store, cfg.model_config(), &dir.join(CHECKPOINT))?;
    Ok((store, model, manifest))
}

fn cmd_evaluate(kg: &Path, dir: &Path, k_list: &str) -> Result<(), CliError> {
    let ks: Vec<usize> = parse_list("k", k_list)?;
    let (store, model, manifest) = load_trained(kg, dir)?;
    let split = parse_split(manifest.get("split").map_or("10:2", String::as_str))?;
    let seed: u64 = manifest
        .get("seed")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| CliError::Data("manifest lacks seed".into()))?;
    let (_, test) = store.split_ewbg(split, seed)?;
    let h = train::evaluate(&model, &test, &store, &ks)?;
    println!("environments={}", h.n_all);
    println!("hits={}", h.n_hit);
    for (k, v) in &h.hit_at_k {
        println!("hit@{}={:.6}", k, v);
    }
    Ok(())
}

fn cmd_recommend(kg: &Path, dir: &Path, env: &Path, top_k: usize) -> Result<(), CliError> {
    let (store, model, _) = load_trained(kg, dir)?;
    let text = fs::read_to_string(env).map_err(|e| io(env, e))?;
    let pairs = train::parse_env_description(&text, &store)
        .map_err(|e| CliError::Data(format!("{}: {}", env.display(), e)))?;
    let rec = train::recommend(&pairs, &model, &store, top_k)?;
    if rec.clamped {
        eprintln!("warning: --top-k {} exceeds {} waveforms; showing all", top_k, model.m());
    }
    println!("{:<6}{:<12}{:>12}", "rank", "waveform", "probability");
    for (i, (id, p)) in rec.ranked.iter().enumerate() {
        println!("{:<6}{:<12}{:>12.6}", i + 1, id, p);
    }
    Ok(())
}

fn cmd_ablate(kg: &Path, out_dir: &Path, seeds: &str, sweeps: &str, args: &TrainArgs) -> Result<(), CliError> {
    let base = train_config(args)?;
    let split = parse_split(&args.split)?;
    let seeds: Vec<u64> = parse_list("seed", seeds)?;
    let sweeps: Vec<Sweep> = sweeps
        .split(',')
        .map(|s| Sweep::parse(s.trim()).ok_or_else(|| CliError::Usage(format!("unknown sweep {:?}", s))))
        .collect::<Result<_, _>>()?;
    let (store, _) = load_kg(kg)?;
    fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    let report = ablation::run_ablation(&store, &base, split, &seeds, &sweeps, |cell, seed, run| {
        eprintln!("{} seed {}: {:?}", cell, seed, run);
    })?;
    let tables = report.tables();
    write(&out_dir.join("tables.txt"), &tables)?;
    write(&out_dir.join(METRICS), &report.metrics_text())?;
    print!("{}", tables);
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            waveforms,
            environments,
            seed,
            oracle_config,
            output,
        } => cmd_synth(waveforms as usize, environments as usize, seed, oracle_config.as_deref(), &output),
        Command::Train { kg, out_dir, args } => cmd_train(&kg, &out_dir, &args),
        Command::Evaluate {
            kg,
            checkpoint_dir,
            k_list,
        } => cmd_evaluate(&kg, &checkpoint_dir, &k_list),
        Command::Recommend {
            kg,
            checkpoint_dir,
            env,
            top_k,
        } => cmd_recommend(&kg, &checkpoint_dir, &env, top_k),
        Command::Ablate {
            kg,
            out_dir,
            seeds,
            sweeps,
            args,
        } => cmd_ablate(&kg, &out_dir, &seeds, &sweeps, &args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
