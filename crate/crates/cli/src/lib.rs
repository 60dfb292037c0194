//! Config parsing and the `mdpo` subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mdpo_core::envs::{make_env, EnvKind};
use mdpo_core::metrics::{model_correspondence, read_metrics_csv, CorrespondenceMatrices};
use mdpo_core::model::LatentKind;
use mdpo_core::trainer::{train, train_with, Algorithm, Precision, RunConfig};
use mdpo_core::verify::{run_verify, VerifyConfig};
use mdpo_core::Scalar;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root.
pub const OUT_ROOT_VAR: &str = "MDPO_OUT_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<mdpo_core::Error> for CliError {
    fn from(e: mdpo_core::Error) -> Self {
        let io = match &e {
            mdpo_core::Error::Io { .. } => true,
            mdpo_core::Error::Stage { source, .. } => matches!(**source, mdpo_core::Error::Io { .. }),
            _ => false,
        };
        if io {
            CliError::Io(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "mdpo", version, about = "Decentralized model-based multi-agent policy optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandTag {
    GenEnv,
    Train,
    Batch,
    Correspond,
    Verify,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the pinned environment spec and print its checksum.
    GenEnv(Flags),
    /// Train one run.
    Train(Flags),
    /// Train one run per seed and summarize across seeds.
    Batch(Flags),
    /// Train, then tabulate latent vs. other-agent joint action per agent.
    Correspond(Flags),
    /// Latent-correspondence experiment on the small preset game.
    Verify(Flags),
}

impl Command {
    pub fn split(&self) -> (CommandTag, &Flags) {
        match self {
            Command::GenEnv(f) => (CommandTag::GenEnv, f),
            Command::Train(f) => (CommandTag::Train, f),
            Command::Batch(f) => (CommandTag::Batch, f),
            Command::Correspond(f) => (CommandTag::Correspond, f),
            Command::Verify(f) => (CommandTag::Verify, f),
        }
    }
}

/// Flags shared by every subcommand. Each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Config file (TOML, or JSON when the name ends in .json).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// mdpo | mdpo-nopred | ippo
    #[arg(long = "algo")]
    pub algorithm: Option<String>,
    /// stochastic-game | nonstationary | coopnav | polygon
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated seeds for `batch` and `verify`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub env_seed: Option<u64>,
    #[arg(long)]
    pub rounds: Option<u64>,
    #[arg(long)]
    pub steps_per_round: Option<usize>,
    /// f32 | f64
    #[arg(long)]
    pub precision: Option<String>,
    /// Output root; defaults to $MDPO_OUT_ROOT, then ./runs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Parallel seeds in `batch`.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Maps mdpo to mdpo-nopred.
    #[arg(long)]
    pub no_prediction: bool,
}

/// On-disk schema: flat, typed keys. Only `algorithm` and `env` are required
/// (for commands that train); everything else has a default.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub algorithm: Option<Algorithm>,
    pub env: Option<EnvKind>,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub env_seed: Option<u64>,
    pub rounds: Option<u64>,
    pub steps_per_round: Option<usize>,
    pub precision: Option<Precision>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub latent: Option<LatentKind>,
    pub c_obs: Option<f64>,
    pub l: Option<usize>,
    pub h: Option<usize>,
    pub k: Option<usize>,
    pub model_steps: Option<usize>,
    pub predictor_steps: Option<usize>,
    pub epochs: Option<usize>,
    pub minibatch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub command: CommandTag,
    pub run: RunConfig,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub out_root: PathBuf,
}

fn read_file_config(path: &Path) -> CliResult<FileConfig> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn parse_flag<T: std::str::FromStr<Err = mdpo_core::Error>>(key: &str, v: &Option<String>) -> CliResult<Option<T>> {
    v.as_deref().map(|s| s.parse::<T>().map_err(|e| CliError::Validation(format!("{key}: {e}")))).transpose()
}

fn invalid(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("{key}: {msg}"))
}

/// Merges the config file and flags, then validates everything before any
/// compute.
pub fn parse_config(command: CommandTag, flags: &Flags) -> CliResult<CliConfig> {
    let mut f = match &flags.config {
        Some(p) => read_file_config(p)?,
        None => FileConfig::default(),
    };
    if let Some(a) = parse_flag::<Algorithm>("algorithm", &flags.algorithm)? {
        f.algorithm = Some(a);
    }
    if let Some(e) = parse_flag::<EnvKind>("env", &flags.env)? {
        f.env = Some(e);
    }
    if let Some(p) = parse_flag::<Precision>("precision", &flags.precision)? {
        f.precision = Some(p);
    }
    macro_rules! over {
        ($($k:ident),*) => { $( if flags.$k.is_some() { f.$k = flags.$k.clone(); } )* };
    }
    over!(seed, seeds, env_seed, rounds, steps_per_round, out, jobs);
    if flags.no_prediction && f.algorithm == Some(Algorithm::Mdpo) {
        f.algorithm = Some(Algorithm::MdpoNopred);
    }
    build(command, &f)
}

fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn build(command: CommandTag, f: &FileConfig) -> CliResult<CliConfig> {
    let trains = matches!(command, CommandTag::Train | CommandTag::Batch | CommandTag::Correspond);
    let algorithm = match (f.algorithm, trains) {
        (Some(a), _) => a,
        (None, true) => return Err(invalid("algorithm", "missing required key")),
        (None, false) => Algorithm::Mdpo,
    };
    let env = match (f.env, command) {
        (Some(e), _) => e,
        (None, CommandTag::Verify) => EnvKind::StochasticGame,
        (None, _) => return Err(invalid("env", "missing required key")),
    };
    let seed = f.seed.unwrap_or(0);
    let seeds = f.seeds.clone().unwrap_or_else(|| vec![seed]);
    if seeds.is_empty() {
        return Err(invalid("seeds", "at least one seed is required"));
    }
    let jobs = f.jobs.unwrap_or(1);
    if jobs == 0 {
        return Err(invalid("jobs", "must be at least 1"));
    }
    let out_root = f.out.clone().unwrap_or_else(default_out_root);
    let mut run = RunConfig::new(algorithm, env, seed, f.rounds.unwrap_or(300), PathBuf::new());
    run.env_seed = f.env_seed.unwrap_or(0);
    run.precision = f.precision.unwrap_or_default();
    if let Some(s) = f.steps_per_round {
        if s == 0 || s % mdpo_core::envs::EPISODE_LEN != 0 {
            return Err(invalid("steps_per_round", format!("{s} is not a positive multiple of 40")));
        }
        run.steps_per_round = s;
    }
    if let Some(v) = f.latent {
        run.model.latent = v;
    }
    if let Some(v) = f.c_obs {
        if !(v > 0.0 && v.is_finite()) {
            return Err(invalid("c_obs", format!("{v} must be positive")));
        }
        run.model.c_obs = v;
    }
    for (key, val, slot, min) in [
        ("l", f.l, &mut run.model.l, 2),
        ("h", f.h, &mut run.model.h, 1),
        ("k", f.k, &mut run.model.k, 0),
        ("model_steps", f.model_steps, &mut run.model.model_steps, 0),
        ("predictor_steps", f.predictor_steps, &mut run.model.predictor_steps, 0),
        ("epochs", f.epochs, &mut run.ppo.epochs, 1),
        ("minibatch", f.minibatch, &mut run.ppo.minibatch, 1),
    ] {
        if let Some(v) = val {
            if v < min {
                return Err(invalid(key, format!("{v} is below the minimum {min}")));
            }
            *slot = v;
        }
    }
    run.out_dir = run_dir(&out_root, &run);
    run.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(CliConfig { command, run, seeds, jobs, out_root })
}

/// `<root>/<env>-<algorithm>-seed<seed>`.
pub fn run_dir(root: &Path, run: &RunConfig) -> PathBuf {
    root.join(format!("{}-{}-seed{}", run.env, run.algorithm, run.seed))
}

/// The fully populated flat config, suitable for re-parsing.
pub fn echo(cfg: &CliConfig) -> FileConfig {
    let r = &cfg.run;
    FileConfig {
        algorithm: Some(r.algorithm),
        env: Some(r.env),
        seed: Some(r.seed),
        seeds: Some(cfg.seeds.clone()),
        env_seed: Some(r.env_seed),
        rounds: Some(r.rounds),
        steps_per_round: Some(r.steps_per_round),
        precision: Some(r.precision),
        out: Some(cfg.out_root.clone()),
        jobs: Some(cfg.jobs),
        latent: Some(r.model.latent),
        c_obs: Some(r.model.c_obs),
        l: Some(r.model.l),
        h: Some(r.model.h),
        k: Some(r.model.k),
        model_steps: Some(r.model.model_steps),
        predictor_steps: Some(r.model.predictor_steps),
        epochs: Some(r.ppo.epochs),
        minibatch: Some(r.ppo.minibatch),
    }
}

pub fn reparse(command: CommandTag, f: &FileConfig) -> CliResult<CliConfig> {
    build(command, f)
}

fn write_echo(cfg: &CliConfig, dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let text = toml::to_string(&echo(cfg)).map_err(|e| CliError::Runtime(e.to_string()))?;
    let path = dir.join("config.toml");
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

fn with_seed(cfg: &CliConfig, seed: u64) -> CliConfig {
    let mut c = cfg.clone();
    c.run.seed = seed;
    c.run.out_dir = run_dir(&c.out_root, &c.run);
    c
}

pub fn cmd_gen_env(cfg: &CliConfig) -> CliResult<PathBuf> {
    let env = make_env(cfg.run.env, cfg.run.env_seed)?;
    fs::create_dir_all(&cfg.out_root).map_err(|e| io_err(&cfg.out_root, e))?;
    let path = cfg.out_root.join(format!("{}-env{}.json", cfg.run.env, cfg.run.env_seed));
    fs::write(&path, env.pinned_json()?).map_err(|e| io_err(&path, e))?;
    println!("{} {}", path.display(), env.checksum());
    Ok(path)
}

pub fn cmd_train(cfg: &CliConfig) -> CliResult<PathBuf> {
    write_echo(cfg, &cfg.run.out_dir)?;
    train(&cfg.run)?;
    Ok(cfg.run.out_dir.clone())
}

/// Per-round mean and population std of every metric column across runs.
pub fn summarize(files: &[PathBuf], out: &Path) -> CliResult<()> {
    let mut header: Option<Vec<String>> = None;
    let mut tables = Vec::new();
    for f in files {
        let (h, rows) = read_metrics_csv(f)?;
        if header.as_ref().is_some_and(|x| *x != h) {
            return Err(CliError::Runtime(format!("{} has a different column layout", f.display())));
        }
        header = Some(h);
        tables.push(rows);
    }
    let header = header.ok_or_else(|| CliError::Runtime("no runs to summarize".into()))?;
    let mut w = csv::Writer::from_path(out).map_err(|e| io_err(out, e))?;
    let mut cols = vec!["round".to_string()];
    for h in &header[1..] {
        cols.push(format!("{h}_mean"));
        cols.push(format!("{h}_std"));
    }
    w.write_record(&cols).map_err(|e| io_err(out, e))?;
    let n_rows = tables.iter().map(Vec::len).min().unwrap_or(0);
    for r in 0..n_rows {
        let mut rec = vec![tables[0][r][0].map(|v| (v as u64).to_string()).unwrap_or_default()];
        for c in 1..header.len() {
            let vals: Vec<f64> = tables.iter().filter_map(|t| t[r][c]).collect();
            if vals.is_empty() {
                rec.extend([String::new(), String::new()]);
                continue;
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            rec.extend([mean.to_string(), var.sqrt().to_string()]);
        }
        w.write_record(&rec).map_err(|e| io_err(out, e))?;
    }
    w.flush().map_err(|e| io_err(out, e))
}

#[derive(Debug)]
pub struct BatchReport {
    pub runs: Vec<(u64, CliResult<PathBuf>)>,
    pub summary: Option<PathBuf>,
}

/// One run per seed, up to `jobs` at a time. A failing seed does not stop
/// the others.
pub fn cmd_batch(cfg: &CliConfig) -> CliResult<BatchReport> {
    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build().map_err(|e| CliError::Runtime(e.to_string()))?;
    let runs: Vec<(u64, CliResult<PathBuf>)> =
        pool.install(|| cfg.seeds.par_iter().map(|&s| (s, cmd_train(&with_seed(cfg, s)))).collect());
    let ok: Vec<PathBuf> = runs.iter().filter_map(|(_, r)| r.as_ref().ok().map(|d| d.join("metrics.csv"))).collect();
    for (s, r) in &runs {
        if let Err(e) = r {
            eprintln!("seed {s} failed: {e}");
        }
    }
    let summary = if ok.is_empty() {
        None
    } else {
        let path = cfg.out_root.join(format!("{}-{}-summary.csv", cfg.run.env, cfg.run.algorithm));
        summarize(&ok, &path)?;
        Some(path)
    };
    Ok(BatchReport { runs, summary })
}

pub fn write_matrix(path: &Path, row_prefix: &str, col_prefix: &str, m: &[Vec<f64>]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    let cols = m.first().map_or(0, Vec::len);
    let mut header = vec![String::new()];
    header.extend((0..cols).map(|j| format!("{col_prefix}{j}")));
    w.write_record(&header).map_err(|e| io_err(path, e))?;
    for (i, row) in m.iter().enumerate() {
        let mut rec = vec![format!("{row_prefix}{i}")];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn write_correspondence(dir: &Path, prefix: &str, m: &CorrespondenceMatrices) -> CliResult<()> {
    write_matrix(&dir.join(format!("{prefix}z_given_a.csv")), "a", "z", &m.z_given_a)?;
    write_matrix(&dir.join(format!("{prefix}a_given_z.csv")), "z", "a", &m.a_given_z)
}

fn correspond_with<T: Scalar>(cfg: &CliConfig) -> CliResult<Vec<CorrespondenceMatrices>> {
    let run = &cfg.run;
    if !run.algorithm.model_based() {
        return Err(invalid("algorithm", "correspond needs a model-based algorithm"));
    }
    if run.env != EnvKind::StochasticGame {
        return Err(invalid("env", "correspond needs other agents' discrete joint actions (stochastic-game)"));
    }
    write_echo(cfg, &run.out_dir)?;
    let mut state = train_with::<T>(run)?;
    let (buffers, _) = state.policy_rollout(run)?;
    let dir = run.out_dir.join("correspondence");
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let n_joint = mdpo_core::envs::tabular::STOCHASTIC_GAME_ACTIONS.pow(state.agents.len() as u32 - 1);
    let mut out = Vec::new();
    for (a, data) in state.agents.iter().zip(&buffers) {
        let model = a.model.as_ref().expect("model-based run");
        let mut rng = mdpo_core::rng::stream(a.seed, "correspond", a.index as u64, run.rounds);
        let m = model_correspondence(model, data, n_joint, &mut rng)?;
        write_correspondence(&dir, &format!("agent{}_", a.index), &m)?;
        out.push(m);
    }
    Ok(out)
}

pub fn cmd_correspond(cfg: &CliConfig) -> CliResult<Vec<CorrespondenceMatrices>> {
    match cfg.run.precision {
        Precision::F32 => correspond_with::<f32>(cfg),
        Precision::F64 => correspond_with::<f64>(cfg),
    }
}

/// Runs the correspondence experiment once per seed; returns the verdicts.
pub fn cmd_verify(cfg: &CliConfig) -> CliResult<Vec<(u64, bool)>> {
    let mut verdicts = Vec::new();
    for &seed in &cfg.seeds {
        let res = run_verify(&VerifyConfig { seed, ..Default::default() })?;
        let dir = cfg.out_root.join(format!("verify-seed{seed}"));
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        write_correspondence(&dir, "", &res.matrices)?;
        let trace = dir.join("loss_trace.csv");
        let text: String = std::iter::once("step,loss\n".to_string())
            .chain(res.loss_trace.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")))
            .collect();
        fs::write(&trace, text).map_err(|e| io_err(&trace, e))?;
        println!("seed {seed}: argmax {:?} injective: {}", res.argmax, if res.injective { "pass" } else { "fail" });
        verdicts.push((seed, res.injective));
    }
    Ok(verdicts)
}

pub fn run(cli: Cli) -> CliResult<()> {
    let (tag, flags) = cli.command.split();
    let cfg = parse_config(tag, flags)?;
    match tag {
        CommandTag::GenEnv => cmd_gen_env(&cfg).map(drop),
        CommandTag::Train => cmd_train(&cfg).map(|d| println!("{}", d.display())),
        CommandTag::Batch => {
            let rep = cmd_batch(&cfg)?;
            if let Some(s) = &rep.summary {
                println!("{}", s.display());
            }
            match rep.runs.iter().find_map(|(_, r)| r.as_ref().err()) {
                Some(CliError::Io(m)) => Err(CliError::Io(m.clone())),
                Some(e) => Err(CliError::Runtime(format!("at least one seed failed: {e}"))),
                None => Ok(()),
            }
        }
        CommandTag::Correspond => cmd_correspond(&cfg).map(drop),
        CommandTag::Verify => cmd_verify(&cfg).map(drop),
    }
}
