//! `geoiql` command line.
//!
//! Every subcommand accepts `--config FILE` (TOML, keys spelled like the
//! flags). Flags given on the command line win over the file. Each run writes a
//! JSON echo of the fully resolved settings next to its outputs.
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::boundcheck::{check_pessimism, estimate_constants, fit_qhat, sample_queries, BoundProblem, FitConfig};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::dataset::{compute_norm_stats, load_dataset, save_dataset, TransitionDataset};
use crate::envbench::{
    generate_fractured, optimal_grid_policy, random_policy, rollout, solve_tabular, Env, FractureRegion,
    GenerateConfig, GridMdp,
};
use crate::geometry::{load_table_for, precompute, save_table, DiscreteEmbedding, PrecomputeConfig};
use crate::metrics::{offline_report, online_report, q_improvement_curve, MetricsConfig};
use crate::trainer::{Mode, TrainConfig, TrainEvent, Trainer};

#[derive(Parser, Debug)]
#[command(name = "geoiql", version, about = "Offline RL with precomputed geometric pessimism penalties")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a GQD1 dataset and summarise it.
    Ingest(IngestArgs),
    /// Generate a fractured dataset from a synthetic environment.
    GenEnv(GenEnvArgs),
    /// Compute the per-row penalty table (GQP1).
    Precompute(PrecomputeArgs),
    /// Train iql, geo-iql or bc.
    Train(TrainArgs),
    /// Offline metrics on a dataset and/or rollouts in an environment.
    Eval(EvalArgs),
    /// Check the Lipschitz pessimism bound against exact Q* on a grid.
    BoundCheck(BoundCheckArgs),
    /// Turn a training run into CSV tables.
    PlotData(PlotDataArgs),
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `args` and runs the subcommand, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Ingest(a) => cmd_ingest(a),
        Command::GenEnv(a) => cmd_gen_env(a),
        Command::Precompute(a) => cmd_precompute(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::BoundCheck(a) => cmd_boundcheck(a),
        Command::PlotData(a) => cmd_plotdata(a),
    }
}

/// Overlays the flags that were given on top of the config file.
fn resolve<T: Serialize + DeserializeOwned>(flags: T, config: &Option<PathBuf>) -> CliResult<T> {
    let Some(path) = config else {
        return Ok(flags);
    };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let file: T = toml::from_str(&text).map_err(|e| usage(format!("bad config {}: {e}", path.display())))?;
    let mut base = serde_json::to_value(file).map_err(|e| CliError::Runtime(e.into()))?;
    let over = serde_json::to_value(flags).map_err(|e| CliError::Runtime(e.into()))?;
    if let (Some(b), Some(o)) = (base.as_object_mut(), over.as_object()) {
        for (k, v) in o {
            if !v.is_null() {
                b.insert(k.clone(), v.clone());
            }
        }
    }
    serde_json::from_value(base).map_err(|e| usage(format!("bad config {}: {e}", path.display())))
}

fn required<T: Clone>(v: &Option<T>, flag: &str) -> CliResult<T> {
    v.clone().ok_or_else(|| usage(format!("missing required option --{flag}")))
}

fn input_file(v: &Option<PathBuf>, flag: &str) -> CliResult<PathBuf> {
    let p = required(v, flag)?;
    if !p.is_file() {
        return Err(usage(format!("--{flag}: no such file {}", p.display())));
    }
    Ok(p)
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, v: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.into()))?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn ensure_parent(p: &Path) -> CliResult<()> {
    if let Some(d) = p.parent() {
        if !d.as_os_str().is_empty() {
            fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
        }
    }
    Ok(())
}

fn load_ds(p: &Path) -> CliResult<TransitionDataset> {
    Ok(load_dataset(p).with_context(|| format!("loading dataset {}", p.display()))?)
}

fn parse_factors(s: &str) -> CliResult<(usize, usize)> {
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| usage(format!("action factors '{s}' should look like 5x5")))?;
    let p = |t: &str| t.trim().parse::<usize>().map_err(|_| usage(format!("bad action factors '{s}'")));
    Ok((p(a)?, p(b)?))
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct IngestArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Summary JSON path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional canonical re-encoding of the dataset.
    #[arg(long)]
    pub canonical: Option<PathBuf>,
}

fn cmd_ingest(a: IngestArgs) -> CliResult<()> {
    let config = a.config.clone();
    let a = resolve(a, &config)?;
    let path = input_file(&a.dataset, "dataset")?;
    let out = required(&a.out, "out")?;
    let ds = load_ds(&path)?;
    let trajectories = ds.trajectories()?;
    let norm = compute_norm_stats(&ds);
    let r = ds.rewards();
    let summary = json!({
        "rows": ds.len(),
        "state_dim": ds.state_dim(),
        "action_space": ds.action_space(),
        "trajectories": trajectories.len(),
        "terminals": ds.terminals().iter().filter(|&&t| t).count(),
        "timeouts": ds.timeouts().iter().filter(|&&t| t).count(),
        "reward_min": r.iter().cloned().fold(f32::INFINITY, f32::min),
        "reward_max": r.iter().cloned().fold(f32::NEG_INFINITY, f32::max),
        "reward_mean": r.iter().map(|&x| x as f64).sum::<f64>() / r.len() as f64,
        "state_mean": norm.state_mean,
        "state_std": norm.state_std,
    });
    ensure_parent(&out)?;
    write_json(&out, &summary)?;
    if let Some(c) = &a.canonical {
        ensure_parent(c)?;
        save_dataset(&ds, c)?;
    }
    write_json(&with_suffix(&out, ".config.json"), &json!({ "command": "ingest", "dataset": path, "out": out, "canonical": a.canonical }))?;
    println!("rows={} state_dim={} trajectories={}", ds.len(), ds.state_dim(), trajectories.len());
    Ok(())
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct GenEnvArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// trap-grid or point-mass.
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub random_frac: Option<f64>,
    #[arg(long)]
    pub mediocre_frac: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Number of poisoned truncated trajectories; 0 disables them.
    #[arg(long)]
    pub poison_episodes: Option<usize>,
    /// `default` removes the environment's fracture region, `none` keeps everything.
    #[arg(long)]
    pub fracture: Option<String>,
    #[arg(long)]
    pub slip: Option<f64>,
    #[arg(long)]
    pub jitter: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Environment description written next to generated datasets and read back by `eval` and `bound-check`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvFile {
    pub env: Env,
    pub generate: GenerateConfig,
}

fn env_defaults(name: &str) -> CliResult<(Env, GenerateConfig)> {
    let env = Env::by_name(name).map_err(|e| usage(e.to_string()))?;
    let generate = match env {
        Env::Grid(_) => GenerateConfig::trap_grid(0),
        Env::PointMass(_) => GenerateConfig {
            fracture: FractureRegion::Box { low: [0.1, 0.1], high: [0.5, 0.5] },
            poison: Some(crate::envbench::Poison { episodes: 10, actions: vec![0] }),
            ..GenerateConfig::default()
        },
    };
    Ok((env, generate))
}

fn cmd_gen_env(a: GenEnvArgs) -> CliResult<()> {
    let config = a.config.clone();
    let a = resolve(a, &config)?;
    let name = a.env.clone().unwrap_or_else(|| "trap-grid".into());
    let out = required(&a.out, "out")?;
    let (mut env, mut g) = env_defaults(&name)?;
    if let Env::Grid(grid) = &mut env {
        if let Some(s) = a.slip {
            grid.slip = s;
        }
        if let Some(j) = a.jitter {
            grid.jitter = j;
        }
    } else if a.slip.is_some() || a.jitter.is_some() {
        return Err(usage("--slip and --jitter only apply to grid environments"));
    }
    env.validate().map_err(|e| usage(e.to_string()))?;
    g.seed = a.seed.unwrap_or(0);
    if let Some(n) = a.episodes {
        g.episodes = n;
    }
    if let Some(f) = a.random_frac {
        g.random_frac = f;
        g.mediocre_frac = a.mediocre_frac.unwrap_or(1.0 - f);
    } else if let Some(m) = a.mediocre_frac {
        g.mediocre_frac = m;
        g.random_frac = 1.0 - m;
    }
    if let Some(e) = a.epsilon {
        g.epsilon = e;
    }
    match a.poison_episodes {
        Some(0) => g.poison = None,
        Some(n) => {
            if let Some(p) = &mut g.poison {
                p.episodes = n;
            }
        }
        None => {}
    }
    match a.fracture.as_deref() {
        None | Some("default") => {}
        Some("none") => {
            g.fracture = FractureRegion::None;
            g.poison = None;
        }
        Some(o) => return Err(usage(format!("--fracture must be 'default' or 'none', got '{o}'"))),
    }
    if g.episodes == 0 {
        return Err(usage("--episodes must be positive"));
    }
    let ds = generate_fractured(&env, &g).map_err(|e| match e {
        crate::Error::InvalidArgument(m) => usage(m),
        other => other.into(),
    })?;
    ensure_parent(&out)?;
    save_dataset(&ds, &out)?;
    let file = EnvFile { env, generate: g };
    write_json(&with_suffix(&out, ".env.json"), &file)?;
    write_json(&with_suffix(&out, ".config.json"), &json!({ "command": "gen-env", "name": name, "env": file.env, "generate": file.generate, "out": out }))?;
    println!("rows={} trajectories={}", ds.len(), ds.trajectories()?.len());
    Ok(())
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct PrecomputeArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda_base: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// index or one-hot.
    #[arg(long)]
    pub discrete_embedding: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn cmd_precompute(a: PrecomputeArgs) -> CliResult<()> {
    let config = a.config.clone();
    let a = resolve(a, &config)?;
    let d = PrecomputeConfig::default();
    let cfg = PrecomputeConfig {
        k: a.k.unwrap_or(d.k),
        alpha: a.alpha.unwrap_or(d.alpha),
        lambda_base: a.lambda_base.unwrap_or(d.lambda_base),
        epsilon: a.epsilon.unwrap_or(d.epsilon),
        discrete_embedding: match a.discrete_embedding.as_deref() {
            None | Some("index") => DiscreteEmbedding::Index,
            Some("one-hot") => DiscreteEmbedding::OneHot,
            Some(o) => return Err(usage(format!("--discrete-embedding must be 'index' or 'one-hot', got '{o}'"))),
        },
    };
    if cfg.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(usage("--alpha must lie in (0, 1)"));
    }
    if !(cfg.lambda_base >= 0.0 && cfg.lambda_base.is_finite()) || !(cfg.epsilon > 0.0) {
        return Err(usage("--lambda-base must be non-negative and --epsilon positive"));
    }
    let path = input_file(&a.dataset, "dataset")?;
    let out = required(&a.out, "out")?;
    let ds = load_ds(&path)?;
    let norm = compute_norm_stats(&ds);
    let table = precompute(&ds, &norm, &cfg)?;
    ensure_parent(&out)?;
    save_table(&table, &out)?;
    write_json(&with_suffix(&out, ".config.json"), &json!({ "command": "precompute", "dataset": path, "out": out, "precompute": cfg }))?;
    println!(
        "N={} tau={:.6} sigma_mad={:.6} zero_penalty_fraction={:.4}",
        table.len(),
        table.stats.tau,
        table.stats.sigma_mad,
        table.zero_penalty_fraction()
    );
    Ok(())
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub penalties: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub expectile: Option<f64>,
    #[arg(long)]
    pub awr_beta: Option<f64>,
    #[arg(long)]
    pub awr_weight_cap: Option<f64>,
    #[arg(long)]
    pub target_soft_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub log_interval: Option<usize>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    #[arg(long)]
    pub mask_timeouts: Option<bool>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        mode: a.mode.unwrap_or(d.mode),
        gamma: a.gamma.unwrap_or(d.gamma),
        expectile: a.expectile.unwrap_or(d.expectile),
        awr_beta: a.awr_beta.unwrap_or(d.awr_beta),
        awr_weight_cap: a.awr_weight_cap.unwrap_or(d.awr_weight_cap),
        target_soft_rate: a.target_soft_rate.unwrap_or(d.target_soft_rate),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        total_steps: a.steps.unwrap_or(d.total_steps),
        seed: a.seed.unwrap_or(d.seed),
        hidden: a.hidden.clone().unwrap_or(d.hidden),
        learning_rate: a.learning_rate.unwrap_or(d.learning_rate),
        log_interval: a.log_interval.unwrap_or(d.log_interval),
        checkpoint_interval: a.checkpoint_interval.unwrap_or(d.checkpoint_interval),
        mask_timeouts: a.mask_timeouts.unwrap_or(d.mask_timeouts),
    }
}

pub const FINAL_CHECKPOINT: &str = "final.gqc";
pub const TRAIN_LOG: &str = "train_log.jsonl";

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:010}.gqc")
}

fn cmd_train(a: TrainArgs) -> CliResult<()> {
    let config = a.config.clone();
    let a = resolve(a, &config)?;
    let cfg = train_config(&a);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if cfg.mode == Mode::GeoIql && a.penalties.is_none() {
        return Err(usage("--mode geo-iql needs --penalties"));
    }
    let path = input_file(&a.dataset, "dataset")?;
    let out = required(&a.out, "out")?;
    let penalties = match &a.penalties {
        Some(_) => Some(input_file(&a.penalties, "penalties")?),
        None => None,
    };
    let ds = load_ds(&path)?;
    let table = match &penalties {
        Some(p) => Some(load_table_for(p, &ds).with_context(|| format!("loading penalties {}", p.display()))?),
        None => None,
    };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(
        &out.join("config.json"),
        &json!({ "command": "train", "dataset": path, "penalties": penalties, "out": out, "train": cfg }),
    )?;
    let mut trainer = Trainer::new(&ds, table.as_ref(), cfg)?;
    let log_path = out.join(TRAIN_LOG);
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut io_err: Option<anyhow::Error> = None;
    let last = trainer.run(&mut |ev| {
        let res: anyhow::Result<()> = match ev {
            TrainEvent::Log(r) => serde_json::to_string(r)
                .map_err(anyhow::Error::from)
                .and_then(|line| writeln!(log, "{line}").map_err(anyhow::Error::from)),
            TrainEvent::Checkpoint(c) => save_checkpoint(c, out.join(checkpoint_name(c.step))).map_err(anyhow::Error::from),
        };
        if let Err(e) = res {
            io_err = Some(e);
            return Err(crate::Error::Io(std::io::Error::other("write failed")));
        }
        Ok(())
    });
    if let Some(e) = io_err {
        return Err(CliError::Runtime(e));
    }
    let last = last?;
    log.flush().context("flushing training log")?;
    save_checkpoint(&last, out.join(FINAL_CHECKPOINT))?;
    println!("trained {} steps, final checkpoint {}", last.step, out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Offline metrics against this (discrete) dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Online rollouts in a named environment.
    #[arg(long)]
    pub env: Option<String>,
    /// Online rollouts in the environment described by a `.env.json` file.
    #[arg(long)]
    pub env_config: Option<PathBuf>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Number of evaluation seeds, starting at `--seed`.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Action factorisation such as 5x5.
    #[arg(long)]
    pub action_factors: Option<String>,
    #[arg(long)]
    pub terminal_window: Option<usize>,
    #[arg(long)]
    pub kl_smoothing: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn load_env(name: &Option<String>, file: &Option<PathBuf>) -> CliResult<Option<EnvFile>> {
    match (name, file) {
        (Some(_), Some(_)) => Err(usage("give either --env or --env-config, not both")),
        (Some(n), None) => {
            let (env, generate) = env_defaults(n)?;
            Ok(Some(EnvFile { env, generate }))
        }
        (None, Some(_)) => {
            let p = input_file(file, "env-config")?;
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            let f: EnvFile = serde_json::from_str(&text).map_err(|e| usage(format!("bad env config {}: {e}", p.display())))?;
            f.env.validate().map_err(|e| usage(e.to_string()))?;
            Ok(Some(f))
        }
        (None, None) => Ok(None),
    }
}

fn reference_returns(env: &Env, episodes: usize, seeds: &[u64]) -> CliResult<(f64, f64)> {
    let mut random = Vec::new();
    let mut expert = Vec::new();
    for &s in seeds {
        random.push(rollout(env, &mut random_policy(env, s), episodes, s, &FractureRegion::None)?.mean_return());
        let e = match env {
            Env::Grid(g) => {
                let sol = solve_tabular(&g.to_tabular(), 0.99)?;
                rollout(env, &mut optimal_grid_policy(g, &sol), episodes, s, &FractureRegion::None)?
            }
            Env::PointMass(p) => rollout(
                env,
                &mut |st| Ok(crate::trainer::Action::Continuous(p.controller(st).to_vec())),
                episodes,
                s,
                &FractureRegion::None,
            )?,
        };
        expert.push(e.mean_return());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((mean(&random), mean(&expert)))
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    let config = a.config.clone();
    let a = resolve(a, &config)?;
    let ck_path = input_file(&a.checkpoint, "checkpoint")?;
    let out = required(&a.out, "out")?;
    let env = load_env(&a.env, &a.env_config)?;
    if a.dataset.is_none() && env.is_none() {
        return Err(usage("eval needs --dataset and/or --env/--env-config"));
    }
    let ds_path = match &a.dataset {
        Some(_) => Some(input_file(&a.dataset, "dataset")?),
        None => None,
    };
    let mcfg = MetricsConfig {
        terminal_window: a.terminal_window.unwrap_or(5),
        kl_smoothing: a.kl_smoothing.unwrap_or(1e-6),
        action_factors: a.action_factors.as_deref().map(parse_factors).transpose()?,
    };
    let episodes = a.episodes.unwrap_or(100);
    let n_seeds = a.seeds.unwrap_or(5);
    if episodes == 0 || n_seeds == 0 {
        return Err(usage("--episodes and --seeds must be positive"));
    }
    let base = a.seed.unwrap_or(0);
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| base + i).collect();
    let ck = load_checkpoint(&ck_path).with_context(|| format!("loading checkpoint {}", ck_path.display()))?;
    let mut report = serde_json::Map::new();
    let mut csv = None;
    if let Some(p) = &ds_path {
        let ds = load_ds(p)?;
        let r = offline_report(&ck, &ds, &mcfg)?;
        csv = Some(format!("{}\n{}\n", r.csv_header(), r.csv_row()));
        report.insert("offline".into(), serde_json::to_value(&r).map_err(|e| CliError::Runtime(e.into()))?);
    }
    if let Some(f) = &env {
        let reference = reference_returns(&f.env, episodes, &seeds)?;
        let r = online_report(&f.env, &ck, episodes, &seeds, &f.generate.fracture, Some(reference))?;
        if csv.is_none() {
            csv = Some(format!(
                "mean_return,std_return,fracture_rate,normalized_score\n{},{},{},{}\n",
                r.mean_return,
                r.std_return,
                r.fracture_rate,
                r.normalized_score.unwrap_or(f64::NAN)
            ));
        }
        report.insert("online".into(), serde_json::to_value(&r).map_err(|e| CliError::Runtime(e.into()))?);
        report.insert("reference".into(), json!({ "random_return": reference.0, "expert_return": reference.1 }));
        println!("mean_return={:.4} std={:.4} fracture_rate={:.4}", r.mean_return, r.std_return, r.fracture_rate);
    }
    ensure_parent(&out)?;
    write_json(&out, &Value::Object(report))?;
    if let (Some(path), Some(text)) = (&a.csv, csv) {
        ensure_parent(path)?;
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    write_json(
        &with_suffix(&out, ".config.json"),
        &json!({
            "command": "eval", "checkpoint": ck_path, "dataset": ds_path, "env": env.as_ref().map(|e| &e.env),
            "fracture": env.as_ref().map(|e| &e.generate.fracture), "episodes": episodes, "seeds": seeds,
            "metrics": mcfg, "out": out, "csv": a.csv,
        }),
    )?;
    Ok(())
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct BoundCheckArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long)]
    pub env_config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Fixed penalty weight; defaults to the computed threshold times `--lambda-scale`.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lambda_scale: Option<f64>,
    /// Train the estimate towards `Q* + inflate` on the uncovered lattice pairs.
    #[arg(long)]
    pub inflate: Option<f64>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub min_distance: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub fit_steps: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn cmd_boundcheck(a: BoundCheckArgs) -> CliResult<()> {
    let config = a.config.clone();
    let a = resolve(a, &config)?;
    let env = load_env(&a.env, &a.env_config)?.ok_or_else(|| usage("bound-check needs --env or --env-config"))?;
    let Env::Grid(grid) = &env.env else {
        return Err(usage("bound-check needs a grid environment"));
    };
    let ds_path = input_file(&a.dataset, "dataset")?;
    let out = required(&a.out, "out")?;
    if a.lambda.is_some() && a.lambda_scale.is_some() {
        return Err(usage("give either --lambda or --lambda-scale, not both"));
    }
    let gamma = a.gamma.unwrap_or(0.99);
    let fit = FitConfig {
        hidden: a.hidden.clone().unwrap_or_else(|| FitConfig::default().hidden),
        steps: a.fit_steps.unwrap_or(FitConfig::default().steps),
        seed: a.seed.unwrap_or(0),
        ..FitConfig::default()
    };
    let n_queries = a.queries.unwrap_or(10_000);
    let min_distance = a.min_distance.unwrap_or(0.1);
    let inflate = a.inflate.unwrap_or(0.0);
    let ds = load_ds(&ds_path)?;
    let report = bound_check(grid, &ds, gamma, &fit, n_queries, min_distance, inflate, a.lambda, a.lambda_scale.unwrap_or(1.0))?;
    ensure_parent(&out)?;
    write_json(&out, &report)?;
    write_json(
        &with_suffix(&out, ".config.json"),
        &json!({
            "command": "bound-check", "env": env.env, "dataset": ds_path, "gamma": gamma, "fit": fit,
            "queries": n_queries, "min_distance": min_distance, "inflate": inflate, "lambda": a.lambda,
            "lambda_scale": a.lambda_scale.unwrap_or(1.0), "out": out,
        }),
    )?;
    println!("{}", report.summary_line());
    Ok(())
}

/// Fits the estimate, draws the queries and evaluates the bound at the requested weight.
#[allow(clippy::too_many_arguments)]
pub fn bound_check(
    grid: &GridMdp,
    ds: &TransitionDataset,
    gamma: f64,
    fit: &FitConfig,
    n_queries: usize,
    min_distance: f64,
    inflate: f64,
    lambda: Option<f64>,
    lambda_scale: f64,
) -> crate::Result<crate::boundcheck::BoundReport> {
    let (problem, _) = BoundProblem::from_grid(grid, ds, gamma)?;
    let queries = sample_queries(&problem, n_queries, min_distance, fit.seed)?;
    // uncovered lattice pairs lead the query list
    let uncovered = problem.in_data.iter().filter(|&&c| !c).count();
    let qhat = if inflate != 0.0 {
        fit_qhat(&problem, Some((&queries[..uncovered], inflate)), fit)?
    } else {
        fit_qhat(&problem, None, fit)?
    };
    let lambda = match lambda {
        Some(l) => l,
        None => estimate_constants(&qhat, &problem, &queries)?.lambda_threshold() * lambda_scale,
    };
    check_pessimism(&qhat, &problem, &queries, lambda)
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct PlotDataArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Training output directory.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Discrete dataset for the Q-improvement curve.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn cmd_plotdata(a: PlotDataArgs) -> CliResult<()> {
    let config = a.config.clone();
    let a = resolve(a, &config)?;
    let run = required(&a.run, "run")?;
    if !run.is_dir() {
        return Err(usage(format!("--run: no such directory {}", run.display())));
    }
    let log_path = run.join(TRAIN_LOG);
    if !log_path.is_file() {
        return Err(usage(format!("{} has no {TRAIN_LOG}", run.display())));
    }
    let out = required(&a.out, "out")?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut curve = String::from("step,loss_v,loss_q,loss_actor,mean_penalty_in_batch\n");
    let text = fs::read_to_string(&log_path).with_context(|| format!("reading {}", log_path.display()))?;
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: crate::trainer::LogRecord =
            serde_json::from_str(line).map_err(|e| anyhow!("{}:{}: {e}", log_path.display(), n + 1))?;
        curve.push_str(&format!("{},{},{},{},{}\n", r.step, r.loss_v, r.loss_q, r.loss_actor, r.mean_penalty_in_batch));
    }
    fs::write(out.join("training_curve.csv"), curve).context("writing training_curve.csv")?;
    let mut ckpts: Vec<PathBuf> = fs::read_dir(&run)
        .with_context(|| format!("listing {}", run.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("ckpt_") && n.ends_with(".gqc")))
        .collect();
    ckpts.sort();
    let mut rows = 0;
    if a.dataset.is_some() {
        let ds = load_ds(&input_file(&a.dataset, "dataset")?)?;
        if ckpts.is_empty() {
            return Err(usage(format!("{} holds no checkpoints", run.display())));
        }
        let series: Vec<Checkpoint> =
            ckpts.iter().map(|p| load_checkpoint(p).with_context(|| format!("loading {}", p.display()))).collect::<anyhow::Result<_>>()?;
        let pts = q_improvement_curve(&series, &ds)?;
        let mut csv = String::from("step,delta_q\n");
        for (s, d) in &pts {
            csv.push_str(&format!("{s},{d}\n"));
        }
        rows = pts.len();
        fs::write(out.join("q_improvement.csv"), csv).context("writing q_improvement.csv")?;
    }
    write_json(
        &out.join("config.json"),
        &json!({ "command": "plot-data", "run": run, "dataset": a.dataset, "checkpoints": ckpts, "out": out }),
    )?;
    println!("training_curve.csv written; q_improvement rows={rows}");
    Ok(())
}
