//! Seeded IQL versus Geo-IQL comparison on a fractured grid benchmark.

use serde::{Deserialize, Serialize};

use crate::dataset::compute_norm_stats;
use crate::envbench::{generate_fractured, rollout, Env, GenerateConfig, GridMdp};
use crate::error::Result;
use crate::geometry::{precompute, PrecomputeConfig};
use crate::metrics::mean_std;
use crate::trainer::{train, Mode, Policy, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub env: GridMdp,
    pub generate: GenerateConfig,
    pub precompute: PrecomputeConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub modes: Vec<Mode>,
    pub eval_episodes: usize,
}

impl BenchmarkConfig {
    /// The trap-grid comparison at desk scale.
    pub fn trap_grid() -> Self {
        BenchmarkConfig {
            env: GridMdp::trap_grid(),
            generate: GenerateConfig::trap_grid(0),
            precompute: PrecomputeConfig { lambda_base: 0.1, ..Default::default() },
            train: TrainConfig {
                expectile: 0.9,
                hidden: vec![64, 64],
                batch_size: 64,
                total_steps: 30_000,
                log_interval: 5_000,
                ..Default::default()
            },
            seeds: (0..5).collect(),
            modes: vec![Mode::Iql, Mode::GeoIql],
            eval_episodes: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub seed_returns: Vec<f64>,
    pub seed_fracture_rates: Vec<f64>,
    pub mean_return: f64,
    pub std_return: f64,
    pub fracture_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub modes: Vec<ModeSummary>,
}

impl BenchmarkReport {
    pub fn mode(&self, mode: Mode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }
}

/// Each seed draws its own dataset and initialisation; every mode sees the
/// same dataset and evaluation noise for that seed.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    let env = Env::Grid(cfg.env.clone());
    let mut per_mode: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); cfg.modes.len()];
    for &seed in &cfg.seeds {
        let ds = generate_fractured(&env, &GenerateConfig { seed, ..cfg.generate.clone() })?;
        let norm = compute_norm_stats(&ds);
        let table = precompute(&ds, &norm, &cfg.precompute)?;
        for (m, &mode) in cfg.modes.iter().enumerate() {
            let tc = TrainConfig { mode, seed, ..cfg.train.clone() };
            let out = train(&ds, (mode == Mode::GeoIql).then_some(&table), &tc)?;
            let policy = Policy::from_checkpoint(&out.final_checkpoint)?;
            let stats = rollout(&env, &mut |s| policy.greedy(s), cfg.eval_episodes, seed.wrapping_add(1_000_000), &cfg.generate.fracture)?;
            per_mode[m].0.push(stats.mean_return());
            per_mode[m].1.push(stats.fracture_rate());
        }
    }
    let modes = cfg
        .modes
        .iter()
        .zip(per_mode)
        .map(|(&mode, (returns, rates))| {
            let (mean_return, std_return) = mean_std(&returns);
            let fracture_rate = rates.iter().sum::<f64>() / rates.len() as f64;
            ModeSummary { mode, seed_returns: returns, seed_fracture_rates: rates, mean_return, std_return, fracture_rate }
        })
        .collect();
    Ok(BenchmarkReport { modes })
}
