//! Runs the trap-grid comparison and prints per-seed returns.
//!
//!     cargo run --release --example trap_benchmark

use geo_iql::benchmark::{run_benchmark, BenchmarkConfig};

fn main() -> geo_iql::Result<()> {
    let report = run_benchmark(&BenchmarkConfig::trap_grid())?;
    for m in &report.modes {
        println!(
            "{:8} return {:7.2} ± {:5.2}  fracture {:.3}  per seed {:?}",
            m.mode.to_string(),
            m.mean_return,
            m.std_return,
            m.fracture_rate,
            m.seed_returns
        );
    }
    Ok(())
}
