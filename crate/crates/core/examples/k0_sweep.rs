//! Median communication rounds over a grid of aggregation periods.
//!
//! `cargo run --release --example k0_sweep`

use fedadmm::data::{generate_linreg, GenSpec};
use fedadmm::harness::{median_sweep, write_sweep_csv, RunOptions, SweepSpec};
use fedadmm::AlgorithmKind;

fn main() -> fedadmm::Result<()> {
    let spec = SweepSpec {
        grid_n: vec![10],
        grid_m: vec![10],
        grid_rho: vec![0.5],
        grid_k0: vec![1, 5, 10, 20],
        instances: 5,
        base_seed: 42,
        algorithms: vec![AlgorithmKind::FedAdmm],
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cells = median_sweep(
        &spec,
        workers,
        |n, m, seed| generate_linreg(&GenSpec::new(m, n, seed)),
        |rho, k0, seed| {
            let mut opts = RunOptions::experiment(k0, rho, seed, fedadmm::ModelKind::LinReg);
            opts.max_iters = 20_000;
            opts
        },
    )?;
    write_sweep_csv(&cells, std::io::stdout())?;
    Ok(())
}
