//! FedADMM against FedAvg, FedProx, FedAlt and FedSim on one instance.
//!
//! Baselines stop once their loss is within a relative gap of the FedADMM
//! optimum, so FedADMM always runs first.
//!
//! `cargo run --release --example baseline_comparison`

use fedadmm::data::{generate_linreg, GenSpec};
use fedadmm::harness::{run_baseline, run_fedadmm, RunOptions};
use fedadmm::AlgorithmKind;

fn main() -> fedadmm::Result<()> {
    let data = generate_linreg(&GenSpec::new(20, 20, 5))?;
    let mut opts = RunOptions::experiment(1, 0.5, 5, data.kind());
    opts.max_iters = 3000;

    let admm = run_fedadmm(&data, &opts)?;
    let f_ref = admm.summary.f_final.expect("reference loss");
    println!("{:<8} {:<20} {:>6} {:>16}", "method", "status", "CR", "f");
    println!("{:<8} {:<20} {:>6} {:>16.10}", "fedadmm", admm.summary.status.as_str(), admm.summary.cr, f_ref);
    for kind in [AlgorithmKind::FedAvg, AlgorithmKind::FedProx, AlgorithmKind::FedAlt, AlgorithmKind::FedSim] {
        let out = run_baseline(&data, kind, &opts, f_ref)?;
        let f = out.trace.last().map_or(f64::NAN, |r| r.f_global);
        println!("{:<8} {:<20} {:>6} {:>16.10}", kind.as_str(), out.summary.status.as_str(), out.summary.cr, f);
    }
    Ok(())
}
