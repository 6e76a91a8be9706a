//! Train a federated least-squares model with FedADMM and print its trace.
//!
//! `cargo run --release --example linreg_fedadmm`

use fedadmm::data::{generate_linreg, GenSpec};
use fedadmm::harness::{run_fedadmm, RunOptions};

fn main() -> fedadmm::Result<()> {
    let data = generate_linreg(&GenSpec::new(20, 20, 2024))?;
    println!("{} clients, {} samples, {} features", data.m(), data.d(), data.n());

    let opts = RunOptions::experiment(10, 0.5, 7, data.kind());
    let out = run_fedadmm(&data, &opts)?;
    for r in out.trace.records.iter().step_by(20) {
        println!("k {:>5}  CR {:>4}  f {:.8}  |grad|^2 {:.3e}", r.k, r.cr_cumulative, r.f_global, r.grad_norm_sq);
    }
    let s = &out.summary;
    println!(
        "{} after {} iterations, {} communication rounds, {} inner steps",
        s.status.as_str(),
        s.iterations,
        s.cr,
        s.inner_iters_total
    );
    Ok(())
}
