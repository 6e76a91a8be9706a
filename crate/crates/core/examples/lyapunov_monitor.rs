//! Step FedADMM by hand and watch the Lyapunov value decrease.
//!
//! `cargo run --release --example lyapunov_monitor`

use fedadmm::data::{generate_linreg, GenSpec};
use fedadmm::participation::{Policy, RoundClock, SelectionPlan};
use fedadmm::{AdmmConfig, FedAdmm, WeightScheme};

fn main() -> fedadmm::Result<()> {
    let data = generate_linreg(&GenSpec::new(20, 20, 2024))?;
    let k0 = 10;
    let clock = RoundClock::new(k0)?;
    let plan = SelectionPlan::new(Policy::UniformRho { rho: 0.5 }, data.m(), 7)?;
    let mut engine = FedAdmm::new(&data, &WeightScheme::uniform(data.m()), &AdmmConfig::theory(k0), clock)?;

    let mut omega = Vec::new();
    let mut previous = engine.lyapunov_value();
    let mut worst_increase = f64::NEG_INFINITY;
    for k in 0..500 {
        if clock.is_communication_step(k) {
            omega = plan.next_omega(clock.tau(k + 1));
        }
        let report = engine.advance(&omega)?;
        let value = engine.lyapunov_value();
        worst_increase = worst_increase.max(value - previous);
        if k % 50 == 49 {
            println!("k {:>4}  L {:.10}  inner steps {:>3}", k, value, report.inner_iters);
        }
        previous = value;
    }
    let res = engine.residuals()?;
    println!("largest single-step change: {worst_increase:.3e}");
    println!("stationarity residuals: {:.3e} {:.3e} {:.3e}", res.grad_max, res.consensus_max, res.dual_sum);
    println!("certificate violations: {}", engine.total_violations());
    Ok(())
}
