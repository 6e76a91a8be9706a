//! How the local tolerance controls the work of one client subproblem.
//!
//! `cargo run --example inexact_inner_solver`

use fedadmm::data::{generate_linreg, GenSpec};
use fedadmm::fedadmm::{aggregate, init_run, kappa_bound, local_solve_inexact, AdmmConfig};
use fedadmm::participation::RoundClock;
use fedadmm::WeightScheme;

fn main() -> fedadmm::Result<()> {
    let data = generate_linreg(&GenSpec::new(5, 8, 11))?;
    let cfg = AdmmConfig::theory(1);
    let (server, clients) = init_run(&data, &WeightScheme::uniform(data.m()), &cfg, RoundClock::new(1)?)?;
    let xbar = aggregate(&clients, server.sigma);
    let shard = &data.shards()[0];

    let exact = {
        let mut c = clients[0].clone();
        c.eps = 1e-28;
        local_solve_inexact(&c, &xbar, shard, data.kind(), &cfg.inner)?.x
    };
    let dist_sq = {
        let d = &exact - &xbar;
        d.dot(&d)
    };

    println!("{:>10}  {:>6}  {:>6}  {:>12}", "eps", "steps", "bound", "residual^2");
    for exponent in [0, -2, -4, -6, -8, -10, -12] {
        let mut c = clients[0].clone();
        c.eps = 10f64.powi(exponent);
        let sol = local_solve_inexact(&c, &xbar, shard, data.kind(), &cfg.inner)?;
        let bound = kappa_bound(c.alpha, c.r, c.sigma, cfg.inner.varrho, dist_sq, c.eps);
        println!("{:>10.0e}  {:>6}  {:>6}  {:>12.3e}", c.eps, sol.iters, bound + 1, sol.residual_sq);
    }
    Ok(())
}
