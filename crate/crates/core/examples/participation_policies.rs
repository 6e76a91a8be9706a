//! Compare the three client participation policies on the same clients.
//!
//! `cargo run --example participation_policies`

use fedadmm::participation::{cover_probability, max_selection_gap, verify_cover, DelayModel, Policy, SelectionPlan};

fn show(name: &str, plan: &SelectionPlan, rounds: u64) {
    let omegas = plan.realize(rounds);
    println!("{name}");
    for (tau, omega) in omegas.iter().enumerate().take(4) {
        println!("  round {:>2}: {:?}", tau + 1, omega);
    }
    println!("  longest wait between selections: {} rounds", max_selection_gap(&omegas, plan.m()));
}

fn main() -> fedadmm::Result<()> {
    let m = 12;
    let rounds = 60;

    let uniform = SelectionPlan::new(Policy::UniformRho { rho: 0.25 }, m, 9)?;
    show("uniform, rho = 0.25", &uniform, rounds);

    let s0 = 4;
    let cover = SelectionPlan::new(Policy::CoverSchedule { s0 }, m, 9)?;
    show("cover schedule, s0 = 4", &cover, rounds);
    println!("  every window of {s0} rounds covers all clients: {}", verify_cover(&cover.realize(rounds), s0, m));

    let delays = DelayModel::Exponential { mean_min: 0.5, mean_max: 4.0 };
    let straggler = SelectionPlan::new(Policy::Straggler { m0: 3, delays }, m, 9)?;
    show("first 3 responders", &straggler, rounds);

    let sizes = vec![3; s0];
    println!("chance that {s0} uniform rounds of 3 cover {m} clients: {:.4}", cover_probability(m, &sizes));
    Ok(())
}
