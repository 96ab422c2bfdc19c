//! Active-set solver against exhaustive KKT enumeration.

mod common;

#[test]
fn solver_matches_brute_force_on_random_problems() {
    let stats = common::qp_oracle_sweep(0x5eed, 200);
    assert_eq!(stats.solved + stats.infeasible_agreed, 200);
    assert!(stats.infeasible_agreed >= 20, "want infeasible coverage");
    println!(
        "{} solved, worst |x - oracle| {:.2e}, worst kkt {:.2e}, {} infeasible agreed",
        stats.solved, stats.worst_dx, stats.worst_kkt, stats.infeasible_agreed
    );
}
