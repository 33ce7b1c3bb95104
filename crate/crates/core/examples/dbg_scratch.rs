use instanton_core::pmp::transversality_residuals;
use instanton_core::scenarios::{two_body_conjunction, ConjunctionConfig};
use instanton_core::*;

fn main() {
    let sc = two_body_conjunction(ConjunctionConfig::default()).unwrap();
    // First: fixed-T at N=150 to check the AL fixes.
    let opts = SolverOptions { nodes: 150, ..sc.solver.clone() };
    let t0 = std::time::Instant::now();
    let ml = solve_ml(&sc.model, &sc.unsafe_set, sc.dist.mean(),
        TimeWindow::fixed(4500.0).unwrap(), &opts).unwrap();
    eprintln!("fixed N=150: {:?} S {:.6e} alpha {:.3e} stat {:.2e} c/scale {:.2e} inner {} outer {} in {:?}",
        ml.status, ml.action, ml.alpha, ml.stationarity, ml.constraint_value / ml.constraint_scale,
        ml.inner_iterations, ml.outer_iterations, t0.elapsed());

    // Free-T ML at full default N=1200.
    let t0 = std::time::Instant::now();
    let ml = solve_ml(&sc.model, &sc.unsafe_set, sc.dist.mean(), sc.window, &sc.solver).unwrap();
    eprintln!("free N=1200 ML: {:?} T {:.1} S {:.6e} alpha {:.3e} stat {:.2e} inner {} in {:?}",
        ml.status, ml.time, ml.action, ml.alpha, ml.stationarity, ml.inner_iterations, t0.elapsed());
    let rep = transversality_residuals(&sc.model, &ml, None, &sc.unsafe_set).unwrap();
    eprintln!("ML residuals: 30b {:.2e} cs {:.2e} wcons {:.2e} reint {:.2e} |H|res {:.2e} interior {}",
        rep.final_transversality, rep.complementary_slackness, rep.deviation_consistency,
        rep.adjoint_reintegration, rep.hamiltonian_residual, rep.final_time_interior);
}
