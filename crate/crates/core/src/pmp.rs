//! Maximum-principle checks for candidate extremals.
//!
//! A converged solution must satisfy, with multiplier `alpha >= 0` and the
//! convention that makes the maximizing condition `w = sigma^T lambda_nu`
//! hold together with the boundary conditions of a minimization with a
//! terminal constraint `f(phi(T)) <= 0`:
//!
//! * `lambda(0) = eps * grad S_0(phi(0))` (free initial state only),
//! * `lambda(T) = -alpha * grad f(phi(T))`,
//! * `alpha * f(phi(T)) = 0`,
//! * `H(phi(T), w(T), lambda(T)) = 0` when the hitting time is interior
//!   to its window,
//! * `w = sigma^T lambda_nu` along the path.
//!
//! All residuals are normalized by `1 +` the magnitudes of their terms so
//! tolerances are dimensionless.

use nalgebra::DVector;

use crate::action::InitialDistribution;
use crate::dynamics::{DynamicsModel, TimeGrid};
use crate::error::{Error, Result};
use crate::solver::VariationalSolution;
use crate::unsafe_set::UnsafeSet;

/// Adjoint trajectory on a grid; split `(lambda_eta, lambda_nu)` for
/// mechanical models.
#[derive(Debug, Clone)]
pub struct AdjointPath {
    pub grid: TimeGrid,
    pub states: Vec<DVector<f64>>,
}

impl AdjointPath {
    pub fn new(grid: TimeGrid, states: Vec<DVector<f64>>) -> Result<Self> {
        if states.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "adjoint has {} states for {} grid nodes",
                states.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, states })
    }
}

/// Scaled residuals of the necessary conditions for one solution.
#[derive(Debug, Clone)]
pub struct ResidualReport {
    /// `|lambda(0) - eps grad S_0(phi(0))|`, scaled; `None` for
    /// fixed-start solves where the condition does not apply.
    pub initial_transversality: Option<f64>,
    /// `|lambda(T) + alpha grad f(phi(T))|`, scaled.
    pub final_transversality: f64,
    /// Complementary slackness `|alpha f(phi(T))|`, scaled by the
    /// multiplier and the level-function magnitudes.
    pub complementary_slackness: f64,
    /// Hamiltonian value at the final time.
    pub hamiltonian_terminal: f64,
    /// `|H(T)|` scaled; meaningful as a pass/fail test only when the
    /// hitting time is interior to its window.
    pub hamiltonian_residual: f64,
    /// Largest scaled Hamiltonian magnitude across all nodes.
    pub hamiltonian_max: f64,
    /// `max_k |w_k - sigma^T lambda_nu(t_k)|`, scaled.
    pub deviation_consistency: f64,
    /// Worst relative mismatch between the stored adjoint and its
    /// re-integration from `lambda(0)` along the frozen path.
    pub adjoint_reintegration: f64,
    /// True when the initial state was free (posterior-mode solve).
    pub initial_state_free: bool,
    /// True when the hitting time is strictly inside its window.
    pub final_time_interior: bool,
}

impl ResidualReport {
    /// All applicable conditions below the given tolerances.
    pub fn passes(&self, tol_transversality: f64, tol_hamiltonian: f64, tol_reint: f64) -> bool {
        self.initial_transversality.map_or(true, |r| r < tol_transversality)
            && self.final_transversality < tol_transversality
            && self.complementary_slackness < tol_transversality
            && self.deviation_consistency < tol_transversality
            && self.adjoint_reintegration < tol_reint
            && (!self.final_time_interior || self.hamiltonian_residual < tol_hamiltonian)
    }
}

/// Variational Hamiltonian `H = -1/2 |w|^2 + lambda . (drift + sigma w)`.
///
/// For mechanical models the pairing term is
/// `lambda_eta . nu + lambda_nu . (b(eta) + sigma w)`.
pub fn hamiltonian(
    model: &DynamicsModel,
    x: &DVector<f64>,
    w: &DVector<f64>,
    lam: &DVector<f64>,
) -> Result<f64> {
    if x.len() != model.dim() || lam.len() != model.dim() || w.len() != model.dev_dim() {
        return Err(Error::Dimension(
            "hamiltonian arguments do not match the model dimensions".into(),
        ));
    }
    let velocity = model.drift(x)? + model.inject_deviation(w);
    Ok(-0.5 * w.norm_squared() + lam.dot(&velocity))
}

/// Integrates the adjoint equation `lambda' = -(grad b)^T lambda` forward
/// from `lam0` along the frozen solution path with fourth-order steps
/// (midpoint states by cubic Hermite interpolation).
pub fn integrate_adjoint(
    model: &DynamicsModel,
    solution: &VariationalSolution,
    lam0: &DVector<f64>,
) -> Result<AdjointPath> {
    let path = &solution.path;
    if lam0.len() != model.dim() {
        return Err(Error::Dimension("adjoint seed does not match the model dimension".into()));
    }
    let times = path.grid.times();
    let devs = path.deviations.as_ref().ok_or(Error::MissingDeviations)?;

    // State time-derivatives at the nodes for Hermite interpolation.
    let xdots: Vec<DVector<f64>> = path
        .states
        .iter()
        .zip(devs)
        .map(|(x, w)| model.drift_unchecked(x) + model.inject_deviation(w))
        .collect();

    let rhs = |x: &DVector<f64>, lam: &DVector<f64>| -model.drift_vjp(x, lam);
    let mut states = Vec::with_capacity(path.grid.len());
    let mut lam = lam0.clone();
    states.push(lam.clone());
    for k in 0..path.grid.n_steps() {
        let h = times[k + 1] - times[k];
        let x0 = &path.states[k];
        let x1 = &path.states[k + 1];
        let xm = (x0 + x1) * 0.5 + (&xdots[k] - &xdots[k + 1]) * (h / 8.0);
        let k1 = rhs(x0, &lam);
        let k2 = rhs(&xm, &(&lam + &k1 * (h / 2.0)));
        let k3 = rhs(&xm, &(&lam + &k2 * (h / 2.0)));
        let k4 = rhs(x1, &(&lam + &k3 * h));
        lam += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if lam.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("adjoint integration diverged".into()));
        }
        states.push(lam.clone());
    }
    AdjointPath::new(path.grid.clone(), states)
}

/// The maximizing deviation `sigma^T lambda` (velocity block for
/// mechanical models) at every node of an adjoint trajectory.
pub fn optimal_deviation(model: &DynamicsModel, lam: &AdjointPath) -> Vec<DVector<f64>> {
    lam.states.iter().map(|l| model.diffusion_t_apply(l)).collect()
}

/// Computes the scaled residuals of the transversality conditions, the
/// temporal condition and the maximizing condition for a solver output.
///
/// Pass the prior (and its noise scale) for free-start solutions; fixed
/// start solves skip the initial transversality condition.
pub fn transversality_residuals(
    model: &DynamicsModel,
    solution: &VariationalSolution,
    prior: Option<(&InitialDistribution, f64)>,
    unsafe_set: &UnsafeSet,
) -> Result<ResidualReport> {
    let adjoint = solution.adjoint.as_ref().ok_or(Error::MissingAdjoint)?;
    let path = &solution.path;
    let devs = path.deviations.as_ref().ok_or(Error::MissingDeviations)?;
    if adjoint.len() != path.grid.len() {
        return Err(Error::Dimension("adjoint length does not match the path grid".into()));
    }
    let alpha = solution.alpha;
    let lam0 = &adjoint[0];
    let lam_t = adjoint.last().unwrap();
    let x_t = path.terminal_state();

    // (a) Initial transversality lambda(0) = eps grad S_0(phi(0)).
    let initial_transversality = prior.map(|(dist, eps)| {
        let g = dist.initial_cost_gradient(path.initial_state()) * eps;
        (lam0 - &g).norm() / (1.0 + lam0.norm() + g.norm())
    });

    // (b) Final transversality lambda(T) = -alpha grad f(phi(T)).
    let grad_f = unsafe_set.gradient_full(x_t);
    let target = &grad_f * (-alpha);
    let final_transversality = (lam_t - &target).norm() / (1.0 + lam_t.norm() + target.norm());

    // (c) Complementary slackness alpha f(phi(T)) = 0, with the multiplier
    // and the level value each normalized by their own scales.
    let f_t = unsafe_set.value(x_t);
    let complementary_slackness =
        (alpha / (1.0 + alpha)) * (f_t.abs() / solution.constraint_scale);

    // Temporal condition H(T) = 0 (interior hitting times only) and
    // Hamiltonian magnitude along the whole path.
    let mut hamiltonian_max = 0.0f64;
    let mut hamiltonian_residual = 0.0;
    let mut hamiltonian_terminal = 0.0;
    for k in 0..path.grid.len() {
        let h = hamiltonian(model, &path.states[k], &devs[k], &adjoint[k])?;
        let pairing = model.drift_unchecked(&path.states[k])
            + model.inject_deviation(&devs[k]);
        let scale = 1.0 + 0.5 * devs[k].norm_squared() + adjoint[k].norm() * pairing.norm();
        let scaled = h.abs() / scale;
        hamiltonian_max = hamiltonian_max.max(scaled);
        if k + 1 == path.grid.len() {
            hamiltonian_terminal = h;
            hamiltonian_residual = scaled;
        }
    }

    // Maximizing condition w = sigma^T lambda_nu at every node.
    let mut w_inf = 0.0f64;
    let mut sl_inf = 0.0f64;
    let mut worst = 0.0f64;
    for (w, lam) in devs.iter().zip(adjoint) {
        let sl = model.diffusion_t_apply(lam);
        w_inf = w_inf.max(w.amax());
        sl_inf = sl_inf.max(sl.amax());
        worst = worst.max((w - sl).amax());
    }
    let deviation_consistency = worst / (1.0 + w_inf + sl_inf);

    // Re-integrate the adjoint from lambda(0) and compare.
    let reint = integrate_adjoint(model, solution, lam0)?;
    let lam_scale = adjoint.iter().map(|l| l.amax()).fold(0.0f64, f64::max);
    let adjoint_reintegration = adjoint
        .iter()
        .zip(&reint.states)
        .map(|(a, b)| (a - b).amax())
        .fold(0.0f64, f64::max)
        / (1.0 + lam_scale);

    let final_time_interior = !solution.time_on_boundary
        && solution.window.contains(solution.time)
        && !solution.window.is_fixed();

    Ok(ResidualReport {
        initial_transversality,
        final_transversality,
        complementary_slackness,
        hamiltonian_terminal,
        hamiltonian_residual,
        hamiltonian_max,
        deviation_consistency,
        adjoint_reintegration,
        initial_state_free: prior.is_some(),
        final_time_interior,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dvector, DMatrix};

    fn brownian() -> DynamicsModel {
        DynamicsModel::first_order(
            1,
            |x: &DVector<f64>| DVector::zeros(x.len()),
            |_: &DVector<f64>| DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap()
    }

    #[test]
    fn hamiltonian_zero_when_both_vanish() {
        let m = brownian();
        let h = hamiltonian(&m, &dvector![0.3], &dvector![0.0], &dvector![0.0]).unwrap();
        assert_eq!(h, 0.0);
    }

    #[test]
    fn hamiltonian_on_brownian_instanton_node() {
        let m = brownian();
        let h = hamiltonian(&m, &dvector![0.5], &dvector![1.0], &dvector![1.0]).unwrap();
        assert_relative_eq!(h, 0.5);
    }

    #[test]
    fn hamiltonian_linear_in_adjoint_at_zero_deviation() {
        let m = DynamicsModel::first_order(
            1,
            |x: &DVector<f64>| -x.clone(),
            |_: &DVector<f64>| DMatrix::from_element(1, 1, -1.0),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let x = dvector![0.7];
        let w = dvector![0.0];
        let h1 = hamiltonian(&m, &x, &w, &dvector![1.0]).unwrap();
        let hc = hamiltonian(&m, &x, &w, &dvector![3.5]).unwrap();
        assert_relative_eq!(hc, 3.5 * h1, epsilon = 1e-14);
    }

    fn flow_solution(model: &DynamicsModel, x0: DVector<f64>) -> VariationalSolution {
        let path = model.flow_deterministic(&x0, 1.0, 50).unwrap();
        let n = path.grid.len();
        VariationalSolution {
            adjoint: Some(vec![DVector::zeros(model.dim()); n]),
            time: 1.0,
            alpha: 0.0,
            action: 0.0,
            initial_cost: 0.0,
            objective: 0.0,
            status: crate::solver::SolveStatus::TrivialDeterministic,
            window: crate::solver::TimeWindow::fixed(1.0).unwrap(),
            time_on_boundary: true,
            constraint_value: 0.0,
            constraint_scale: 1.0,
            grad_inf: 0.0,
            stationarity: 0.0,
            inner_iterations: 0,
            outer_iterations: 0,
            path,
        }
    }

    #[test]
    fn adjoint_of_zero_seed_stays_zero() {
        let m = brownian();
        let sol = flow_solution(&m, dvector![0.2]);
        let lam = integrate_adjoint(&m, &sol, &DVector::zeros(1)).unwrap();
        assert!(lam.states.iter().all(|l| l.norm() == 0.0));
    }

    #[test]
    fn adjoint_constant_for_zero_drift() {
        let m = brownian();
        let sol = flow_solution(&m, dvector![0.2]);
        let lam = integrate_adjoint(&m, &sol, &dvector![1.7]).unwrap();
        for l in &lam.states {
            assert_relative_eq!(l[0], 1.7, epsilon = 1e-13);
        }
    }

    #[test]
    fn adjoint_mechanical_free_particle() {
        // grad^2 U = 0: lambda_eta constant, lambda_nu(t) = lambda_nu(0) - lambda_eta(0) t.
        let m = DynamicsModel::mechanical(
            1,
            |_r: &DVector<f64>| DVector::zeros(1),
            |_r: &DVector<f64>| DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let sol = flow_solution(&m, dvector![0.0, 1.0]);
        let lam = integrate_adjoint(&m, &sol, &dvector![2.0, 0.5]).unwrap();
        for (t, l) in lam.grid.times().iter().zip(&lam.states) {
            assert_relative_eq!(l[0], 2.0, epsilon = 1e-12);
            assert_relative_eq!(l[1], 0.5 - 2.0 * t, epsilon = 1e-11);
        }
    }

    #[test]
    fn optimal_deviation_examples() {
        let m = brownian();
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let lam = AdjointPath::new(grid, vec![dvector![0.0]; 5]).unwrap();
        assert!(optimal_deviation(&m, &lam).iter().all(|w| w.norm() == 0.0));

        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let lam = AdjointPath::new(grid, vec![dvector![1.0]; 5]).unwrap();
        for w in optimal_deviation(&m, &lam) {
            assert_relative_eq!(w[0], 1.0);
        }
    }

    #[test]
    fn trivial_solution_has_zero_residuals() {
        let m = brownian();
        let set = crate::unsafe_set::half_line_above(-10.0); // flow starts inside
        let sol = flow_solution(&m, dvector![0.2]);
        let rep = transversality_residuals(&m, &sol, None, &set).unwrap();
        assert_eq!(rep.final_transversality, 0.0);
        assert_eq!(rep.complementary_slackness, 0.0);
        assert_eq!(rep.deviation_consistency, 0.0);
        assert_eq!(rep.adjoint_reintegration, 0.0);
        assert!(rep.initial_transversality.is_none());
    }
}
