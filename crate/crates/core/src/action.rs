//! Action functional, initial-state cost and the posterior-path objective.
//!
//! The action of a path is `S_T = 1/2 * integral of |w|^2 dt`, evaluated by
//! trapezoidal quadrature on the path grid. The initial-state cost is the
//! Gaussian quadratic form `S_0(y) = 1/2 (y - x0)^T Sigma^{-1} (y - x0)`,
//! and the free-start objective is `J = S_T + eps * S_0(phi(0))`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dynamics::{DynamicsModel, ModelKind, Path};
use crate::error::{Error, Result};

/// Gaussian distribution of the initial state.
pub struct InitialDistribution {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    inv: DMatrix<f64>,
    log_normalizer: f64,
}

impl std::fmt::Debug for InitialDistribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InitialDistribution")
            .field("dim", &self.mean.len())
            .finish()
    }
}

impl InitialDistribution {
    /// Builds the distribution from a mean and a symmetric positive
    /// definite covariance.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::Dimension(format!(
                "covariance must be {n}x{n}, got {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if (&cov - cov.transpose()).amax() > 1e-10 * (1.0 + cov.amax()) {
            return Err(Error::InvalidArgument("covariance must be symmetric".into()));
        }
        let chol = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::Singular("covariance must be positive definite".into()))?;
        let inv = chol.inverse();
        let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let log_normalizer = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(Self { mean, cov, chol, inv, log_normalizer })
    }

    /// Diagonal-covariance convenience constructor.
    pub fn diagonal(mean: DVector<f64>, variances: &[f64]) -> Result<Self> {
        if variances.len() != mean.len() {
            return Err(Error::Dimension("variance list must match mean dimension".into()));
        }
        let cov = DMatrix::from_diagonal(&DVector::from_row_slice(variances));
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Lower-triangular Cholesky factor `L` with `Sigma = L L^T`.
    pub fn chol_l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// `S_0(y) = 1/2 |y - x0|^2_Sigma`, the Sigma^{-1}-weighted quadratic
    /// form. Zero exactly at the mean.
    pub fn initial_cost(&self, y: &DVector<f64>) -> f64 {
        let z = self.chol.l_dirty().solve_lower_triangular(&(y - &self.mean)).unwrap();
        0.5 * z.norm_squared()
    }

    /// Gradient of [`Self::initial_cost`]: `Sigma^{-1} (y - x0)`.
    pub fn initial_cost_gradient(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.inv * (y - &self.mean)
    }

    /// Log of the Gaussian density at `y`.
    pub fn log_density(&self, y: &DVector<f64>) -> f64 {
        self.log_normalizer - self.initial_cost(y)
    }

    /// Draws a sample `x0 + L xi` with standard normal `xi`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let xi = DVector::from_fn(self.mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + self.chol.l_dirty().view((0, 0), (self.dim(), self.dim())).lower_triangle() * xi
    }
}

/// Trapezoidal quadrature weights for a grid.
pub(crate) fn trapezoid_weights(times: &[f64]) -> Vec<f64> {
    let n = times.len();
    let mut w = vec![0.0; n];
    for k in 0..n - 1 {
        let h = times[k + 1] - times[k];
        w[k] += 0.5 * h;
        w[k + 1] += 0.5 * h;
    }
    w
}

/// Action functional `S_T = 1/2 * integral |w|^2 dt` on the path grid.
///
/// Requires the path to carry deviation samples.
pub fn action_functional(path: &Path) -> Result<f64> {
    let dev = path.deviations.as_ref().ok_or(Error::MissingDeviations)?;
    let weights = trapezoid_weights(path.grid.times());
    Ok(0.5
        * dev
            .iter()
            .zip(&weights)
            .map(|(w, c)| c * w.norm_squared())
            .sum::<f64>())
}

/// Free-start objective `J = S_T + eps * S_0(phi(0))`.
pub fn map_objective(path: &Path, dist: &InitialDistribution, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("noise scale eps must be positive".into()));
    }
    Ok(action_functional(path)? + eps * dist.initial_cost(path.initial_state()))
}

/// Fills the deviation samples of a path from its states:
/// `w = sigma^{-1} (phi' - b(phi))`, with the time derivative taken by
/// central differences (second-order one-sided stencils at the ends).
/// Mechanical models apply the formula on the velocity block.
pub fn recover_deviation(path: &Path, model: &DynamicsModel) -> Result<Path> {
    let n_nodes = path.grid.len();
    if path.state_dim() != model.dim() {
        return Err(Error::Dimension(format!(
            "path states have dimension {}, model expects {}",
            path.state_dim(),
            model.dim()
        )));
    }
    let times = path.grid.times();
    let mut deviations = Vec::with_capacity(n_nodes);
    for k in 0..n_nodes {
        let xdot = node_derivative(times, &path.states, k);
        let residual = match model.kind() {
            ModelKind::FirstOrder => xdot - model.drift_unchecked(&path.states[k]),
            ModelKind::Mechanical => {
                let m = model.pos_dim();
                let eta = path.states[k].rows(0, m).into_owned();
                let full = model.drift_unchecked(&path.states[k]);
                let _ = eta;
                (xdot - full).rows(m, m).into_owned()
            }
        };
        deviations.push(model.sigma_solve(&residual)?);
    }
    Path::with_deviations(path.grid.clone(), path.states.clone(), deviations)
}

fn node_derivative(times: &[f64], states: &[DVector<f64>], k: usize) -> DVector<f64> {
    let n = times.len();
    if k == 0 {
        let h = times[1] - times[0];
        if n >= 3 {
            (&states[0] * -3.0 + &states[1] * 4.0 - &states[2]) / (2.0 * h)
        } else {
            (&states[1] - &states[0]) / h
        }
    } else if k == n - 1 {
        let h = times[n - 1] - times[n - 2];
        if n >= 3 {
            (&states[n - 1] * 3.0 - &states[n - 2] * 4.0 + &states[n - 3]) / (2.0 * h)
        } else {
            (&states[n - 1] - &states[n - 2]) / h
        }
    } else {
        (&states[k + 1] - &states[k - 1]) / (times[k + 1] - times[k - 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::TimeGrid;
    use approx::assert_relative_eq;
    use nalgebra::dvector;
    use proptest::prelude::*;

    fn unit_grid_path(n_steps: usize, w: f64) -> Path {
        let grid = TimeGrid::uniform(1.0, n_steps).unwrap();
        let states: Vec<_> = grid.times().iter().map(|&t| dvector![t * w]).collect();
        let dev = vec![dvector![w]; n_steps + 1];
        Path::with_deviations(grid, states, dev).unwrap()
    }

    #[test]
    fn zero_deviation_has_zero_action() {
        let p = unit_grid_path(10, 0.0);
        assert_eq!(action_functional(&p).unwrap(), 0.0);
    }

    #[test]
    fn unit_deviation_action_is_half() {
        let p = unit_grid_path(17, 1.0);
        assert_relative_eq!(action_functional(&p).unwrap(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn brownian_instanton_matches_discrete_qp_oracle() {
        // Oracle: minimize 1/2 sum c_k w_k^2 subject to sum c_k w_k = L.
        // With one linear constraint the KKT system solves in closed form:
        // w_k = L / sum(c_k), so the optimal action is L^2 / (2 T).
        let n = 50;
        let grid = TimeGrid::uniform(1.0, n).unwrap();
        let c = trapezoid_weights(grid.times());
        let total: f64 = c.iter().sum();
        let target = 1.0;
        let w_opt: Vec<f64> = c.iter().map(|_| target / total).collect();
        let action_oracle: f64 =
            0.5 * c.iter().zip(&w_opt).map(|(ck, wk)| ck * wk * wk).sum::<f64>();
        assert_relative_eq!(action_oracle, 0.5, epsilon = 1e-12);

        let states: Vec<_> = grid.times().iter().map(|&t| dvector![t]).collect();
        let dev: Vec<_> = w_opt.iter().map(|&w| dvector![w]).collect();
        let p = Path::with_deviations(grid, states, dev).unwrap();
        assert_relative_eq!(action_functional(&p).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn action_requires_deviations() {
        let grid = TimeGrid::uniform(1.0, 4).unwrap();
        let p = Path::new(grid, vec![dvector![0.0]; 5]).unwrap();
        assert!(matches!(action_functional(&p), Err(Error::MissingDeviations)));
    }

    #[test]
    fn initial_cost_examples() {
        let d = InitialDistribution::diagonal(dvector![0.0], &[1.0]).unwrap();
        assert_eq!(d.initial_cost(&dvector![0.0]), 0.0);
        assert_relative_eq!(d.initial_cost(&dvector![1.0]), 0.5);
        let wide = InitialDistribution::diagonal(dvector![0.0], &[4.0]).unwrap();
        assert_relative_eq!(wide.initial_cost(&dvector![2.0]), 0.5);
    }

    #[test]
    fn initial_cost_gradient_matches_form() {
        let d = InitialDistribution::diagonal(dvector![1.0, -1.0], &[2.0, 0.5]).unwrap();
        let y = dvector![2.0, 1.0];
        let g = d.initial_cost_gradient(&y);
        assert_relative_eq!(g[0], 0.5);
        assert_relative_eq!(g[1], 4.0);
    }

    #[test]
    fn map_objective_examples() {
        let d = InitialDistribution::diagonal(dvector![0.0], &[1.0]).unwrap();
        let p = unit_grid_path(10, 0.0);
        assert_eq!(map_objective(&p, &d, 0.1).unwrap(), 0.0);

        // Brownian instanton from 0 with a centered prior: S = 0.5, S0 = 0.
        let p = unit_grid_path(10, 1.0);
        assert_relative_eq!(map_objective(&p, &d, 0.1).unwrap(), 0.5, epsilon = 1e-12);

        // Straight line from 1/1.1 to 1 gives J = 1/22.
        let y0 = 1.0 / 1.1;
        let grid = TimeGrid::uniform(1.0, 200).unwrap();
        let states: Vec<_> = grid
            .times()
            .iter()
            .map(|&t| dvector![y0 + (1.0 - y0) * t])
            .collect();
        let dev = vec![dvector![1.0 - y0]; 201];
        let p = Path::with_deviations(grid, states, dev).unwrap();
        assert_relative_eq!(map_objective(&p, &d, 0.1).unwrap(), 1.0 / 22.0, epsilon = 1e-10);
    }

    #[test]
    fn recover_deviation_on_deterministic_flow_is_zero() {
        let model = crate::dynamics::DynamicsModel::first_order(
            1,
            |x: &DVector<f64>| -x.clone(),
            |_: &DVector<f64>| DMatrix::from_element(1, 1, -1.0),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let flow = model.flow_deterministic(&dvector![1.0], 1.0, 200).unwrap();
        let rec = recover_deviation(&flow, &model).unwrap();
        let worst = rec
            .deviations
            .unwrap()
            .iter()
            .map(|w| w.amax())
            .fold(0.0, f64::max);
        assert!(worst < 1e-4, "residual deviation {worst}");
    }

    #[test]
    fn recover_deviation_linear_ramp() {
        let model = crate::dynamics::DynamicsModel::first_order(
            1,
            |x: &DVector<f64>| DVector::zeros(x.len()),
            |_: &DVector<f64>| DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let grid = TimeGrid::uniform(1.0, 40).unwrap();
        let states: Vec<_> = grid.times().iter().map(|&t| dvector![t]).collect();
        let p = Path::new(grid, states).unwrap();
        let rec = recover_deviation(&p, &model).unwrap();
        for w in rec.deviations.unwrap() {
            assert_relative_eq!(w[0], 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn recover_deviation_ou_instanton() {
        // phi(t) = sinh(t)/sinh(1) for dx = -x dt: w = phi' + phi = e^t/sinh(1).
        let model = crate::dynamics::DynamicsModel::first_order(
            1,
            |x: &DVector<f64>| -x.clone(),
            |_: &DVector<f64>| DMatrix::from_element(1, 1, -1.0),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let s1 = 1.0f64.sinh();
        let grid = TimeGrid::uniform(1.0, 100).unwrap();
        let states: Vec<_> = grid.times().iter().map(|&t| dvector![t.sinh() / s1]).collect();
        let p = Path::new(grid, states).unwrap();
        let rec = recover_deviation(&p, &model).unwrap();
        let dev = rec.deviations.unwrap();
        for (t, w) in rec.grid.times().iter().zip(&dev) {
            assert_relative_eq!(w[0], t.exp() / s1, epsilon = 1e-3);
        }
    }

    #[test]
    fn mechanical_recovery_uses_velocity_block() {
        let model = crate::dynamics::DynamicsModel::mechanical(
            1,
            |_r: &DVector<f64>| DVector::zeros(1),
            |_r: &DVector<f64>| DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        // eta = t^2/2, nu = t: nu' = 1 = sigma w.
        let grid = TimeGrid::uniform(1.0, 50).unwrap();
        let states: Vec<_> = grid
            .times()
            .iter()
            .map(|&t| dvector![0.5 * t * t, t])
            .collect();
        let p = Path::new(grid, states).unwrap();
        let rec = recover_deviation(&p, &model).unwrap();
        for w in rec.deviations.unwrap() {
            assert_eq!(w.len(), 1);
            assert_relative_eq!(w[0], 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn trapezoid_action_second_order_convergence() {
        // The Brownian instanton deviation is exact on every grid, so probe
        // convergence with a smooth non-constant deviation instead.
        let action_at = |n: usize| {
            let grid = TimeGrid::uniform(1.0, n).unwrap();
            let states: Vec<_> = grid.times().iter().map(|&t| dvector![t]).collect();
            let dev: Vec<_> = grid.times().iter().map(|&t| dvector![t.exp()]).collect();
            action_functional(&Path::with_deviations(grid, states, dev).unwrap()).unwrap()
        };
        let exact = (2.0f64.exp() - 1.0) / 4.0; // 1/2 int_0^1 e^{2t} dt
        let e1 = (action_at(50) - exact).abs();
        let e2 = (action_at(100) - exact).abs();
        let ratio = e1 / e2;
        assert!((3.0..5.0).contains(&ratio), "trapezoid convergence ratio {ratio}");
    }

    proptest! {
        #[test]
        fn action_scales_quadratically(scale in -3.0f64..3.0, n in 3usize..40) {
            let grid = TimeGrid::uniform(1.0, n).unwrap();
            let states: Vec<_> = grid.times().iter().map(|&t| dvector![t]).collect();
            let dev: Vec<_> = grid.times().iter()
                .map(|&t| dvector![(3.1 * t).sin() + 0.3])
                .collect();
            let base = Path::with_deviations(grid.clone(), states.clone(), dev.clone()).unwrap();
            let scaled_dev: Vec<_> = dev.iter().map(|w| w * scale).collect();
            let scaled = Path::with_deviations(grid, states, scaled_dev).unwrap();
            let s0 = action_functional(&base).unwrap();
            let s1 = action_functional(&scaled).unwrap();
            prop_assert!((s1 - scale * scale * s0).abs() <= 1e-12 * (1.0 + s0));
        }

        #[test]
        fn action_nonnegative_and_zero_iff_zero(n in 2usize..30, w in -2.0f64..2.0) {
            let grid = TimeGrid::uniform(1.0, n).unwrap();
            let states: Vec<_> = grid.times().iter().map(|&t| dvector![t]).collect();
            let dev = vec![dvector![w]; n + 1];
            let p = Path::with_deviations(grid, states, dev).unwrap();
            let s = action_functional(&p).unwrap();
            prop_assert!(s >= 0.0);
            prop_assert_eq!(s == 0.0, w == 0.0);
        }

        #[test]
        fn map_objective_dominates_action(y0 in -2.0f64..2.0) {
            let d = InitialDistribution::diagonal(dvector![0.0], &[1.0]).unwrap();
            let grid = TimeGrid::uniform(1.0, 10).unwrap();
            let states: Vec<_> = grid.times().iter().map(|&t| dvector![y0 + t]).collect();
            let dev = vec![dvector![1.0]; 11];
            let p = Path::with_deviations(grid, states, dev).unwrap();
            let s = action_functional(&p).unwrap();
            let j = map_objective(&p, &d, 0.2).unwrap();
            prop_assert!(j >= s - 1e-15);
            if y0 == 0.0 {
                prop_assert!((j - s).abs() < 1e-15);
            }
        }
    }
}
