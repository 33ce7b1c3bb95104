//! Probability estimates built on the variational output.
//!
//! The prefactor-free hitting asymptotic is `exp(-Q/eps)`. The
//! unnormalized posterior over initial states conditioned on the unsafe
//! event has log-density `-(Q(y) + eps S_0(y)) / eps` up to a constant.
//! The measure-averaged hitting probability is approximated by
//! `integral exp(-Q(y)/eps) p_0(y) dy` with `Q = 0` inside the unsafe
//! set (the hitting time is zero there, so that prior mass contributes
//! fully).

use std::cell::RefCell;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::action::InitialDistribution;
use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};
use crate::solver::{solve_map, SolverOptions, TimeWindow, VariationalSolution};
use crate::unsafe_set::UnsafeSet;
use crate::util::pairwise_sum;

/// Quasi-potential and posterior quantities at one probe point.
#[derive(Debug, Clone)]
pub struct PosteriorEvaluation {
    pub probe: DVector<f64>,
    /// `Q(y)`, zero inside the unsafe set.
    pub quasipotential: f64,
    /// `eps * S_0(y)`.
    pub scaled_prior_cost: f64,
    /// `Gamma(y) = Q(y) + eps S_0(y)`.
    pub gamma: f64,
    /// Unnormalized log-posterior `-Gamma(y) / eps`.
    pub log_posterior: f64,
}

/// Prefactor-free hitting-probability asymptotic `exp(-Q/eps)`.
pub fn ldt_hitting_probability(quasipotential: f64, eps: f64) -> f64 {
    debug_assert!(quasipotential >= 0.0 && eps > 0.0);
    (-quasipotential / eps).exp()
}

/// Evaluates the unnormalized posterior of the initial state at `y` by a
/// quasi-potential solve (the normalizing constant is dropped).
#[allow(clippy::too_many_arguments)]
pub fn posterior_logdensity(
    model: &DynamicsModel,
    unsafe_set: &UnsafeSet,
    dist: &InitialDistribution,
    eps: f64,
    y: &DVector<f64>,
    window: TimeWindow,
    options: &SolverOptions,
) -> Result<PosteriorEvaluation> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("noise scale eps must be positive".into()));
    }
    let q = crate::solver::quasipotential(model, unsafe_set, y, window, options)?;
    let scaled_prior_cost = eps * dist.initial_cost(y);
    let gamma = q + scaled_prior_cost;
    Ok(PosteriorEvaluation {
        probe: y.clone(),
        quasipotential: q,
        scaled_prior_cost,
        gamma,
        log_posterior: -gamma / eps,
    })
}

/// Controls for the weak p-safety estimator.
#[derive(Debug, Clone)]
pub struct PsafetyOptions {
    /// Half-width of the standardized prior box, in prior standard
    /// deviations.
    pub box_sigmas: f64,
    /// Gauss-Legendre panels per unit length of the standardized axis.
    pub panels_per_sigma: usize,
    /// Nodes per panel.
    pub gl_order: usize,
    /// Sample count for the importance-sampling fallback in dimensions
    /// above two.
    pub is_samples: usize,
    /// Seed for the importance-sampling fallback.
    pub seed: u64,
}

impl Default for PsafetyOptions {
    fn default() -> Self {
        Self { box_sigmas: 5.0, panels_per_sigma: 4, gl_order: 10, is_samples: 400, seed: 0 }
    }
}

/// Weak p-safety estimate with an error bar.
#[derive(Debug, Clone)]
pub struct PsafetyEstimate {
    /// Estimate of `P_mu[tau_D <= T]`, clamped to `[0, 1]`.
    pub estimate: f64,
    /// Quadrature-refinement difference, or the importance-sampling
    /// standard error.
    pub error: f64,
    /// Quasi-potential solves performed.
    pub evaluations: usize,
    /// Probe solves that failed and were skipped.
    pub skipped: usize,
}

/// Approximates `integral exp(-Q(y)/eps) p_0(y) dy`.
///
/// Dimensions one and two use tensor Gauss-Legendre over a `box_sigmas`
/// prior box, split exactly at the unsafe-set boundary so each panel sees
/// a smooth integrand; the error bar is the difference against a grid
/// with doubled panel counts. Higher dimensions use self-normalized
/// importance sampling with the proposal centered at the posterior-mode
/// initial state.
pub fn weak_psafety(
    model: &DynamicsModel,
    unsafe_set: &UnsafeSet,
    dist: &InitialDistribution,
    eps: f64,
    window: TimeWindow,
    solver: &SolverOptions,
    options: &PsafetyOptions,
) -> Result<PsafetyEstimate> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("noise scale eps must be positive".into()));
    }
    let n = model.dim();
    let probe = Prober::new(model, unsafe_set, dist, eps, window, solver);
    let (raw, error) = match n {
        1 => {
            let coarse = quad_1d(&probe, options, 1);
            let fine = quad_1d(&probe, options, 2);
            (fine, (fine - coarse).abs())
        }
        2 => {
            let coarse = quad_2d(&probe, options, 1);
            let fine = quad_2d(&probe, options, 2);
            (fine, (fine - coarse).abs())
        }
        _ => snis(&probe, options)?,
    };
    let state = probe.state.into_inner();
    if raw > 1.0 + error + 1e-9 || raw < -(error + 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "p-safety estimate {raw} outside [0, 1] by more than its error bar {error}"
        )));
    }
    Ok(PsafetyEstimate {
        estimate: raw.clamp(0.0, 1.0),
        error,
        evaluations: state.evaluations,
        skipped: state.skipped,
    })
}

struct ProbeState {
    warm: Option<VariationalSolution>,
    evaluations: usize,
    skipped: usize,
}

/// Evaluates `exp(-Q(y)/eps)` with warm-started solves.
struct Prober<'a> {
    model: &'a DynamicsModel,
    unsafe_set: &'a UnsafeSet,
    dist: &'a InitialDistribution,
    eps: f64,
    window: TimeWindow,
    solver: &'a SolverOptions,
    state: RefCell<ProbeState>,
}

impl<'a> Prober<'a> {
    fn new(
        model: &'a DynamicsModel,
        unsafe_set: &'a UnsafeSet,
        dist: &'a InitialDistribution,
        eps: f64,
        window: TimeWindow,
        solver: &'a SolverOptions,
    ) -> Self {
        Self {
            model,
            unsafe_set,
            dist,
            eps,
            window,
            solver,
            state: RefCell::new(ProbeState { warm: None, evaluations: 0, skipped: 0 }),
        }
    }

    /// Standardized coordinates to state space: `y = x0 + L u`.
    fn to_state(&self, u: &DVector<f64>) -> DVector<f64> {
        self.dist.mean() + self.dist.chol_l() * u
    }

    fn level_at(&self, u: &DVector<f64>) -> f64 {
        self.unsafe_set.value(&self.to_state(u))
    }

    /// `exp(-Q(y(u))/eps)`; `1` inside the unsafe set.
    fn weight(&self, u: &DVector<f64>) -> f64 {
        let y = self.to_state(u);
        if self.unsafe_set.contains(&y) {
            return 1.0;
        }
        let mut st = self.state.borrow_mut();
        st.evaluations += 1;
        let problem = crate::solver::Problem {
            model: self.model,
            unsafe_set: self.unsafe_set,
            kind: crate::solver::ProblemKind::MaximumLikelihood { start: &y },
            window: self.window,
            options: self.solver.clone(),
        };
        match problem.solve_with_guess(st.warm.as_ref()) {
            Ok(sol) => {
                let q = sol.objective;
                if sol.status.is_usable() {
                    let value = (-q / self.eps).exp();
                    st.warm = Some(sol);
                    value
                } else {
                    st.skipped += 1;
                    (-q / self.eps).exp()
                }
            }
            Err(_) => {
                st.skipped += 1;
                0.0
            }
        }
    }
}

fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    // Newton iteration on the Legendre recurrence; nodes in (-1, 1).
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let legendre = |x: f64| -> (f64, f64) {
        let (mut p0, mut p1) = (1.0f64, 0.0f64);
        for j in 0..n {
            let p2 = p1;
            p1 = p0;
            p0 = ((2.0 * j as f64 + 1.0) * x * p1 - j as f64 * p2) / (j as f64 + 1.0);
        }
        let dp = n as f64 * (x * p0 - p1) / (x * x - 1.0);
        (p0, dp)
    };
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre(x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn std_normal_pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Boundary crossings of a scalar function on `[lo, hi]`, located by a
/// dense scan plus bisection.
fn find_crossings<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64) -> Vec<f64> {
    let samples = 512;
    let mut crossings = Vec::new();
    let mut prev_u = lo;
    let mut prev_f = f(lo);
    for k in 1..=samples {
        let u = lo + (hi - lo) * k as f64 / samples as f64;
        let fu = f(u);
        if (prev_f <= 0.0) != (fu <= 0.0) {
            let (mut a, mut b) = (prev_u, u);
            let mut fa = prev_f;
            for _ in 0..60 {
                let m = 0.5 * (a + b);
                let fm = f(m);
                if (fa <= 0.0) == (fm <= 0.0) {
                    a = m;
                    fa = fm;
                } else {
                    b = m;
                }
            }
            crossings.push(0.5 * (a + b));
        }
        prev_u = u;
        prev_f = fu;
    }
    crossings
}

/// Composite Gauss-Legendre over `[lo, hi]` split at the given interior
/// points, with `panels_per_unit` panels per unit length (at least one
/// per segment). Contributions are accumulated pairwise in a fixed node
/// order.
fn composite_gl<F: FnMut(f64) -> f64>(
    mut integrand: F,
    lo: f64,
    hi: f64,
    splits: &[f64],
    panels_per_unit: usize,
    order: usize,
) -> f64 {
    let (nodes, weights) = gauss_legendre(order);
    let mut edges = vec![lo];
    edges.extend(splits.iter().copied().filter(|&s| s > lo && s < hi));
    edges.push(hi);
    let mut contributions = Vec::new();
    for seg in edges.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let n_panels = ((b - a) * panels_per_unit as f64).ceil().max(1.0) as usize;
        for p in 0..n_panels {
            let pa = a + (b - a) * p as f64 / n_panels as f64;
            let pb = a + (b - a) * (p + 1) as f64 / n_panels as f64;
            let half = 0.5 * (pb - pa);
            let mid = 0.5 * (pa + pb);
            for (x, w) in nodes.iter().zip(&weights) {
                contributions.push(w * half * integrand(mid + half * x));
            }
        }
    }
    pairwise_sum(&contributions)
}

fn quad_1d(probe: &Prober<'_>, options: &PsafetyOptions, refine: usize) -> f64 {
    let b = options.box_sigmas;
    let level = |u: f64| probe.level_at(&DVector::from_vec(vec![u]));
    let splits = find_crossings(&level, -b, b);
    composite_gl(
        |u| probe.weight(&DVector::from_vec(vec![u])) * std_normal_pdf(u),
        -b,
        b,
        &splits,
        options.panels_per_sigma * refine,
        options.gl_order,
    )
}

fn quad_2d(probe: &Prober<'_>, options: &PsafetyOptions, refine: usize) -> f64 {
    let b = options.box_sigmas;
    let outer = |u1: f64| -> f64 {
        let level = |u2: f64| probe.level_at(&DVector::from_vec(vec![u1, u2]));
        let splits = find_crossings(&level, -b, b);
        composite_gl(
            |u2| probe.weight(&DVector::from_vec(vec![u1, u2])) * std_normal_pdf(u2),
            -b,
            b,
            &splits,
            options.panels_per_sigma * refine,
            options.gl_order,
        )
    };
    composite_gl(
        |u1| outer(u1) * std_normal_pdf(u1),
        -b,
        b,
        &[],
        options.panels_per_sigma * refine,
        options.gl_order,
    )
}

/// Self-normalized importance sampling with the proposal `N(y_mode, Sigma)`
/// centered at the posterior-mode initial state.
fn snis(probe: &Prober<'_>, options: &PsafetyOptions) -> Result<(f64, f64)> {
    let map = solve_map(
        probe.model,
        probe.unsafe_set,
        probe.dist,
        probe.eps,
        probe.window,
        probe.solver,
    )?;
    let y_mode = map.path.initial_state().clone();
    let proposal = InitialDistribution::new(y_mode, probe.dist.covariance().clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let n = options.is_samples.max(2);
    let mut weights = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let y = proposal.sample(&mut rng);
        let w = (probe.dist.log_density(&y) - proposal.log_density(&y)).exp();
        let g = if probe.unsafe_set.contains(&y) {
            1.0
        } else {
            probe.state.borrow_mut().evaluations += 1;
            match crate::solver::quasipotential(
                probe.model,
                probe.unsafe_set,
                &y,
                probe.window,
                probe.solver,
            ) {
                Ok(q) => (-q / probe.eps).exp(),
                Err(_) => {
                    probe.state.borrow_mut().skipped += 1;
                    0.0
                }
            }
        };
        weights.push(w);
        values.push(g);
    }
    let sum_w = pairwise_sum(&weights);
    if sum_w <= 0.0 {
        return Err(Error::InvalidArgument("degenerate importance weights".into()));
    }
    let weighted: Vec<f64> = weights.iter().zip(&values).map(|(w, g)| w * g).collect();
    let estimate = pairwise_sum(&weighted) / sum_w;
    let dev_sq: Vec<f64> = weights
        .iter()
        .zip(&values)
        .map(|(w, g)| (w * (g - estimate)).powi(2))
        .collect();
    let se = pairwise_sum(&dev_sq).sqrt() / sum_w;
    Ok((estimate, se))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unsafe_set::half_line_above;
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
    fn ldt_estimate_examples() {
        assert_eq!(ldt_hitting_probability(0.0, 0.3), 1.0);
        assert_relative_eq!(ldt_hitting_probability(0.5, 0.25), (-2.0f64).exp());
    }

    #[test]
    fn ldt_estimate_monotonicity() {
        assert!(ldt_hitting_probability(0.6, 0.1) < ldt_hitting_probability(0.5, 0.1));
        assert!(ldt_hitting_probability(0.5, 0.2) > ldt_hitting_probability(0.5, 0.1));
    }

    #[test]
    fn ldt_log_gap_to_exact_shrinks_with_eps() {
        // Reflection principle: P = 2 (1 - Phi(L / sqrt(eps T))). The gap
        // |eps ln P + Q| shrinks as eps decreases.
        use statrs::distribution::{ContinuousCDF, Normal};
        let normal = Normal::new(0.0, 1.0).unwrap();
        let q = 0.5;
        let gap = |eps: f64| {
            let p = 2.0 * (1.0 - normal.cdf(1.0 / eps.sqrt()));
            (eps * p.ln() + q).abs()
        };
        let g1 = gap(0.25);
        let g2 = gap(0.0625);
        assert_relative_eq!(g1, 0.27, epsilon = 0.01);
        assert_relative_eq!(g2, 0.10, epsilon = 0.01);
        assert!(g2 < g1);
    }

    #[test]
    fn posterior_inside_set_is_prior_only() {
        let model = brownian();
        let set = half_line_above(1.0);
        let dist = InitialDistribution::diagonal(dvector![0.0], &[1.0]).unwrap();
        let eval = posterior_logdensity(
            &model,
            &set,
            &dist,
            0.1,
            &dvector![1.5],
            TimeWindow::fixed(1.0).unwrap(),
            &SolverOptions { nodes: 50, ..Default::default() },
        )
        .unwrap();
        assert_eq!(eval.quasipotential, 0.0);
        assert_relative_eq!(eval.gamma, eval.scaled_prior_cost);
        assert!(eval.gamma >= 0.0);
    }

    #[test]
    fn posterior_grid_argmin_matches_map_mode() {
        let model = brownian();
        let set = half_line_above(1.0);
        let dist = InitialDistribution::diagonal(dvector![0.0], &[1.0]).unwrap();
        let window = TimeWindow::fixed(1.0).unwrap();
        let opts = SolverOptions { nodes: 100, ..Default::default() };
        let mut best = (f64::INFINITY, f64::NAN);
        for k in 0..=40 {
            let y = k as f64 / 40.0;
            let eval =
                posterior_logdensity(&model, &set, &dist, 0.1, &dvector![y], window, &opts)
                    .unwrap();
            if eval.gamma < best.0 {
                best = (eval.gamma, y);
            }
        }
        // Grid resolution is 0.025; the mode is at 1/1.1.
        assert!((best.1 - 1.0 / 1.1).abs() <= 0.025 + 1e-12);
        let map = solve_map(&model, &set, &dist, 0.1, window, &opts).unwrap();
        assert!((best.1 - map.path.initial_state()[0]).abs() <= 0.025 + 1e-9);
    }

    #[test]
    fn psafety_brownian_matches_quadrature_oracle() {
        // Oracle: (1 - Phi(1)) + integral_{y<1} e^{-5 (1-y)^2} phi(y) dy by
        // dense Simpson, entirely independent of the solver.
        use statrs::distribution::{ContinuousCDF, Normal};
        let normal = Normal::new(0.0, 1.0).unwrap();
        let g = |y: f64| (-5.0 * (1.0 - y) * (1.0 - y)).exp() * std_normal_pdf(y);
        let (a, b, m) = (-9.0, 1.0, 20_000);
        let h = (b - a) / m as f64;
        let mut simpson = g(a) + g(b);
        for k in 1..m {
            simpson += g(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        let oracle = simpson * h / 3.0 + (1.0 - normal.cdf(1.0));
        assert_relative_eq!(oracle, 0.277, epsilon = 5e-4);

        let model = brownian();
        let set = half_line_above(1.0);
        let dist = InitialDistribution::diagonal(dvector![0.0], &[1.0]).unwrap();
        let est = weak_psafety(
            &model,
            &set,
            &dist,
            0.1,
            TimeWindow::fixed(1.0).unwrap(),
            &SolverOptions { nodes: 60, ..Default::default() },
            &PsafetyOptions::default(),
        )
        .unwrap();
        assert!(
            (est.estimate - oracle).abs() < 1e-3,
            "estimate {} vs oracle {oracle} (error bar {})",
            est.estimate,
            est.error
        );
        assert_eq!(est.skipped, 0);
        assert!(est.evaluations > 0);
    }

    #[test]
    fn psafety_prior_inside_set_is_one() {
        let model = brownian();
        let set = half_line_above(-50.0);
        let dist = InitialDistribution::diagonal(dvector![0.0], &[0.01]).unwrap();
        let est = weak_psafety(
            &model,
            &set,
            &dist,
            0.1,
            TimeWindow::fixed(1.0).unwrap(),
            &SolverOptions { nodes: 50, ..Default::default() },
            &PsafetyOptions::default(),
        )
        .unwrap();
        assert!((est.estimate - 1.0).abs() < 1e-6, "estimate {}", est.estimate);
        assert_eq!(est.evaluations, 0);
    }

    #[test]
    fn psafety_decays_with_eps_far_from_set() {
        let model = brownian();
        let set = half_line_above(2.0);
        let dist = InitialDistribution::diagonal(dvector![0.0], &[0.04]).unwrap();
        let solver = SolverOptions { nodes: 50, ..Default::default() };
        let window = TimeWindow::fixed(1.0).unwrap();
        let coarse = PsafetyOptions { panels_per_sigma: 2, gl_order: 6, ..Default::default() };
        let est: Vec<f64> = [0.2, 0.1, 0.05]
            .iter()
            .map(|&eps| {
                weak_psafety(&model, &set, &dist, eps, window, &solver, &coarse)
                    .unwrap()
                    .estimate
            })
            .collect();
        assert!(est[0] > est[1] && est[1] > est[2], "estimates {est:?}");
        assert!(est.iter().all(|&e| (0.0..=1.0).contains(&e)));
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (nodes, weights) = gauss_legendre(10);
        // Exact for degree <= 19: check x^6 over [-1, 1] = 2/7.
        let s: f64 = nodes.iter().zip(&weights).map(|(x, w)| w * x.powi(6)).sum();
        assert_relative_eq!(s, 2.0 / 7.0, epsilon = 1e-14);
        let total: f64 = weights.iter().sum();
        assert_relative_eq!(total, 2.0, epsilon = 1e-13);
    }
}
