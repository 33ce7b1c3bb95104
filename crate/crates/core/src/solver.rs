//! Variational solvers for minimum-action hitting paths.
//!
//! `solve_ml` minimizes the action over paths from a fixed start that
//! reach the unsafe boundary at a time inside the window; `solve_map`
//! additionally frees the initial state and charges it the prior cost
//! `eps * S_0`. Both use the same machinery: direct transcription of the
//! controlled dynamics, an augmented Lagrangian on the terminal level
//! constraint `f(phi(T)) <= 0` with limited-memory quasi-Newton inner
//! solves, a coarse scan plus bracketed refinement over the free final
//! time, and a joint polish pass. The terminal multiplier and the node
//! cotangents of the discrete problem are extracted by reverse
//! accumulation and reported as `alpha` and the adjoint trajectory.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::action::{recover_deviation, InitialDistribution};
use crate::dynamics::{DynamicsModel, ModelKind, Path, TimeGrid};
use crate::error::{Error, Result};
use crate::lbfgs::{self, LbfgsOptions, StopReason};
use crate::transcription::Transcription;
use crate::unsafe_set::UnsafeSet;

/// Bounds `[t1, t2]` on the hitting time. `t1 == t2` pins the time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeWindow {
    t1: f64,
    t2: f64,
}

impl TimeWindow {
    pub fn new(t1: f64, t2: f64) -> Result<Self> {
        if !(t1 >= 0.0) || !(t2 > 0.0) || t2 < t1 {
            return Err(Error::InvalidArgument(format!(
                "time window requires 0 <= t1 <= t2 and t2 > 0, got [{t1}, {t2}]"
            )));
        }
        Ok(Self { t1, t2 })
    }

    /// Window degenerated to a single fixed hitting time.
    pub fn fixed(t: f64) -> Result<Self> {
        Self::new(t, t)
    }

    pub fn lower(&self) -> f64 {
        self.t1
    }

    pub fn upper(&self) -> f64 {
        self.t2
    }

    pub fn span(&self) -> f64 {
        self.t2 - self.t1
    }

    pub fn is_fixed(&self) -> bool {
        self.t2 - self.t1 <= 1e-12 * self.t2.max(1.0)
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t1 && t <= self.t2
    }
}

/// Solver configuration.
#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Number of transcription steps `N` (the grid has `N + 1` nodes).
    pub nodes: usize,
    /// Terminal constraint tolerance, scaled internally by
    /// `1 + |f at the initial guess|`.
    pub tol_constraint: f64,
    /// Gradient tolerance of the inner quasi-Newton solves, relative to
    /// the initial gradient scale.
    pub tol_grad: f64,
    /// Iteration cap per inner solve.
    pub max_inner: usize,
    /// Cap on augmented-Lagrangian outer updates per subproblem.
    pub max_outer: usize,
    /// Fixed-time solves in the coarse scan across the window.
    pub scan_points: usize,
    /// Randomized initial-guess perturbation (multi-start); `None` keeps
    /// the deterministic guess.
    pub jitter_seed: Option<u64>,
    /// Relative amplitude of the initial-guess perturbation.
    pub jitter_amplitude: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            nodes: 200,
            tol_constraint: 1e-8,
            tol_grad: 1e-6,
            max_inner: 500,
            max_outer: 40,
            scan_points: 8,
            jitter_seed: None,
            jitter_amplitude: 0.5,
        }
    }
}

/// Outcome classification of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// Constraint satisfied and inner solves reached their gradient target.
    Converged,
    /// The deterministic flow already crosses the unsafe boundary; the
    /// zero-deviation solution is returned without optimization.
    TrivialDeterministic,
    /// Iteration budget exhausted; the best iterate is reported.
    MaxIterations,
}

impl SolveStatus {
    pub fn is_usable(&self) -> bool {
        matches!(self, SolveStatus::Converged | SolveStatus::TrivialDeterministic)
    }
}

/// A candidate extremal produced by the solver.
#[derive(Debug, Clone)]
pub struct VariationalSolution {
    /// States and deviations on the physical grid `[0, T]`.
    pub path: Path,
    /// Hitting time `T`.
    pub time: f64,
    /// Discrete adjoint trajectory at the nodes.
    pub adjoint: Option<Vec<DVector<f64>>>,
    /// Terminal constraint multiplier (nonnegative).
    pub alpha: f64,
    /// Action `S_T` of the path.
    pub action: f64,
    /// Prior cost `S_0(phi(0))` (zero for fixed-start solves).
    pub initial_cost: f64,
    /// Objective value: the action for fixed-start solves,
    /// `S_T + eps * S_0` for free-start solves.
    pub objective: f64,
    pub status: SolveStatus,
    pub window: TimeWindow,
    /// True when `T` landed on a window endpoint (or the window is fixed).
    pub time_on_boundary: bool,
    /// Raw terminal level value `f(phi(T))`.
    pub constraint_value: f64,
    /// Constraint normalization `1 + |f at the initial guess|`.
    pub constraint_scale: f64,
    /// Infinity norm of the final augmented-Lagrangian gradient.
    pub grad_inf: f64,
    /// Scaled stationarity residual of the maximizing condition, measured
    /// through the deviation cotangents of the discrete problem.
    pub stationarity: f64,
    pub inner_iterations: usize,
    pub outer_iterations: usize,
}

/// What is being solved: fixed or free initial state.
#[derive(Clone, Copy)]
pub enum ProblemKind<'a> {
    MaximumLikelihood { start: &'a DVector<f64> },
    MaximumAPosteriori { prior: &'a InitialDistribution, eps: f64 },
}

/// A fully specified variational problem.
pub struct Problem<'a> {
    pub model: &'a DynamicsModel,
    pub unsafe_set: &'a UnsafeSet,
    pub kind: ProblemKind<'a>,
    pub window: TimeWindow,
    pub options: SolverOptions,
}

/// Minimum-action path from a fixed start `y` hitting the boundary inside
/// the window. Returns the trivial zero-action solution when the
/// deterministic flow from `y` already reaches the unsafe set.
pub fn solve_ml(
    model: &DynamicsModel,
    unsafe_set: &UnsafeSet,
    y: &DVector<f64>,
    window: TimeWindow,
    options: &SolverOptions,
) -> Result<VariationalSolution> {
    Problem {
        model,
        unsafe_set,
        kind: ProblemKind::MaximumLikelihood { start: y },
        window,
        options: options.clone(),
    }
    .solve()
}

/// Most probable unsafe path with a Gaussian-uncertain initial state:
/// minimizes `S_T + eps * S_0(phi(0))` with the start free.
pub fn solve_map(
    model: &DynamicsModel,
    unsafe_set: &UnsafeSet,
    prior: &InitialDistribution,
    eps: f64,
    window: TimeWindow,
    options: &SolverOptions,
) -> Result<VariationalSolution> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("noise scale eps must be positive".into()));
    }
    Problem {
        model,
        unsafe_set,
        kind: ProblemKind::MaximumAPosteriori { prior, eps },
        window,
        options: options.clone(),
    }
    .solve()
}

/// Quasi-potential `Q(y)`: the optimal action from `y`; zero inside the
/// unsafe set.
pub fn quasipotential(
    model: &DynamicsModel,
    unsafe_set: &UnsafeSet,
    y: &DVector<f64>,
    window: TimeWindow,
    options: &SolverOptions,
) -> Result<f64> {
    Ok(solve_ml(model, unsafe_set, y, window, options)?.objective)
}

impl<'a> Problem<'a> {
    pub fn solve(&self) -> Result<VariationalSolution> {
        self.solve_with_guess(None)
    }

    fn start_point(&self) -> &DVector<f64> {
        match self.kind {
            ProblemKind::MaximumLikelihood { start } => start,
            ProblemKind::MaximumAPosteriori { prior, .. } => prior.mean(),
        }
    }

    /// Solves, optionally warm-starting from a previous solution's
    /// deviations and time (grids must use the same node count).
    pub fn solve_with_guess(
        &self,
        warm: Option<&VariationalSolution>,
    ) -> Result<VariationalSolution> {
        let start = self.start_point();
        if start.len() != self.model.dim() {
            return Err(Error::Dimension(format!(
                "start state has dimension {}, model expects {}",
                start.len(),
                self.model.dim()
            )));
        }
        if self.options.nodes < 2 {
            return Err(Error::InvalidArgument("solver needs at least 2 nodes".into()));
        }

        // Deterministic-crossing check: zero action is optimal whenever the
        // unperturbed flow reaches the set at any time up to t2.
        if let Some(t_cross) = self.deterministic_crossing(start)? {
            return self.trivial_solution(start, t_cross);
        }

        let engine = Engine::new(self, warm, None, None)?;
        engine.run()
    }

    fn deterministic_crossing(&self, start: &DVector<f64>) -> Result<Option<f64>> {
        if self.unsafe_set.value(start) <= 0.0 {
            return Ok(Some(0.0));
        }
        let steps = (4 * self.options.nodes).max(512);
        let flow = self.model.flow_deterministic(start, self.window.upper(), steps)?;
        let mut prev = self.unsafe_set.value(&flow.states[0]);
        for k in 1..flow.grid.len() {
            let cur = self.unsafe_set.value(&flow.states[k]);
            if cur <= 0.0 {
                let t0 = flow.grid.times()[k - 1];
                let t1 = flow.grid.times()[k];
                let frac = if prev - cur != 0.0 { prev / (prev - cur) } else { 1.0 };
                return Ok(Some(t0 + frac * (t1 - t0)));
            }
            prev = cur;
        }
        Ok(None)
    }

    fn trivial_solution(&self, start: &DVector<f64>, t_cross: f64) -> Result<VariationalSolution> {
        let t = t_cross
            .max(self.window.lower())
            .max(1e-3 * self.window.upper())
            .min(self.window.upper());
        let flow = self.model.flow_deterministic(start, t, self.options.nodes)?;
        let n_nodes = flow.grid.len();
        let adjoint = vec![DVector::zeros(self.model.dim()); n_nodes];
        let constraint_value = self.unsafe_set.value(flow.terminal_state());
        let initial_cost = match self.kind {
            ProblemKind::MaximumAPosteriori { prior, .. } => prior.initial_cost(start),
            ProblemKind::MaximumLikelihood { .. } => 0.0,
        };
        let objective = match self.kind {
            ProblemKind::MaximumAPosteriori { eps, .. } => eps * initial_cost,
            ProblemKind::MaximumLikelihood { .. } => 0.0,
        };
        Ok(VariationalSolution {
            path: flow,
            time: t,
            adjoint: Some(adjoint),
            alpha: 0.0,
            action: 0.0,
            initial_cost,
            objective,
            status: SolveStatus::TrivialDeterministic,
            window: self.window,
            time_on_boundary: false,
            constraint_value,
            constraint_scale: 1.0 + constraint_value.abs(),
            grad_inf: 0.0,
            stationarity: 0.0,
            inner_iterations: 0,
            outer_iterations: 0,
        })
    }
}

/// Augmented-Lagrangian engine over the transcription.
struct Engine<'a> {
    problem: &'a Problem<'a>,
    tr: Transcription<'a>,
    /// Cholesky factor of the prior covariance (free-start only).
    chol_l: Option<DMatrix<f64>>,
    eps: f64,
    start: DVector<f64>,
    f_scale: f64,
    w: Vec<DVector<f64>>,
    xi: DVector<f64>,
    alpha_hat: f64,
    rho: f64,
    inner_total: std::cell::Cell<usize>,
    outer_total: std::cell::Cell<usize>,
    grad_scale: std::cell::Cell<f64>,
}

struct SubproblemOutcome {
    objective: f64,
    grad_inf: f64,
    converged: bool,
}

impl<'a> Engine<'a> {
    fn new(
        problem: &'a Problem<'a>,
        warm: Option<&VariationalSolution>,
        nodes_override: Option<usize>,
        f_scale_override: Option<f64>,
    ) -> Result<Self> {
        let model = problem.model;
        let n = nodes_override.unwrap_or(problem.options.nodes);
        let tr = Transcription::new(model, problem.unsafe_set, n);
        let (chol_l, eps) = match problem.kind {
            ProblemKind::MaximumAPosteriori { prior, eps } => {
                if prior.dim() != model.dim() {
                    return Err(Error::Dimension(format!(
                        "prior has dimension {}, model expects {}",
                        prior.dim(),
                        model.dim()
                    )));
                }
                (Some(prior.chol_l()), eps)
            }
            ProblemKind::MaximumLikelihood { .. } => (None, 0.0),
        };
        let start = problem.start_point().clone();

        let (w, xi, s_hint) = match warm {
            Some(sol) if sol.path.grid.len() == n + 1 && sol.path.deviations.is_some() => {
                let w = sol.path.deviations.clone().unwrap();
                // Recover xi from the warm start's initial state.
                let xi = match (&chol_l, problem.kind) {
                    (Some(l), ProblemKind::MaximumAPosteriori { prior, .. }) => {
                        let delta = sol.path.initial_state() - prior.mean();
                        l.clone()
                            .lu()
                            .solve(&delta)
                            .unwrap_or_else(|| DVector::zeros(model.dim()))
                    }
                    _ => DVector::zeros(0),
                };
                (w, xi, Some(sol.time))
            }
            _ => {
                let w = build_initial_guess(problem, &start)?;
                let xi = if chol_l.is_some() {
                    initial_xi(problem, model.dim())
                } else {
                    DVector::zeros(0)
                };
                (w, xi, None)
            }
        };

        // Constraint scale from the initial guess's terminal level.
        let s0 = s_hint.unwrap_or_else(|| {
            if problem.window.is_fixed() {
                problem.window.lower()
            } else {
                0.5 * (problem.window.lower() + problem.window.upper())
            }
        });
        let phi0 = match &chol_l {
            Some(l) => &start + l * &xi,
            None => start.clone(),
        };
        let f_scale = match (f_scale_override, warm) {
            (Some(fs), _) => fs,
            (None, Some(sol)) => sol.constraint_scale,
            (None, None) => {
                let probe = tr.forward(&phi0, &w, s0);
                1.0 + tr.terminal_level(&probe).abs()
            }
        };

        Ok(Self {
            problem,
            tr,
            chol_l,
            eps,
            start,
            f_scale,
            w,
            xi,
            alpha_hat: 0.0,
            rho: 10.0,
            inner_total: std::cell::Cell::new(0),
            outer_total: std::cell::Cell::new(0),
            grad_scale: std::cell::Cell::new(0.0),
        })
    }

    fn n_steps(&self) -> usize {
        self.tr.n_steps
    }

    fn dev_dim(&self) -> usize {
        self.problem.model.dev_dim()
    }

    fn flat_len(&self, free_s: bool) -> usize {
        (self.n_steps() + 1) * self.dev_dim() + self.xi.len() + usize::from(free_s)
    }

    fn pack(&self, s: f64, free_s: bool) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.flat_len(free_s));
        for wk in &self.w {
            z.extend_from_slice(wk.as_slice());
        }
        z.extend_from_slice(self.xi.as_slice());
        if free_s {
            z.push(s);
        }
        z
    }

    fn unpack(&self, z: &[f64], s_fixed: f64, free_s: bool) -> (Vec<DVector<f64>>, DVector<f64>, f64) {
        let dev = self.dev_dim();
        let nn = self.n_steps() + 1;
        let mut w = Vec::with_capacity(nn);
        for k in 0..nn {
            w.push(DVector::from_column_slice(&z[k * dev..(k + 1) * dev]));
        }
        let xi_len = self.xi.len();
        let xi = DVector::from_column_slice(&z[nn * dev..nn * dev + xi_len]);
        let s = if free_s { z[nn * dev + xi_len] } else { s_fixed };
        (w, xi, s)
    }

    fn phi0(&self, xi: &DVector<f64>) -> DVector<f64> {
        match &self.chol_l {
            Some(l) => &self.start + l * xi,
            None => self.start.clone(),
        }
    }

    /// Augmented Lagrangian value and gradient at a flat point.
    fn eval(
        &self,
        z: &[f64],
        grad: &mut [f64],
        alpha_hat: f64,
        rho: f64,
        s_fixed: f64,
        free_s: bool,
    ) -> (f64, f64, f64) {
        let (w, xi, s) = self.unpack(z, s_fixed, free_s);
        let dev = self.dev_dim();
        let nn = self.n_steps() + 1;
        grad.iter_mut().for_each(|g| *g = 0.0);

        if !(s > 0.0) || !s.is_finite() {
            return (f64::INFINITY, f64::INFINITY, f64::INFINITY);
        }
        let phi0 = self.phi0(&xi);
        let fp = self.tr.forward(&phi0, &w, s);
        if fp.diverged {
            return (f64::INFINITY, f64::INFINITY, f64::INFINITY);
        }

        let mut grad_w = vec![DVector::zeros(dev); nn];
        let action_unit = self.tr.action_gradients(&w, s, &mut grad_w);
        let action = s * action_unit;
        let mut grad_s = action_unit;
        let mut grad_xi = &xi * self.eps;
        let prior_cost = 0.5 * self.eps * xi.norm_squared();

        let c_raw = self.tr.terminal_level(&fp);
        let c_hat = c_raw / self.f_scale;
        let mult = alpha_hat + rho * c_hat;
        let psi = if mult > 0.0 {
            alpha_hat * c_hat + 0.5 * rho * c_hat * c_hat
        } else {
            -alpha_hat * alpha_hat / (2.0 * rho)
        };
        if mult > 0.0 {
            let seed = self
                .problem
                .unsafe_set
                .gradient_full(fp.states.last().unwrap())
                * (mult / self.f_scale);
            let sweep = self.tr.reverse(&fp, s, &seed, false);
            for k in 0..nn {
                grad_w[k] += &sweep.grad_w[k];
            }
            if let Some(l) = &self.chol_l {
                grad_xi += l.transpose() * &sweep.grad_x0;
            }
            grad_s += sweep.grad_s;
        }

        for (k, gw) in grad_w.iter().enumerate() {
            grad[k * dev..(k + 1) * dev].copy_from_slice(gw.as_slice());
        }
        grad[nn * dev..nn * dev + xi.len()].copy_from_slice(grad_xi.as_slice());
        if free_s {
            grad[nn * dev + xi.len()] = grad_s;
        }

        let value = action + prior_cost + psi;
        let objective = action + prior_cost;
        (value, objective, c_hat)
    }

    /// One augmented-Lagrangian subproblem at fixed (or free) time scale.
    #[allow(clippy::too_many_arguments)]
    fn subproblem(
        &mut self,
        s: f64,
        free_s: bool,
        inner_budget: usize,
        gtol: f64,
        max_outer: usize,
        tighten: bool,
        schedule: bool,
    ) -> (SubproblemOutcome, f64) {
        let mut z = self.pack(s, free_s);
        let mut c_prev = f64::INFINITY;
        let mut final_obj = f64::INFINITY;
        let mut final_c = f64::INFINITY;
        let mut final_grad = f64::INFINITY;
        let mut inner_converged = false;
        let mut s_current = s;
        let tol_c = self.problem.options.tol_constraint;

        for outer in 0..max_outer {
            let alpha_hat = self.alpha_hat;
            let rho = self.rho;
            // Loose inner tolerance on early outers, tightening toward the
            // target as the multiplier settles.
            let gtol_outer = if schedule {
                (gtol * 10f64.powi((4 - outer as i32).max(0))).max(gtol)
            } else {
                gtol
            };
            let outcome = lbfgs::minimize(
                |zz, gg| self.eval(zz, gg, alpha_hat, rho, s, free_s).0,
                z,
                &LbfgsOptions { memory: 12, max_iter: inner_budget, grad_tol: gtol_outer },
            );
            self.inner_total.set(self.inner_total.get() + outcome.iterations);
            self.outer_total.set(self.outer_total.get() + 1);
            z = outcome.x;
            let (w, xi, s_new) = self.unpack(&z, s, free_s);
            self.w = w;
            self.xi = xi;
            s_current = s_new;
            // Clean re-evaluation at the accepted iterate (the last closure
            // call inside the line search may have been a rejected trial).
            let mut scratch = vec![0.0; z.len()];
            let (_, obj_final, c_final) =
                self.eval(&z, &mut scratch, alpha_hat, rho, s, free_s);
            final_obj = obj_final;
            final_c = c_final;
            final_grad = scratch.iter().fold(0.0f64, |m, &g| m.max(g.abs()));
            inner_converged =
                matches!(outcome.stop, StopReason::GradTol | StopReason::Stalled);

            let viol = if self.alpha_hat + self.rho * final_c > 0.0 {
                final_c.abs()
            } else {
                final_c.max(0.0)
            };
            if std::env::var("AL_TRACE").is_ok() {
                eprintln!("outer {outer}: c = {final_c:.3e} viol = {viol:.3e} alpha_hat = {:.3e} rho = {:.1e} grad = {:.2e} obj = {final_obj:.9}", self.alpha_hat, self.rho, final_grad);
            }
            let new_alpha = (self.alpha_hat + self.rho * final_c).max(0.0);
            let at_final_tol = gtol_outer <= gtol * 1.0000001;
            let done = viol <= tol_c && inner_converged && at_final_tol;
            let tight_done = !tighten || final_c.abs() <= 1e-11 || outer + 2 >= max_outer;
            self.alpha_hat = new_alpha;
            if done && tight_done {
                break;
            }
            if viol > tol_c {
                let ratio = final_c.abs() / c_prev.abs().max(1e-300);
                if ratio > 0.5 {
                    self.rho = (self.rho * 100.0).min(1e13);
                } else if ratio > 0.15 {
                    self.rho = (self.rho * 10.0).min(1e13);
                }
            }
            c_prev = final_c;
        }

        (
            SubproblemOutcome {
                objective: final_obj,
                grad_inf: final_grad,
                converged: inner_converged && final_c.max(0.0).abs() <= tol_c * 10.0,
            },
            s_current,
        )
    }

    fn run(mut self) -> Result<VariationalSolution> {
        let opts = self.problem.options.clone();
        let window = self.problem.window;

        let gscale = self.gradient_scale(window);
        self.grad_scale.set(gscale);
        let gtol_final = opts.tol_grad * gscale;
        let gtol_polish = (opts.tol_grad * gscale * 1e-3).max(1e-13);

        let (s_star, boundary) = if window.is_fixed() {
            let (_, _) = self.subproblem(
                window.lower(),
                false,
                opts.max_inner,
                gtol_final,
                opts.max_outer,
                false,
                true,
            );
            (window.lower(), true)
        } else {
            // Search the free hitting time on a coarsened grid (the
            // optimal time barely depends on the node count), then
            // re-converge the transferred iterate on the full grid.
            let coarse_nodes = (opts.nodes / 8).max(100).min(opts.nodes);
            let (s_star, boundary) = if coarse_nodes < self.n_steps() {
                let mut coarse =
                    Engine::new(self.problem, None, Some(coarse_nodes), Some(self.f_scale))?;
                let sb = coarse.search_time(&opts);
                self.w = resample_nodes(&coarse.w, self.n_steps());
                self.xi = coarse.xi.clone();
                self.alpha_hat = coarse.alpha_hat;
                self.rho = coarse.rho;
                self.inner_total
                    .set(self.inner_total.get() + coarse.inner_total.get());
                self.outer_total
                    .set(self.outer_total.get() + coarse.outer_total.get());
                sb
            } else {
                self.search_time(&opts)
            };
            let (_, _) = self.subproblem(
                s_star,
                false,
                opts.max_inner,
                gtol_final,
                opts.max_outer,
                false,
                false,
            );
            (s_star, boundary)
        };

        // Joint polish: free the time scale at interior optima, keep it
        // pinned on window boundaries; drive the gradient and the
        // constraint as far down as floating point allows.
        let free_s = !boundary;
        let (out, s_polished) =
            self.subproblem(s_star, free_s, opts.max_inner, gtol_polish, 20, true, false);
        let mut s_final = if free_s { s_polished } else { s_star };
        let mut boundary_final = boundary;
        if free_s && !window.contains(s_final) {
            s_final = s_final.clamp(window.lower(), window.upper());
            boundary_final = true;
            let _ = self.subproblem(s_final, false, opts.max_inner, gtol_polish, 10, true, false);
        }

        self.extract(s_final, boundary_final, out)
    }

    /// Gradient magnitude at the initial iterate, used to scale the inner
    /// tolerances.
    fn gradient_scale(&self, window: TimeWindow) -> f64 {
        let s_probe = if window.is_fixed() {
            window.lower()
        } else {
            0.5 * (window.lower() + window.upper())
        };
        let z0 = self.pack(s_probe, false);
        let mut g0 = vec![0.0; z0.len()];
        let _ = self.eval(&z0, &mut g0, 0.0, self.rho, s_probe, false);
        1.0 + g0.iter().fold(0.0f64, |m, &g| m.max(g.abs()))
    }

    /// Coarse scan plus bracketed refinement of the free hitting time.
    /// Returns the chosen time and whether it sits on a window edge.
    fn search_time(&mut self, opts: &SolverOptions) -> (f64, bool) {
        let window = self.problem.window;
        let gscale = self.gradient_scale(window);
        let gtol_scan = opts.tol_grad * gscale * 10.0;

        let points = opts.scan_points.max(2);
        let offset = jitter_offset(opts);
        let mut best = (f64::INFINITY, window.lower(), self.snapshot());
        let mut scan_s = Vec::with_capacity(points);
        for i in 0..points {
            let frac = (i as f64 + offset).min(points as f64 - 1.0) / (points as f64 - 1.0);
            let s_i = window.lower() + window.span() * frac;
            scan_s.push(s_i);
            let (out, _) = self.subproblem(
                s_i,
                false,
                opts.max_inner / 3 + 20,
                gtol_scan,
                20,
                false,
                true,
            );
            if out.converged && out.objective < best.0 {
                best = (out.objective, s_i, self.snapshot());
            }
        }
        if !best.0.is_finite() {
            // No scan point converged; fall back to the midpoint.
            best.1 = 0.5 * (window.lower() + window.upper());
        }
        self.restore(best.2.clone());

        // Bracket around the best scan point and refine by bounded
        // one-dimensional minimization over the time scale.
        let idx = scan_s.iter().position(|&s| s == best.1).unwrap_or(points / 2);
        let lo = if idx == 0 { window.lower() } else { scan_s[idx - 1] };
        let hi = if idx + 1 >= points { window.upper() } else { scan_s[idx + 1] };
        let time_tol = 1e-7 * window.span().max(1e-12);
        let mut cache_best = (best.0, best.1, self.snapshot());
        let s_min = brent_min(
            |s| {
                let (out, _) = self.subproblem(
                    s,
                    false,
                    opts.max_inner / 3 + 20,
                    gtol_scan,
                    10,
                    false,
                    false,
                );
                if out.converged && out.objective < cache_best.0 {
                    cache_best = (out.objective, s, self.snapshot());
                }
                out.objective
            },
            lo,
            hi,
            time_tol,
            60,
        );
        self.restore(cache_best.2.clone());
        let mut s_star = if cache_best.0.is_finite() { cache_best.1 } else { s_min };
        let snap = (1e-6 * window.span()).max(2.0 * time_tol);
        let mut boundary = false;
        if s_star - window.lower() <= snap {
            s_star = window.lower();
            boundary = true;
        } else if window.upper() - s_star <= snap {
            s_star = window.upper();
            boundary = true;
        }
        (s_star, boundary)
    }

    fn snapshot(&self) -> (Vec<DVector<f64>>, DVector<f64>, f64, f64) {
        (self.w.clone(), self.xi.clone(), self.alpha_hat, self.rho)
    }

    fn restore(&mut self, snap: (Vec<DVector<f64>>, DVector<f64>, f64, f64)) {
        self.w = snap.0;
        self.xi = snap.1;
        self.alpha_hat = snap.2;
        self.rho = snap.3;
    }

    fn extract(
        self,
        s: f64,
        boundary: bool,
        out: SubproblemOutcome,
    ) -> Result<VariationalSolution> {
        let model = self.problem.model;
        let phi0 = self.phi0(&self.xi);
        let fp = self.tr.forward(&phi0, &self.w, s);
        let c_raw = self.tr.terminal_level(&fp);
        let alpha = (self.alpha_hat + self.rho * (c_raw / self.f_scale)).max(0.0) / self.f_scale;

        // Discrete adjoint: reverse accumulation of the raw terminal level,
        // scaled by the extracted multiplier.
        let seed = self.problem.unsafe_set.gradient_full(fp.states.last().unwrap());
        let sweep = self.tr.reverse(&fp, s, &seed, true);
        let cotangents = sweep.node_cotangents.as_ref().unwrap();
        let adjoint: Vec<DVector<f64>> = cotangents.iter().map(|p| p * (-alpha)).collect();

        // Maximizing-condition residual through the deviation cotangents:
        // at a KKT point  s c_k w_k + alpha * dF/dw_k = 0  exactly.
        let w_inf = self.w.iter().map(|w| w.amax()).fold(0.0f64, f64::max);
        let sl_inf = adjoint
            .iter()
            .map(|l| model.diffusion_t_apply(l).amax())
            .fold(0.0f64, f64::max);
        let stat_scale = 1.0 + w_inf + sl_inf;
        let mut stationarity = 0.0f64;
        for k in 0..=self.n_steps() {
            let resid = (&self.w[k] * (s * self.tr.weights[k])
                + &sweep.grad_w[k] * alpha)
                .amax()
                / (s * self.tr.weights[k]);
            stationarity = stationarity.max(resid / stat_scale);
        }

        let action = self.tr.action(&self.w, s);
        let initial_cost = match self.problem.kind {
            ProblemKind::MaximumAPosteriori { prior, .. } => prior.initial_cost(&phi0),
            ProblemKind::MaximumLikelihood { .. } => 0.0,
        };
        let objective = action + self.eps * initial_cost;

        let grid = TimeGrid::uniform(s, self.n_steps())?;
        let path = Path::with_deviations(grid, fp.states, self.w.clone())?;

        let status = if out.converged && c_raw / self.f_scale <= self.problem.options.tol_constraint
        {
            SolveStatus::Converged
        } else {
            SolveStatus::MaxIterations
        };

        Ok(VariationalSolution {
            path,
            time: s,
            adjoint: Some(adjoint),
            alpha,
            action,
            initial_cost,
            objective,
            status,
            window: self.problem.window,
            time_on_boundary: boundary,
            constraint_value: c_raw,
            constraint_scale: self.f_scale,
            grad_inf: out.grad_inf,
            stationarity,
            inner_iterations: self.inner_total.get(),
            outer_iterations: self.outer_total.get(),
        })
    }
}

/// Linear resampling of node values onto a finer uniform grid.
fn resample_nodes(values: &[DVector<f64>], n_new: usize) -> Vec<DVector<f64>> {
    let n_old = values.len() - 1;
    (0..=n_new)
        .map(|k| {
            let x = k as f64 / n_new as f64 * n_old as f64;
            let i = (x.floor() as usize).min(n_old - 1);
            let a = x - i as f64;
            &values[i] * (1.0 - a) + &values[i + 1] * a
        })
        .collect()
}

fn jitter_offset(opts: &SolverOptions) -> f64 {
    match opts.jitter_seed {
        None => 0.0,
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            rand::Rng::random_range(&mut rng, 0.0..0.45)
        }
    }
}

fn initial_xi(problem: &Problem<'_>, dim: usize) -> DVector<f64> {
    match problem.options.jitter_seed {
        None => DVector::zeros(dim),
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
            DVector::from_fn(dim, |_, _| {
                let g: f64 = StandardNormal.sample(&mut rng);
                problem.options.jitter_amplitude * g
            })
        }
    }
}

/// Initial deviation guess: a straight line to the projected boundary
/// point for first-order models, the unperturbed flow for mechanical ones
/// (a straight position path is dynamically infeasible at orbital
/// energies and stalls the first inner solves).
fn build_initial_guess(problem: &Problem<'_>, start: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
    let model = problem.model;
    let n = problem.options.nodes;
    let dev = model.dev_dim();
    let s_guess = if problem.window.is_fixed() {
        problem.window.lower()
    } else {
        0.5 * (problem.window.lower() + problem.window.upper())
    };

    let mut w = vec![DVector::zeros(dev); n + 1];
    if model.kind() == ModelKind::FirstOrder {
        let target = project_with_retries(problem, start);
        if let Some(target) = target {
            let grid = TimeGrid::uniform(s_guess, n)?;
            let states: Vec<DVector<f64>> = grid
                .times()
                .iter()
                .map(|&t| {
                    let a = t / s_guess;
                    start * (1.0 - a) + &target * a
                })
                .collect();
            let line = Path::new(grid, states)?;
            if let Ok(rec) = recover_deviation(&line, model) {
                w = rec.deviations.unwrap();
            }
        }
    }

    if let Some(seed) = problem.options.jitter_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_inf = w.iter().map(|wk| wk.amax()).fold(0.0f64, f64::max);
        let amp = problem.options.jitter_amplitude * (1.0 + w_inf);
        for j in 1..=3usize {
            let dir = DVector::from_fn(dev, |_, _| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g
            });
            for (k, wk) in w.iter_mut().enumerate() {
                let tau = k as f64 / n as f64;
                *wk += &dir * (amp / j as f64 * (j as f64 * std::f64::consts::PI * tau).sin());
            }
        }
    }
    Ok(w)
}

fn project_with_retries(problem: &Problem<'_>, start: &DVector<f64>) -> Option<DVector<f64>> {
    if let Ok(z) = problem.unsafe_set.project_to_boundary(start, 200) {
        return Some(z);
    }
    // A vanishing level gradient (symmetric sets) needs a nudge; use the
    // jitter stream when present, a fixed offset otherwise.
    let scale = 0.1 * (1.0 + start.amax());
    let mut rng = ChaCha8Rng::seed_from_u64(problem.options.jitter_seed.unwrap_or(1));
    for _ in 0..8 {
        let nudge = DVector::from_fn(start.len(), |_, _| {
            let g: f64 = StandardNormal.sample(&mut rng);
            scale * g
        });
        if let Ok(z) = problem.unsafe_set.project_to_boundary(&(start + nudge), 200) {
            return Some(z);
        }
    }
    None
}

/// Bounded scalar minimization (golden section with parabolic steps).
fn brent_min<F: FnMut(f64) -> f64>(
    mut f: F,
    a0: f64,
    b0: f64,
    xtol: f64,
    max_iter: usize,
) -> f64 {
    const CGOLD: f64 = 0.381_966_011_250_105;
    let (mut a, mut b) = (a0.min(b0), a0.max(b0));
    let mut x = a + CGOLD * (b - a);
    let mut w = x;
    let mut v = x;
    let mut fx = f(x);
    let mut fw = fx;
    let mut fv = fx;
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;

    for _ in 0..max_iter {
        let m = 0.5 * (a + b);
        let tol = xtol.max(1e-12 * x.abs());
        if (x - m).abs() <= 2.0 * tol - 0.5 * (b - a) {
            break;
        }
        let mut use_golden = true;
        if e.abs() > tol {
            // Parabolic fit through (x, w, v).
            let r = (x - w) * (fx - fv);
            let q_ = (x - v) * (fx - fw);
            let mut p = (x - v) * q_ - (x - w) * r;
            let mut q2 = 2.0 * (q_ - r);
            if q2 > 0.0 {
                p = -p;
            }
            q2 = q2.abs();
            let e_old = e;
            e = d;
            if p.abs() < (0.5 * q2 * e_old).abs() && p > q2 * (a - x) && p < q2 * (b - x) {
                d = p / q2;
                let u = x + d;
                if u - a < 2.0 * tol || b - u < 2.0 * tol {
                    d = if m > x { tol } else { -tol };
                }
                use_golden = false;
            }
        }
        if use_golden {
            e = if x < m { b - x } else { a - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol { x + d } else { x + if d > 0.0 { tol } else { -tol } };
        let fu = f(u);
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    x
}

/// Runs the same problem from `n_starts` randomized initial guesses and
/// returns the distinct local minimizers, sorted by objective (ties by
/// smaller time). Start index 0 uses the deterministic guess.
pub fn multi_start(
    problem: &Problem<'_>,
    n_starts: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<VariationalSolution>> {
    if n_starts == 0 {
        return Err(Error::InvalidArgument("multi_start needs at least one start".into()));
    }
    let run_one = |i: usize| -> Result<VariationalSolution> {
        let mut opts = problem.options.clone();
        if i > 0 {
            opts.jitter_seed =
                Some(seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        }
        Problem {
            model: problem.model,
            unsafe_set: problem.unsafe_set,
            kind: problem.kind,
            window: problem.window,
            options: opts,
        }
        .solve()
    };

    let mut results: Vec<Option<Result<VariationalSolution>>> = Vec::new();
    if threads <= 1 || n_starts == 1 {
        for i in 0..n_starts {
            results.push(Some(run_one(i)));
        }
    } else {
        let slots: Vec<std::sync::Mutex<Option<Result<VariationalSolution>>>> =
            (0..n_starts).map(|_| std::sync::Mutex::new(None)).collect();
        let counter = std::sync::atomic::AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..threads.min(n_starts) {
                scope.spawn(|| loop {
                    let i = counter.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= n_starts {
                        break;
                    }
                    *slots[i].lock().unwrap() = Some(run_one(i));
                });
            }
        });
        results = slots.into_iter().map(|m| m.into_inner().unwrap()).collect();
    }

    let mut usable: Vec<VariationalSolution> = results
        .into_iter()
        .flatten()
        .filter_map(|r| r.ok())
        .filter(|s| s.status.is_usable())
        .collect();
    if usable.is_empty() {
        return Err(Error::AllStartsFailed);
    }
    usable.sort_by(|a, b| {
        a.objective
            .total_cmp(&b.objective)
            .then(a.time.total_cmp(&b.time))
    });

    // Deduplicate by sup-norm path distance (the first survivor of a
    // cluster has the best objective).
    let mut kept: Vec<VariationalSolution> = Vec::new();
    'outer: for cand in usable {
        let scale = 1.0
            + cand
                .path
                .states
                .iter()
                .map(|s| s.amax())
                .fold(0.0f64, f64::max);
        for existing in &kept {
            if existing.path.grid.len() == cand.path.grid.len()
                && (existing.time - cand.time).abs() <= 1e-3 * (1.0 + cand.time)
                && existing.path.sup_distance(&cand.path).unwrap_or(f64::INFINITY)
                    <= 1e-3 * scale
            {
                continue 'outer;
            }
        }
        kept.push(cand);
    }
    Ok(kept)
}
