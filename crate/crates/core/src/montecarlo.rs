//! Euler-Maruyama simulation and hitting/tube probability estimators.
//!
//! Random numbers use one counter-based stream per path (ChaCha streams
//! keyed by the path index), so estimates are bit-reproducible for a given
//! `(seed, n, dt)` regardless of how paths are distributed over workers.
//! Reductions use fixed-order pairwise summation.
//!
//! Hitting detection is a per-step sign check of the level function with
//! no bridge correction; the resulting underestimation shrinks with `dt`
//! and can be bounded empirically by halving the step.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::action::InitialDistribution;
use crate::dynamics::{DynamicsModel, ModelKind, Path};
use crate::error::{Error, Result};
use crate::solver::VariationalSolution;
use crate::unsafe_set::UnsafeSet;
use crate::util::pairwise_sum;

/// One simulated trajectory.
#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub terminal_state: DVector<f64>,
    /// True iff the path entered the unsafe set by the final time.
    pub hit: bool,
    /// First grid time with `f <= 0`, when any.
    pub hitting_time: Option<f64>,
    /// Stored trajectory (states at every step), on request.
    pub trajectory: Option<Vec<DVector<f64>>>,
}

/// A `[0, 1]` estimate with its standard error.
#[derive(Debug, Clone)]
pub struct EstimateWithCI {
    pub estimate: f64,
    pub std_error: f64,
    pub samples: usize,
    /// Effective sample size (importance sampling only).
    pub effective_samples: Option<f64>,
    /// Raised when the weight distribution is too degenerate to trust
    /// (effective sample size below 10).
    pub degenerate_weights: bool,
}

fn stream_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index.wrapping_add(1));
    rng
}

fn gaussian_increment<R: Rng>(rng: &mut R, dim: usize) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal))
}

struct EmStepper<'a> {
    model: &'a DynamicsModel,
    /// sqrt(eps * dt) * sigma, the per-step noise factor.
    noise_factor: nalgebra::DMatrix<f64>,
    dt: f64,
}

impl<'a> EmStepper<'a> {
    fn new(model: &'a DynamicsModel, eps: f64, dt: f64) -> Self {
        let noise_factor = model.sigma() * (eps * dt).sqrt();
        Self { model, noise_factor, dt }
    }

    /// One Euler-Maruyama step; `z` is a standard normal draw of the
    /// deviation dimension.
    fn step(&self, x: &DVector<f64>, z: &DVector<f64>, extra_drift: Option<&DVector<f64>>) -> DVector<f64> {
        let mut out = x + self.model.drift_unchecked(x) * self.dt;
        if let Some(w) = extra_drift {
            // Tilted simulation: drift shifted by sigma * w.
            add_to_noise_block(self.model, &mut out, &(self.model.sigma() * w * self.dt));
        }
        add_to_noise_block(self.model, &mut out, &(&self.noise_factor * z));
        out
    }
}

fn add_to_noise_block(model: &DynamicsModel, x: &mut DVector<f64>, v: &DVector<f64>) {
    match model.kind() {
        ModelKind::FirstOrder => *x += v,
        ModelKind::Mechanical => {
            let m = model.pos_dim();
            let mut block = x.rows_mut(m, m);
            block += v;
        }
    }
}

/// Simulates `dX = b dt + sqrt(eps) sigma dW` from `y0` over `[0, T]` by
/// Euler-Maruyama with step `dt`, checking the hitting condition at every
/// grid point. Deterministic for a given seed.
pub fn simulate_em(
    model: &DynamicsModel,
    unsafe_set: &UnsafeSet,
    y0: &DVector<f64>,
    eps: f64,
    duration: f64,
    dt: f64,
    seed: u64,
    store_trajectory: bool,
) -> Result<SimulationResult> {
    if y0.len() != model.dim() {
        return Err(Error::Dimension(format!(
            "initial state has dimension {}, model expects {}",
            y0.len(),
            model.dim()
        )));
    }
    if !(dt > 0.0) || !(duration > 0.0) {
        return Err(Error::InvalidArgument("duration and dt must be positive".into()));
    }
    if eps < 0.0 {
        return Err(Error::InvalidArgument("eps must be nonnegative".into()));
    }
    let mut rng = stream_rng(seed, 0);
    simulate_one(model, unsafe_set, y0, eps, duration, dt, &mut rng, store_trajectory, None)
}

#[allow(clippy::too_many_arguments)]
fn simulate_one<R: Rng>(
    model: &DynamicsModel,
    unsafe_set: &UnsafeSet,
    y0: &DVector<f64>,
    eps: f64,
    duration: f64,
    dt: f64,
    rng: &mut R,
    store_trajectory: bool,
    tilt: Option<&TiltTable>,
) -> Result<SimulationResult> {
    let steps = (duration / dt).ceil() as usize;
    let stepper = EmStepper::new(model, eps, dt);
    let mut x = y0.clone();
    let mut trajectory = if store_trajectory { Some(vec![x.clone()]) } else { None };
    let mut hit = unsafe_set.contains(&x);
    let mut hitting_time = if hit { Some(0.0) } else { None };

    for k in 0..steps {
        let z = gaussian_increment(rng, model.dev_dim());
        let w = tilt.map(|t| t.at_step(k));
        x = stepper.step(&x, &z, w);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("simulation diverged".into()));
        }
        if let Some(tr) = trajectory.as_mut() {
            tr.push(x.clone());
        }
        if hitting_time.is_none() && unsafe_set.contains(&x) {
            hit = true;
            hitting_time = Some(((k + 1) as f64 * dt).min(duration));
        }
    }
    Ok(SimulationResult { terminal_state: x, hit, hitting_time, trajectory })
}

/// Where hitting-probability runs start from.
pub enum StartState<'a> {
    Fixed(&'a DVector<f64>),
    Random(&'a InitialDistribution),
}

/// Crude Monte Carlo estimate of `P[tau_D <= T]` over `n` paths, with the
/// initial state optionally drawn from the prior (the measure-averaged
/// hitting probability).
#[allow(clippy::too_many_arguments)]
pub fn estimate_hitting_probability(
    model: &DynamicsModel,
    unsafe_set: &UnsafeSet,
    start: StartState<'_>,
    eps: f64,
    duration: f64,
    dt: f64,
    n: usize,
    seed: u64,
    threads: usize,
) -> Result<EstimateWithCI> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let mut hits = vec![0.0f64; n];
    run_paths(&mut hits, threads, |i| {
        let mut rng = stream_rng(seed, i as u64);
        let y0 = match &start {
            StartState::Fixed(y) => (*y).clone(),
            StartState::Random(dist) => dist.sample(&mut rng),
        };
        let sim =
            simulate_one(model, unsafe_set, &y0, eps, duration, dt, &mut rng, false, None)?;
        Ok(if sim.hit { 1.0 } else { 0.0 })
    })?;
    let p = pairwise_sum(&hits) / n as f64;
    let std_error = (p * (1.0 - p) / n as f64).sqrt();
    Ok(EstimateWithCI {
        estimate: p,
        std_error,
        samples: n,
        effective_samples: None,
        degenerate_weights: false,
    })
}

/// Fraction of simulated paths staying within sup-norm distance `delta`
/// of the reference path at every simulation grid time.
#[allow(clippy::too_many_arguments)]
pub fn tube_probability(
    model: &DynamicsModel,
    reference: &Path,
    delta: f64,
    eps: f64,
    dt: f64,
    n: usize,
    seed: u64,
    threads: usize,
) -> Result<EstimateWithCI> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument("tube radius must be positive".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let duration = reference.grid.duration();
    let steps = (duration / dt).ceil() as usize;
    // Reference states interpolated onto the simulation grid.
    let ref_states: Vec<DVector<f64>> = (0..=steps)
        .map(|k| reference.state_at((k as f64 * dt).min(duration)))
        .collect();
    let y0 = reference.initial_state().clone();
    let stepper = EmStepper::new(model, eps, dt);

    let mut inside = vec![0.0f64; n];
    run_paths(&mut inside, threads, |i| {
        let mut rng = stream_rng(seed, i as u64);
        let mut x = y0.clone();
        let mut ok = true;
        for (k, r) in ref_states.iter().enumerate().skip(1) {
            let _ = k;
            let z = gaussian_increment(&mut rng, model.dev_dim());
            x = stepper.step(&x, &z, None);
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("simulation diverged".into()));
            }
            if (&x - r).norm() > delta {
                ok = false;
                break;
            }
        }
        Ok(if ok { 1.0 } else { 0.0 })
    })?;
    let p = pairwise_sum(&inside) / n as f64;
    let std_error = (p * (1.0 - p) / n as f64).sqrt();
    Ok(EstimateWithCI {
        estimate: p,
        std_error,
        samples: n,
        effective_samples: None,
        degenerate_weights: false,
    })
}

/// Piecewise-linear deviation lookup on the simulation grid.
struct TiltTable {
    values: Vec<DVector<f64>>,
}

impl TiltTable {
    fn from_solution(tilt: &VariationalSolution, dt: f64, steps: usize) -> Result<Self> {
        let path = &tilt.path;
        if path.deviations.is_none() {
            return Err(Error::MissingDeviations);
        }
        let values = (0..steps)
            .map(|k| path.deviation_at(k as f64 * dt))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { values })
    }

    fn at_step(&self, k: usize) -> &DVector<f64> {
        &self.values[k.min(self.values.len() - 1)]
    }
}

/// Importance-sampling estimate of the hitting probability under the
/// instanton-tilted drift `b + sigma w*`, reweighted per path by the
/// change-of-measure factor
/// `exp(-(1/sqrt(eps)) sum w*.dW - (1/(2 eps)) sum |w*|^2 dt)`
/// accumulated up to the hitting step. Unbiased (not self-normalized).
#[allow(clippy::too_many_arguments)]
pub fn importance_sampling_hitting(
    model: &DynamicsModel,
    unsafe_set: &UnsafeSet,
    tilt: &VariationalSolution,
    eps: f64,
    duration: f64,
    dt: f64,
    n: usize,
    seed: u64,
    threads: usize,
) -> Result<EstimateWithCI> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("eps must be positive for importance sampling".into()));
    }
    if duration > tilt.time * (1.0 + 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "tilt solution covers [0, {}], requested horizon {duration}",
            tilt.time
        )));
    }
    let steps = (duration / dt).ceil() as usize;
    let table = TiltTable::from_solution(tilt, dt, steps)?;
    let stepper = EmStepper::new(model, eps, dt);
    let y0 = tilt.path.initial_state().clone();
    let inv_sqrt_eps = 1.0 / eps.sqrt();

    let mut weights = vec![0.0f64; n];
    run_paths(&mut weights, threads, |i| {
        let mut rng = stream_rng(seed, i as u64);
        let mut x = y0.clone();
        if unsafe_set.contains(&x) {
            return Ok(1.0);
        }
        let mut log_lr = 0.0;
        for k in 0..steps {
            let z = gaussian_increment(&mut rng, model.dev_dim());
            let w = table.at_step(k);
            // dW under the tilted measure is sqrt(dt) z.
            log_lr += -inv_sqrt_eps * w.dot(&z) * dt.sqrt()
                - w.norm_squared() * dt / (2.0 * eps);
            x = stepper.step(&x, &z, Some(w));
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("simulation diverged".into()));
            }
            if unsafe_set.contains(&x) {
                return Ok(log_lr.exp());
            }
        }
        Ok(0.0)
    })?;

    let sum_w = pairwise_sum(&weights);
    let estimate = sum_w / n as f64;
    let sq: Vec<f64> = weights.iter().map(|w| (w - estimate) * (w - estimate)).collect();
    let var = pairwise_sum(&sq) / (n as f64 * (n as f64 - 1.0).max(1.0));
    let std_error = var.sqrt();
    let sum_sq = pairwise_sum(&weights.iter().map(|w| w * w).collect::<Vec<_>>());
    let ess = if sum_sq > 0.0 { sum_w * sum_w / sum_sq } else { 0.0 };
    Ok(EstimateWithCI {
        estimate,
        std_error,
        samples: n,
        effective_samples: Some(ess),
        degenerate_weights: ess < 10.0,
    })
}

/// Fills `out[i]` with `job(i)` for every path index, optionally on a
/// worker pool. The result is independent of the thread count because
/// each index owns its random stream and its output slot.
fn run_paths<F>(out: &mut [f64], threads: usize, job: F) -> Result<()>
where
    F: Fn(usize) -> Result<f64> + Sync,
{
    let n = out.len();
    if threads <= 1 {
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = job(i)?;
        }
        return Ok(());
    }
    let error = std::sync::Mutex::new(None::<Error>);
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        for (c, slice) in out.chunks_mut(chunk).enumerate() {
            let job = &job;
            let error = &error;
            scope.spawn(move || {
                let base = c * chunk;
                for (off, slot) in slice.iter_mut().enumerate() {
                    match job(base + off) {
                        Ok(v) => *slot = v,
                        Err(e) => {
                            *error.lock().unwrap() = Some(e);
                            return;
                        }
                    }
                }
            });
        }
    });
    match error.into_inner().unwrap() {
        Some(e) => Err(e),
        None => Ok(()),
    }
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

    fn ou() -> DynamicsModel {
        DynamicsModel::first_order(
            1,
            |x: &DVector<f64>| -x.clone(),
            |_: &DVector<f64>| DMatrix::from_element(1, 1, -1.0),
            DMatrix::identity(1, 1),
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_matches_deterministic_flow() {
        let model = ou();
        let set = half_line_above(10.0);
        let sim = simulate_em(&model, &set, &dvector![1.0], 0.0, 1.0, 1e-4, 0, false).unwrap();
        assert_relative_eq!(sim.terminal_state[0], (-1.0f64).exp(), epsilon = 1e-3);
        assert!(!sim.hit);
    }

    #[test]
    fn start_inside_hits_at_time_zero() {
        let model = brownian();
        let set = half_line_above(-1.0);
        let sim = simulate_em(&model, &set, &dvector![0.0], 0.1, 1.0, 0.01, 3, false).unwrap();
        assert!(sim.hit);
        assert_eq!(sim.hitting_time, Some(0.0));
    }

    #[test]
    fn brownian_terminal_variance_matches_eps_t() {
        let model = brownian();
        let set = half_line_above(1e9);
        let eps = 0.3;
        let n = 20_000;
        let mut sq = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = stream_rng(99, i as u64);
            let sim = simulate_one(&model, &set, &dvector![0.0], eps, 1.0, 1e-2, &mut rng, false, None)
                .unwrap();
            sq.push(sim.terminal_state[0] * sim.terminal_state[0]);
        }
        let var = pairwise_sum(&sq) / n as f64;
        // Var ~ eps * T; sample variance of chi^2 gives SE = var * sqrt(2/n).
        let se = eps * (2.0 / n as f64).sqrt();
        assert!(
            (var - eps).abs() < 3.0 * se,
            "variance {var} vs expected {eps} (3se = {})",
            3.0 * se
        );
    }

    #[test]
    fn strong_error_halves_with_dt() {
        // Compare against a common-random-number fine reference by reusing
        // the same Wiener increments at two resolutions.
        let model = ou();
        let eps = 0.2f64;
        let t = 1.0;
        let fine_steps = 4096usize;
        let dt_fine = t / fine_steps as f64;
        let mut errs = [0.0f64; 2]; // coarse at 256 and 512 steps
        let n_paths = 200;
        for i in 0..n_paths {
            let mut rng = stream_rng(1234, i as u64);
            let dw: Vec<f64> = (0..fine_steps)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * dt_fine.sqrt())
                .collect();
            let run = |steps: usize| -> f64 {
                let dt = t / steps as f64;
                let ratio = fine_steps / steps;
                let mut x = 0.5f64;
                for k in 0..steps {
                    let dwk: f64 = dw[k * ratio..(k + 1) * ratio].iter().sum();
                    x += -x * dt + eps.sqrt() * dwk;
                }
                x
            };
            let reference = run(fine_steps);
            errs[0] += (run(256) - reference).abs();
            errs[1] += (run(512) - reference).abs();
        }
        let ratio = errs[0] / errs[1];
        assert!(
            (1.4..2.9).contains(&ratio),
            "expected ~2x error reduction per halving, got {ratio}"
        );
    }

    #[test]
    fn hitting_probability_matches_reflection_principle() {
        // P[max_{t<=1} W^eps >= 1] = 2 (1 - Phi(1/sqrt(eps))) at eps = 0.25.
        let model = brownian();
        let set = half_line_above(1.0);
        let est = estimate_hitting_probability(
            &model,
            &set,
            StartState::Fixed(&dvector![0.0]),
            0.25,
            1.0,
            1e-3,
            20_000,
            7,
            2,
        )
        .unwrap();
        let exact = 0.045_500_26;
        assert!(
            (est.estimate - exact).abs() < 3.0 * est.std_error + 0.004,
            "estimate {} vs exact {exact} (se {})",
            est.estimate,
            est.std_error
        );
    }

    #[test]
    fn hitting_probability_degenerate_cases() {
        let model = brownian();
        let inside = half_line_above(-5.0);
        let est = estimate_hitting_probability(
            &model,
            &inside,
            StartState::Fixed(&dvector![0.0]),
            0.1,
            1.0,
            0.01,
            50,
            1,
            1,
        )
        .unwrap();
        assert_eq!(est.estimate, 1.0);
        assert_eq!(est.std_error, 0.0);

        let far = half_line_above(100.0);
        let est = estimate_hitting_probability(
            &model,
            &far,
            StartState::Fixed(&dvector![0.0]),
            0.0,
            1.0,
            0.01,
            50,
            1,
            1,
        )
        .unwrap();
        assert_eq!(est.estimate, 0.0);
    }

    #[test]
    fn estimates_are_reproducible_across_thread_counts() {
        let model = ou();
        let set = half_line_above(0.8);
        let run = |threads: usize| {
            estimate_hitting_probability(
                &model,
                &set,
                StartState::Fixed(&dvector![0.0]),
                0.2,
                1.0,
                0.01,
                4000,
                42,
                threads,
            )
            .unwrap()
            .estimate
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn tube_probability_cases() {
        let model = ou();
        let flow = model.flow_deterministic(&dvector![1.0], 1.0, 100).unwrap();
        // Generous radius at tiny noise: concentration near the flow.
        let est = tube_probability(&model, &flow, 0.5, 0.01, 1e-3, 500, 11, 2).unwrap();
        assert!(est.estimate > 0.99, "tube estimate {}", est.estimate);
        // Infinite radius.
        let est = tube_probability(&model, &flow, 1e6, 0.5, 1e-2, 200, 11, 1).unwrap();
        assert_eq!(est.estimate, 1.0);
    }

    #[test]
    fn zero_tilt_reduces_to_crude_monte_carlo() {
        let model = brownian();
        let set = half_line_above(0.5);
        let eps = 0.25;
        let n = 4000;
        // Zero-deviation tilt over [0, 1].
        let flow = model.flow_deterministic(&dvector![0.0], 1.0, 50).unwrap();
        let tilt = VariationalSolution {
            path: flow,
            time: 1.0,
            adjoint: None,
            alpha: 0.0,
            action: 0.0,
            initial_cost: 0.0,
            objective: 0.0,
            status: crate::solver::SolveStatus::TrivialDeterministic,
            window: crate::solver::TimeWindow::fixed(1.0).unwrap(),
            time_on_boundary: true,
            constraint_value: 0.5,
            constraint_scale: 1.5,
            grad_inf: 0.0,
            stationarity: 0.0,
            inner_iterations: 0,
            outer_iterations: 0,
        };
        let is = importance_sampling_hitting(&model, &set, &tilt, eps, 1.0, 1e-2, n, 5, 2).unwrap();
        let mc = estimate_hitting_probability(
            &model,
            &set,
            StartState::Fixed(&dvector![0.0]),
            eps,
            1.0,
            1e-2,
            n,
            5,
            2,
        )
        .unwrap();
        // Same seed, same increments, unit weights: identical hit sets.
        assert_relative_eq!(is.estimate, mc.estimate, epsilon = 1e-12);
    }
}
