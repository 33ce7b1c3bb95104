//! Ready-made problem bundles: analytic one-dimensional cases and a
//! two-object orbital conjunction.
//!
//! The conjunction builds a 12-dimensional mechanical model of two
//! gravitating objects with internal state layout `(r1, r2, v1, v2)`
//! (positions first, then velocities, matching the position/velocity
//! block structure). The published mean positions put the objects 5 km
//! apart at departure; the initial velocities are constructed by a
//! two-point shooting solve so that the deterministic trajectories pass
//! 7 km from each other inside the hitting window, with the offset held
//! orthogonal to the relative velocity so the approach distance is a
//! local minimum there.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::action::InitialDistribution;
use crate::dynamics::{DynamicsModel, TimeGrid};
use crate::error::{Error, Result};
use crate::montecarlo;
use crate::solver::{SolverOptions, TimeWindow};
use crate::unsafe_set::UnsafeSet;

/// Monte Carlo defaults bundled with a scenario.
#[derive(Debug, Clone)]
pub struct McDefaults {
    pub samples: usize,
    pub dt: f64,
}

/// A fully wired problem: model, unsafe set, prior, noise scale, hitting
/// window and solver/Monte Carlo defaults.
pub struct Scenario {
    pub name: &'static str,
    pub description: String,
    pub model: DynamicsModel,
    pub unsafe_set: UnsafeSet,
    pub dist: InitialDistribution,
    pub eps: f64,
    pub window: TimeWindow,
    pub solver: SolverOptions,
    pub mc: McDefaults,
}

impl std::fmt::Debug for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scenario")
            .field("name", &self.name)
            .field("dim", &self.model.dim())
            .field("eps", &self.eps)
            .finish()
    }
}

/// Names and one-line descriptions of the built-in scenarios.
pub fn builtin_names() -> Vec<(&'static str, &'static str)> {
    vec![
        ("brownian1d", "scaled Brownian motion hitting a one-sided level"),
        ("linear1d", "linear mean-reverting drift hitting a one-sided level"),
        ("conjunction", "two-object orbital conjunction with a collision-distance constraint"),
    ]
}

/// Builds a built-in scenario by name with its default parameters.
pub fn by_name(name: &str) -> Result<Scenario> {
    match name {
        "brownian1d" => brownian_1d(1.0, TimeWindow::fixed(1.0)?),
        "linear1d" => linear_1d(1.0, 1.0, TimeWindow::fixed(1.0)?),
        "conjunction" => two_body_conjunction(ConjunctionConfig::default()),
        other => Err(Error::InvalidArgument(format!("unknown scenario '{other}'"))),
    }
}

/// Pure noise, `D = { x >= level }`, standard normal prior at the origin.
pub fn brownian_1d(level: f64, window: TimeWindow) -> Result<Scenario> {
    if !(level > 0.0) {
        return Err(Error::InvalidArgument("level must be positive".into()));
    }
    let model = DynamicsModel::first_order(
        1,
        |x: &DVector<f64>| DVector::zeros(x.len()),
        |_: &DVector<f64>| DMatrix::zeros(1, 1),
        DMatrix::identity(1, 1),
    )?;
    Ok(Scenario {
        name: "brownian1d",
        description: format!("zero drift, unit diffusion, unsafe above x = {level}"),
        model,
        unsafe_set: crate::unsafe_set::half_line_above(level),
        dist: InitialDistribution::diagonal(DVector::zeros(1), &[1.0])?,
        eps: 0.1,
        window,
        solver: SolverOptions { nodes: 400, ..Default::default() },
        mc: McDefaults { samples: 100_000, dt: 1e-4 },
    })
}

/// Linear drift `b(x) = -a x`, `D = { x >= level }`.
pub fn linear_1d(rate: f64, level: f64, window: TimeWindow) -> Result<Scenario> {
    if !(rate > 0.0) {
        return Err(Error::InvalidArgument("drift rate must be positive".into()));
    }
    let model = DynamicsModel::first_order(
        1,
        move |x: &DVector<f64>| -x * rate,
        move |_: &DVector<f64>| DMatrix::from_element(1, 1, -rate),
        DMatrix::identity(1, 1),
    )?;
    Ok(Scenario {
        name: "linear1d",
        description: format!("drift -{rate} x, unit diffusion, unsafe above x = {level}"),
        model,
        unsafe_set: crate::unsafe_set::half_line_above(level),
        dist: InitialDistribution::diagonal(DVector::zeros(1), &[1.0])?,
        eps: 0.1,
        window,
        solver: SolverOptions { nodes: 400, ..Default::default() },
        mc: McDefaults { samples: 100_000, dt: 1e-4 },
    })
}

/// Configuration of the two-object conjunction. All values are artifact
/// defaults, overridable per field; the mean positions are Earth-orbit
/// scale (meters, seconds).
#[derive(Debug, Clone)]
pub struct ConjunctionConfig {
    /// Gravitational parameter (Earth).
    pub gm: f64,
    pub r1: Vector3<f64>,
    pub r2: Vector3<f64>,
    /// Explicit initial velocities; when `None` they are constructed so
    /// the deterministic closest approach inside the window equals
    /// `miss_distance`.
    pub v1: Option<Vector3<f64>>,
    pub v2: Option<Vector3<f64>>,
    /// Deterministic closest approach to construct, meters.
    pub miss_distance: f64,
    /// Conjunction epoch targeted by the construction, seconds.
    pub t_star: f64,
    /// Collision threshold: unsafe when `|r1 - r2|^2 <= gamma`.
    pub gamma: f64,
    pub eps: f64,
    /// Velocity-block diffusion scale (sigma = this times identity).
    pub sigma: f64,
    /// Prior standard deviations per position / velocity coordinate.
    pub sigma_pos: f64,
    pub sigma_vel: f64,
    pub window: TimeWindow,
    pub nodes: usize,
}

impl Default for ConjunctionConfig {
    fn default() -> Self {
        Self {
            gm: 3.986004418e14,
            r1: Vector3::new(-3.7179e6, 6.1141e6, 1.4944e4),
            r2: Vector3::new(-3.7129e6, 6.1141e6, 1.4944e4),
            v1: None,
            v2: None,
            miss_distance: 7_000.0,
            t_star: 4_500.0,
            gamma: 50.0 * 50.0,
            eps: 1e-3,
            sigma: 1e-4,
            sigma_pos: 100.0,
            sigma_vel: 0.1,
            window: TimeWindow::new(3_600.0, 5_400.0).expect("static window"),
            nodes: 1200,
        }
    }
}

/// Gravity acceleration `-GM r / |r|^3`.
fn gravity(gm: f64, r: &Vector3<f64>) -> Vector3<f64> {
    let n = r.norm();
    -r * (gm / (n * n * n))
}

/// Jacobian of the gravity acceleration:
/// `-grad^2 U = GM (3 r r^T / |r|^5 - I / |r|^3)`.
fn gravity_jacobian(gm: f64, r: &Vector3<f64>) -> nalgebra::Matrix3<f64> {
    let n = r.norm();
    let n3 = n * n * n;
    let n5 = n3 * n * n;
    (r * r.transpose()) * (3.0 * gm / n5) - nalgebra::Matrix3::identity() * (gm / n3)
}

/// Single-object two-body propagation (state `(r, v)`, 6-dim) by classical
/// Runge-Kutta; used by the velocity construction.
fn propagate_two_body(
    gm: f64,
    r0: &Vector3<f64>,
    v0: &Vector3<f64>,
    duration: f64,
    steps: usize,
) -> (Vector3<f64>, Vector3<f64>) {
    let h = duration / steps as f64;
    let mut r = *r0;
    let mut v = *v0;
    for _ in 0..steps {
        let k1r = v;
        let k1v = gravity(gm, &r);
        let k2r = v + k1v * (h / 2.0);
        let k2v = gravity(gm, &(r + k1r * (h / 2.0)));
        let k3r = v + k2v * (h / 2.0);
        let k3v = gravity(gm, &(r + k2r * (h / 2.0)));
        let k4r = v + k3v * h;
        let k4v = gravity(gm, &(r + k3r * h));
        r += (k1r + k2r * 2.0 + k3r * 2.0 + k4r) * (h / 6.0);
        v += (k1v + k2v * 2.0 + k3v * 2.0 + k4v) * (h / 6.0);
    }
    (r, v)
}

/// Near-circular velocity at `r`, in the plane spanned by `r` and the
/// reference axis closest to orthogonal.
fn circular_velocity(gm: f64, r: &Vector3<f64>) -> Vector3<f64> {
    let speed = (gm / r.norm()).sqrt();
    let z = Vector3::new(0.0, 0.0, 1.0);
    let tangent = z.cross(&r.normalize());
    tangent.normalize() * speed
}

/// Two-point shooting: finds `v0` such that the two-body flow from `r0`
/// reaches `target` at time `t`. Newton iteration with a finite-difference
/// sensitivity matrix.
fn shoot_to_target(
    gm: f64,
    r0: &Vector3<f64>,
    v_guess: &Vector3<f64>,
    target: &Vector3<f64>,
    t: f64,
    steps: usize,
) -> Result<Vector3<f64>> {
    let mut v = *v_guess;
    let dv = 1e-4;
    for _ in 0..25 {
        let (r_end, _) = propagate_two_body(gm, r0, &v, t, steps);
        let residual = r_end - target;
        if residual.norm() < 1e-6 {
            return Ok(v);
        }
        let mut jac = nalgebra::Matrix3::zeros();
        for j in 0..3 {
            let mut vp = v;
            vp[j] += dv;
            let (rp, _) = propagate_two_body(gm, r0, &vp, t, steps);
            jac.set_column(j, &((rp - r_end) / dv));
        }
        let step = jac
            .lu()
            .solve(&residual)
            .ok_or_else(|| Error::Singular("degenerate shooting sensitivity".into()))?;
        v -= step;
    }
    let (r_end, _) = propagate_two_body(gm, r0, &v, t, steps);
    if (r_end - target).norm() < 1e-2 {
        Ok(v)
    } else {
        Err(Error::InvalidArgument("two-point velocity construction did not converge".into()))
    }
}

/// Smallest inter-object distance over the window, by joint propagation
/// on a dense grid with parabolic refinement.
fn pair_min_distance(
    gm: f64,
    r1: &Vector3<f64>,
    v1: &Vector3<f64>,
    r2: &Vector3<f64>,
    v2: &Vector3<f64>,
    window: TimeWindow,
    samples: usize,
) -> (f64, f64) {
    let t2 = window.upper();
    let h = t2 / samples as f64;
    let (mut a1, mut b1) = (*r1, *v1);
    let (mut a2, mut b2) = (*r2, *v2);
    let mut dists = Vec::with_capacity(samples + 1);
    dists.push((a1 - a2).norm());
    for _ in 0..samples {
        let (n1, w1) = propagate_two_body(gm, &a1, &b1, h, 1);
        let (n2, w2) = propagate_two_body(gm, &a2, &b2, h, 1);
        a1 = n1;
        b1 = w1;
        a2 = n2;
        b2 = w2;
        dists.push((a1 - a2).norm());
    }
    let mut best = (f64::INFINITY, window.lower());
    for (k, &d) in dists.iter().enumerate() {
        let t = k as f64 * h;
        if t >= window.lower() && d < best.0 {
            best = (d, t);
        }
    }
    // Parabolic refinement around the minimum node.
    let k = (best.1 / h).round() as usize;
    if k > 0 && k + 1 < dists.len() {
        let (d0, d1, d2) = (dists[k - 1], dists[k], dists[k + 1]);
        let denom = d0 - 2.0 * d1 + d2;
        if denom.abs() > 1e-30 {
            let shift = (0.5 * (d0 - d2) / denom).clamp(-1.0, 1.0);
            let t_min = (k as f64 + shift) * h;
            let d_min = d1 - 0.25 * (d0 - d2) * shift;
            if t_min >= window.lower() && t_min <= t2 {
                return (d_min, t_min);
            }
        }
    }
    best
}

/// Constructs the default velocities: object 1 on a near-circular orbit,
/// object 2 shot to pass `miss_distance` from object 1 at `t_star`, with
/// the offset held orthogonal to the relative velocity (so the separation
/// is locally minimal there) and radial (so tidal dynamics keep it
/// convex). The offset magnitude is corrected against the measured
/// closest approach over the window.
fn construct_velocities(cfg: &ConjunctionConfig) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let steps = 4096;
    let v1 = cfg.v1.unwrap_or_else(|| circular_velocity(cfg.gm, &cfg.r1));
    if let Some(v2) = cfg.v2 {
        return Ok((v1, v2));
    }
    let (r1_star, v1_star) = propagate_two_body(cfg.gm, &cfg.r1, &v1, cfg.t_star, steps);
    let radial = r1_star.normalize();
    let mut offset_dir = radial;
    let mut offset_mag = cfg.miss_distance;
    let mut v2 = v1;
    for _ in 0..8 {
        let target = r1_star + offset_dir * offset_mag;
        v2 = shoot_to_target(cfg.gm, &cfg.r2, &v2, &target, cfg.t_star, steps)?;
        let (d_min, _) =
            pair_min_distance(cfg.gm, &cfg.r1, &v1, &cfg.r2, &v2, cfg.window, 5400);
        if (d_min - cfg.miss_distance).abs() <= 1e-3 * cfg.miss_distance {
            break;
        }
        offset_mag *= (cfg.miss_distance / d_min).clamp(0.5, 2.0);
        let (_, v2_star) = propagate_two_body(cfg.gm, &cfg.r2, &v2, cfg.t_star, steps);
        let v_rel = v2_star - v1_star;
        if v_rel.norm() > 1e-9 {
            let v_hat = v_rel.normalize();
            let projected = radial - v_hat * radial.dot(&v_hat);
            if projected.norm() > 1e-6 {
                offset_dir = projected.normalize();
            }
        }
    }
    Ok((v1, v2))
}

/// Builds the 12-dimensional conjunction scenario. State layout:
/// positions `(r1, r2)` then velocities `(v1, v2)`.
pub fn two_body_conjunction(cfg: ConjunctionConfig) -> Result<Scenario> {
    if cfg.r1.norm() < 1.0 || cfg.r2.norm() < 1.0 {
        return Err(Error::InvalidArgument("object positions must be away from the origin".into()));
    }
    if !(cfg.gamma >= 0.0) {
        return Err(Error::InvalidArgument("collision threshold gamma must be nonnegative".into()));
    }
    let (v1, v2) = construct_velocities(&cfg)?;
    let gm = cfg.gm;

    let model = DynamicsModel::mechanical(
        6,
        move |eta: &DVector<f64>| {
            let r1 = Vector3::new(eta[0], eta[1], eta[2]);
            let r2 = Vector3::new(eta[3], eta[4], eta[5]);
            let a1 = gravity(gm, &r1);
            let a2 = gravity(gm, &r2);
            DVector::from_vec(vec![a1.x, a1.y, a1.z, a2.x, a2.y, a2.z])
        },
        move |eta: &DVector<f64>| {
            let r1 = Vector3::new(eta[0], eta[1], eta[2]);
            let r2 = Vector3::new(eta[3], eta[4], eta[5]);
            let mut jac = DMatrix::zeros(6, 6);
            jac.view_mut((0, 0), (3, 3)).copy_from(&gravity_jacobian(gm, &r1));
            jac.view_mut((3, 3), (3, 3)).copy_from(&gravity_jacobian(gm, &r2));
            jac
        },
        DMatrix::identity(6, 6) * cfg.sigma,
    )?;

    let gamma = cfg.gamma;
    let unsafe_set = UnsafeSet::position_block(
        6,
        move |eta: &DVector<f64>| {
            let dx = eta[0] - eta[3];
            let dy = eta[1] - eta[4];
            let dz = eta[2] - eta[5];
            dx * dx + dy * dy + dz * dz - gamma
        },
        move |eta: &DVector<f64>| {
            let d = [eta[0] - eta[3], eta[1] - eta[4], eta[2] - eta[5]];
            DVector::from_vec(vec![
                2.0 * d[0],
                2.0 * d[1],
                2.0 * d[2],
                -2.0 * d[0],
                -2.0 * d[1],
                -2.0 * d[2],
            ])
        },
    );

    let mean = DVector::from_vec(vec![
        cfg.r1.x, cfg.r1.y, cfg.r1.z, cfg.r2.x, cfg.r2.y, cfg.r2.z, v1.x, v1.y, v1.z, v2.x,
        v2.y, v2.z,
    ]);
    let mut variances = vec![cfg.sigma_pos * cfg.sigma_pos; 6];
    variances.extend(vec![cfg.sigma_vel * cfg.sigma_vel; 6]);
    let dist = InitialDistribution::diagonal(mean, &variances)?;

    Ok(Scenario {
        name: "conjunction",
        description: format!(
            "two-object conjunction, {:.0} m deterministic miss, collision at {:.0} m",
            cfg.miss_distance,
            cfg.gamma.sqrt()
        ),
        model,
        unsafe_set,
        dist,
        eps: cfg.eps,
        window: cfg.window,
        solver: SolverOptions { nodes: cfg.nodes, ..Default::default() },
        mc: McDefaults { samples: 1_000, dt: 1.0 },
    })
}

/// Specific orbital energy `|v|^2 / 2 - GM / |r|` of each object, from a
/// full conjunction state.
pub fn orbital_energies(gm: f64, state: &DVector<f64>) -> (f64, f64) {
    let r1 = state.rows(0, 3).norm();
    let r2 = state.rows(3, 3).norm();
    let v1 = state.rows(6, 3).norm_squared();
    let v2 = state.rows(9, 3).norm_squared();
    (0.5 * v1 - gm / r1, 0.5 * v2 - gm / r2)
}

/// Inter-object distance at a conjunction state.
pub fn object_distance(state: &DVector<f64>) -> f64 {
    (state.rows(0, 3) - state.rows(3, 3)).norm()
}

/// Deterministic closest approach of the mean conjunction state inside
/// `[t1, t2]`: scans the flow and refines the minimum parabolically.
pub fn closest_approach(scenario: &Scenario, samples: usize) -> Result<(f64, f64)> {
    let t2 = scenario.window.upper();
    let flow = scenario.model.flow_deterministic(scenario.dist.mean(), t2, samples)?;
    let times = flow.grid.times();
    let t1 = scenario.window.lower();
    let mut best = (f64::INFINITY, t1);
    let dists: Vec<f64> = flow.states.iter().map(object_distance).collect();
    for (k, &t) in times.iter().enumerate() {
        if t < t1 {
            continue;
        }
        if dists[k] < best.0 {
            best = (dists[k], t);
        }
    }
    // Parabolic refinement around the best grid node.
    let k = times.iter().position(|&t| t == best.1).unwrap();
    if k > 0 && k + 1 < times.len() {
        let (d0, d1, d2) = (dists[k - 1], dists[k], dists[k + 1]);
        let denom = d0 - 2.0 * d1 + d2;
        if denom.abs() > 1e-30 {
            let shift = 0.5 * (d0 - d2) / denom;
            let h = times[k] - times[k - 1];
            let t_min = times[k] + shift * h;
            let d_min = d1 - 0.25 * (d0 - d2) * shift;
            if t_min >= t1 && t_min <= t2 {
                return Ok((t_min, d_min));
            }
        }
    }
    Ok((best.1, best.0))
}

/// One full Monte Carlo hitting estimate using the scenario defaults.
pub fn scenario_hitting_mc(scenario: &Scenario, seed: u64, threads: usize) -> Result<montecarlo::EstimateWithCI> {
    montecarlo::estimate_hitting_probability(
        &scenario.model,
        &scenario.unsafe_set,
        montecarlo::StartState::Random(&scenario.dist),
        scenario.eps,
        scenario.window.upper(),
        scenario.mc.dt,
        scenario.mc.samples,
        seed,
        threads,
    )
}

/// Uniform grid matching a scenario's solver discretization.
pub fn scenario_grid(scenario: &Scenario, duration: f64) -> Result<TimeGrid> {
    TimeGrid::uniform(duration, scenario.solver.nodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{quasipotential, solve_ml};
    use approx::assert_relative_eq;
    use nalgebra::dvector;
    use rand::SeedableRng;

    #[test]
    fn brownian_scenario_quasipotential_examples() {
        let sc = brownian_1d(1.0, TimeWindow::fixed(1.0).unwrap()).unwrap();
        let opts = SolverOptions { nodes: 100, ..sc.solver.clone() };
        let q = quasipotential(&sc.model, &sc.unsafe_set, &dvector![0.0], sc.window, &opts)
            .unwrap();
        assert_relative_eq!(q, 0.5, epsilon = 1e-5);

        let sc2 = brownian_1d(2.0, TimeWindow::fixed(1.0).unwrap()).unwrap();
        let q2 = quasipotential(&sc2.model, &sc2.unsafe_set, &dvector![0.0], sc2.window, &opts)
            .unwrap();
        assert_relative_eq!(q2, 2.0, epsilon = 1e-4);
    }

    #[test]
    fn brownian_rejects_nonpositive_level() {
        assert!(brownian_1d(0.0, TimeWindow::fixed(1.0).unwrap()).is_err());
    }

    #[test]
    fn linear_scenario_matches_analytic_action() {
        let sc = linear_1d(1.0, 1.0, TimeWindow::fixed(1.0).unwrap()).unwrap();
        let opts = SolverOptions { nodes: 200, ..sc.solver.clone() };
        let sol = solve_ml(&sc.model, &sc.unsafe_set, &dvector![0.0], sc.window, &opts).unwrap();
        let s1 = 1.0f64.sinh();
        assert_relative_eq!(
            sol.action,
            (2.0f64.exp() - 1.0) / (4.0 * s1 * s1),
            epsilon = 1e-4
        );
    }

    #[test]
    fn linear_rate_zero_is_rejected_but_small_rate_nears_brownian() {
        assert!(linear_1d(0.0, 1.0, TimeWindow::fixed(1.0).unwrap()).is_err());
        let sc = linear_1d(1e-6, 1.0, TimeWindow::fixed(1.0).unwrap()).unwrap();
        let opts = SolverOptions { nodes: 100, ..sc.solver.clone() };
        let q = quasipotential(&sc.model, &sc.unsafe_set, &dvector![0.0], sc.window, &opts)
            .unwrap();
        assert_relative_eq!(q, 0.5, epsilon = 1e-4);
    }

    #[test]
    fn builtin_scenarios_pass_model_self_checks() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for (name, _) in builtin_names() {
            let sc = by_name(name).unwrap();
            let scale = sc.dist.mean().amax().max(1.0) * 1e-3 + 1.0;
            let worst = sc.model.check_jacobian(&mut rng, 100, scale).unwrap();
            assert!(worst < 1e-5, "{name}: jacobian mismatch {worst}");
            // Level gradient checked at prior-dispersed probes.
            let probes: Vec<DVector<f64>> =
                (0..20).map(|_| sc.dist.sample(&mut rng)).collect();
            let worst = sc.unsafe_set.check_gradient(&probes);
            assert!(worst < 1e-5, "{name}: level gradient mismatch {worst}");
        }
    }

    #[test]
    fn conjunction_gravity_axis_values() {
        let gm = 3.986004418e14;
        let r = Vector3::new(7.0e6, 0.0, 0.0);
        let a = gravity(gm, &r);
        assert_relative_eq!(a.x, -gm / (7.0e6 * 7.0e6), max_relative = 1e-12);
        assert_eq!(a.y, 0.0);
        // The gravity-gradient trace vanishes away from the origin.
        let j = gravity_jacobian(gm, &Vector3::new(1.3e6, -2.0e6, 0.7e6));
        assert!(j.trace().abs() < 1e-12 * j.norm());
    }

    #[test]
    fn conjunction_paper_positions_are_default() {
        let cfg = ConjunctionConfig::default();
        assert_relative_eq!(cfg.r1.x, -3.7179e6);
        assert_relative_eq!(cfg.r2.x, -3.7129e6);
        assert_relative_eq!(cfg.r1.y, 6.1141e6);
        assert_relative_eq!(cfg.r1.z, 1.4944e4);
        // Objects depart 5 km apart.
        assert_relative_eq!((cfg.r1 - cfg.r2).norm(), 5_000.0, epsilon = 1e-9);
    }

    #[test]
    fn conjunction_closest_approach_is_constructed_miss_distance() {
        let sc = two_body_conjunction(ConjunctionConfig::default()).unwrap();
        let (t_min, d_min) = closest_approach(&sc, 5400).unwrap();
        assert!(
            (d_min - 7_000.0).abs() < 70.0,
            "closest approach {d_min} m at t = {t_min} s"
        );
        assert!(sc.window.contains(t_min), "minimum at t = {t_min} outside the window");
    }

    #[test]
    fn conjunction_flow_conserves_orbital_energy() {
        let sc = two_body_conjunction(ConjunctionConfig::default()).unwrap();
        let flow = sc
            .model
            .flow_deterministic(sc.dist.mean(), sc.window.upper(), 2048)
            .unwrap();
        let (e1_0, e2_0) = orbital_energies(3.986004418e14, &flow.states[0]);
        for state in &flow.states {
            let (e1, e2) = orbital_energies(3.986004418e14, state);
            assert!((e1 - e1_0).abs() / e1_0.abs() < 1e-8, "object 1 energy drift");
            assert!((e2 - e2_0).abs() / e2_0.abs() < 1e-8, "object 2 energy drift");
        }
    }

    #[test]
    fn conjunction_rejects_zero_radius() {
        let cfg = ConjunctionConfig {
            r1: Vector3::zeros(),
            ..ConjunctionConfig::default()
        };
        assert!(two_body_conjunction(cfg).is_err());
    }

    #[test]
    fn unknown_scenario_name_errors() {
        assert!(by_name("nope").is_err());
    }
}
