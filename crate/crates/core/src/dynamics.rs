//! System models and deterministic propagation.
//!
//! Two model families are supported:
//!
//! * first-order: `dx = b(x) dt + sqrt(eps) sigma dW` on the full state,
//! * mechanical: position/velocity split `(eta, nu)` with
//!   `d eta = nu dt`, `d nu = b(eta) dt + sqrt(eps) sigma dW`,
//!   where the noise acts on the velocity block only, so the effective
//!   full-state diffusion is degenerate.
//!
//! The diffusion matrix is constant by construction; a state-dependent
//! diffusion cannot be expressed through the constructors.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

type VecFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
type MatFn = dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync;

/// Which structural family a model belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Drift and diffusion act on the full state vector.
    FirstOrder,
    /// Position/velocity split; drift `b` maps positions to accelerations
    /// and the diffusion acts on the velocity block.
    Mechanical,
}

/// A dynamical system model: drift, drift Jacobian and constant diffusion.
pub struct DynamicsModel {
    kind: ModelKind,
    /// Full state dimension `n` (`2m` for mechanical models).
    dim: usize,
    /// Position-block size for mechanical models; equals `dim` otherwise.
    block: usize,
    drift: Box<VecFn>,
    drift_jac: Box<MatFn>,
    sigma: DMatrix<f64>,
    noise_cov: DMatrix<f64>,
    sigma_lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl std::fmt::Debug for DynamicsModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DynamicsModel")
            .field("kind", &self.kind)
            .field("dim", &self.dim)
            .field("block", &self.block)
            .finish()
    }
}

impl DynamicsModel {
    /// First-order model `dx = b(x) dt + sqrt(eps) sigma dW` in dimension `n`.
    ///
    /// `sigma` must be `n x n` and invertible (deviation recovery divides
    /// by it).
    pub fn first_order<B, J>(n: usize, drift: B, jacobian: J, sigma: DMatrix<f64>) -> Result<Self>
    where
        B: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        J: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self::build(ModelKind::FirstOrder, n, n, Box::new(drift), Box::new(jacobian), sigma)
    }

    /// Mechanical model with `m` position and `m` velocity coordinates.
    ///
    /// `drift` maps the position block to accelerations and `jacobian` is
    /// its `m x m` derivative; `sigma` is `m x m` and acts on the velocity
    /// block only.
    pub fn mechanical<B, J>(m: usize, drift: B, jacobian: J, sigma: DMatrix<f64>) -> Result<Self>
    where
        B: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        J: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self::build(ModelKind::Mechanical, 2 * m, m, Box::new(drift), Box::new(jacobian), sigma)
    }

    fn build(
        kind: ModelKind,
        dim: usize,
        block: usize,
        drift: Box<VecFn>,
        drift_jac: Box<MatFn>,
        sigma: DMatrix<f64>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("state dimension must be positive".into()));
        }
        if sigma.nrows() != block || sigma.ncols() != block {
            return Err(Error::Dimension(format!(
                "diffusion matrix must be {block}x{block}, got {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        let noise_cov = &sigma * sigma.transpose();
        let sigma_lu = sigma.clone().lu();
        if !sigma_lu.is_invertible() {
            return Err(Error::Singular("diffusion matrix must be invertible".into()));
        }
        Ok(Self { kind, dim, block, drift, drift_jac, sigma, noise_cov, sigma_lu })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    /// Full state dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Dimension of the deviation `w` (full state for first-order models,
    /// velocity block for mechanical ones).
    pub fn dev_dim(&self) -> usize {
        self.block
    }

    /// Position-block size (`dim` for first-order models).
    pub fn pos_dim(&self) -> usize {
        self.block
    }

    /// The constant diffusion matrix.
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Cached noise covariance `a = sigma sigma^T`.
    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    /// Time derivative of the full state under the unperturbed dynamics.
    ///
    /// For mechanical models this is the stacked `(nu, b(eta))`.
    pub fn drift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim {
            return Err(Error::Dimension(format!(
                "state has dimension {}, model expects {}",
                x.len(),
                self.dim
            )));
        }
        Ok(self.drift_unchecked(x))
    }

    pub(crate) fn drift_unchecked(&self, x: &DVector<f64>) -> DVector<f64> {
        match self.kind {
            ModelKind::FirstOrder => (self.drift)(x),
            ModelKind::Mechanical => {
                let m = self.block;
                let eta = x.rows(0, m).into_owned();
                let accel = (self.drift)(&eta);
                let mut out = DVector::zeros(self.dim);
                out.rows_mut(0, m).copy_from(&x.rows(m, m));
                out.rows_mut(m, m).copy_from(&accel);
                out
            }
        }
    }

    /// Jacobian of [`Self::drift`] with respect to the full state.
    pub fn drift_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        if x.len() != self.dim {
            return Err(Error::Dimension(format!(
                "state has dimension {}, model expects {}",
                x.len(),
                self.dim
            )));
        }
        match self.kind {
            ModelKind::FirstOrder => Ok((self.drift_jac)(x)),
            ModelKind::Mechanical => {
                let m = self.block;
                let eta = x.rows(0, m).into_owned();
                let jb = (self.drift_jac)(&eta);
                let mut out = DMatrix::zeros(self.dim, self.dim);
                for i in 0..m {
                    out[(i, m + i)] = 1.0;
                }
                out.view_mut((m, 0), (m, m)).copy_from(&jb);
                Ok(out)
            }
        }
    }

    /// Vector-Jacobian product `(d drift / d x)^T v` without materializing
    /// the full-state Jacobian for mechanical models.
    pub(crate) fn drift_vjp(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        match self.kind {
            ModelKind::FirstOrder => (self.drift_jac)(x).transpose() * v,
            ModelKind::Mechanical => {
                let m = self.block;
                let eta = x.rows(0, m).into_owned();
                let jb = (self.drift_jac)(&eta);
                let mut out = DVector::zeros(self.dim);
                // d(nu)/d eta = 0, d(nu)/d nu = 0 except identity coupling:
                // F = (nu, b(eta)) => F'^T v = (Jb^T v_nu, v_eta).
                out.rows_mut(0, m).copy_from(&(jb.transpose() * v.rows(m, m)));
                out.rows_mut(m, m).copy_from(&v.rows(0, m));
                out
            }
        }
    }

    /// Injects a deviation `w` into the full state derivative: `sigma w`
    /// for first-order models, `(0, sigma w)` for mechanical ones.
    pub(crate) fn inject_deviation(&self, w: &DVector<f64>) -> DVector<f64> {
        let sw = &self.sigma * w;
        match self.kind {
            ModelKind::FirstOrder => sw,
            ModelKind::Mechanical => {
                let mut out = DVector::zeros(self.dim);
                out.rows_mut(self.block, self.block).copy_from(&sw);
                out
            }
        }
    }

    /// Adjoint of [`Self::inject_deviation`]: `sigma^T lambda` with the
    /// velocity block selected for mechanical models.
    pub fn diffusion_t_apply(&self, lam: &DVector<f64>) -> DVector<f64> {
        match self.kind {
            ModelKind::FirstOrder => self.sigma.transpose() * lam,
            ModelKind::Mechanical => {
                self.sigma.transpose() * lam.rows(self.block, self.block).into_owned()
            }
        }
    }

    /// Solves `sigma w = v` on the deviation block.
    pub(crate) fn sigma_solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.sigma_lu
            .solve(v)
            .ok_or_else(|| Error::Singular("diffusion matrix solve failed".into()))
    }

    /// Propagates the unperturbed system `x' = b(x)` over `[0, duration]`
    /// with `steps` classical Runge-Kutta steps on a uniform grid.
    ///
    /// The returned path carries zero deviations.
    pub fn flow_deterministic(
        &self,
        x0: &DVector<f64>,
        duration: f64,
        steps: usize,
    ) -> Result<Path> {
        if x0.len() != self.dim {
            return Err(Error::Dimension(format!(
                "initial state has dimension {}, model expects {}",
                x0.len(),
                self.dim
            )));
        }
        if !(duration > 0.0) {
            return Err(Error::InvalidArgument("flow duration must be positive".into()));
        }
        if steps < 2 {
            return Err(Error::InvalidArgument("flow needs at least 2 steps".into()));
        }
        let grid = TimeGrid::uniform(duration, steps)?;
        let h = duration / steps as f64;
        let mut states = Vec::with_capacity(steps + 1);
        states.push(x0.clone());
        let mut x = x0.clone();
        for _ in 0..steps {
            x = self.rk4_step(&x, h);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("deterministic flow diverged".into()));
            }
            states.push(x.clone());
        }
        let dev = vec![DVector::zeros(self.dev_dim()); steps + 1];
        Path::with_deviations(grid, states, dev)
    }

    fn rk4_step(&self, x: &DVector<f64>, h: f64) -> DVector<f64> {
        let k1 = self.drift_unchecked(x);
        let k2 = self.drift_unchecked(&(x + &k1 * (h / 2.0)));
        let k3 = self.drift_unchecked(&(x + &k2 * (h / 2.0)));
        let k4 = self.drift_unchecked(&(x + &k3 * h));
        x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    }

    /// Compares the supplied Jacobian against central finite differences of
    /// the drift at random probe points; returns the worst relative error.
    pub fn check_jacobian<R: Rng>(&self, rng: &mut R, probes: usize, scale: f64) -> Result<f64> {
        let arg_dim = self.block;
        let mut worst: f64 = 0.0;
        for _ in 0..probes {
            let x = DVector::from_fn(arg_dim, |_, _| {
                scale * (rng.random::<f64>() * 2.0 - 1.0)
            });
            let jac = (self.drift_jac)(&x);
            let fd = finite_difference_jacobian(|y| (self.drift)(y), &x);
            let denom = 1.0 + jac.norm().max(fd.norm());
            worst = worst.max((&jac - &fd).norm() / denom);
        }
        Ok(worst)
    }
}

/// Central finite-difference Jacobian with step `1e-6 * (1 + |x|)`,
/// the convention used for user-supplied models lacking an analytic one.
pub fn finite_difference_jacobian<F>(f: F, x: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let h = 1e-6 * (1.0 + x.norm());
    let n = x.len();
    let fx = f(x);
    let m = fx.len();
    let mut jac = DMatrix::zeros(m, n);
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let fp = f(&xp);
        let fm = f(&xm);
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    jac
}

/// Strictly increasing node times starting at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid with `n_steps` intervals over `[0, duration]`.
    pub fn uniform(duration: f64, n_steps: usize) -> Result<Self> {
        if !(duration > 0.0) {
            return Err(Error::InvalidArgument("grid duration must be positive".into()));
        }
        if n_steps == 0 {
            return Err(Error::InvalidArgument("grid needs at least one step".into()));
        }
        let times = (0..=n_steps)
            .map(|k| duration * k as f64 / n_steps as f64)
            .collect();
        Ok(Self { times })
    }

    /// Builds a grid from explicit node times; they must start at zero and
    /// increase strictly.
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidArgument("grid needs at least two nodes".into()));
        }
        if times[0] != 0.0 {
            return Err(Error::InvalidArgument("grid must start at t = 0".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("grid times must increase strictly".into()));
        }
        Ok(Self { times })
    }

    /// Number of nodes (`n_steps + 1`).
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Final node time.
    pub fn duration(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

/// A discrete path: states on a grid, optionally with deviation samples.
#[derive(Debug, Clone)]
pub struct Path {
    pub grid: TimeGrid,
    pub states: Vec<DVector<f64>>,
    pub deviations: Option<Vec<DVector<f64>>>,
}

impl Path {
    pub fn new(grid: TimeGrid, states: Vec<DVector<f64>>) -> Result<Self> {
        if states.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "path has {} states for {} grid nodes",
                states.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, states, deviations: None })
    }

    pub fn with_deviations(
        grid: TimeGrid,
        states: Vec<DVector<f64>>,
        deviations: Vec<DVector<f64>>,
    ) -> Result<Self> {
        if states.len() != grid.len() || deviations.len() != grid.len() {
            return Err(Error::Dimension(format!(
                "path arrays ({} states, {} deviations) must match {} grid nodes",
                states.len(),
                deviations.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, states, deviations: Some(deviations) })
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn initial_state(&self) -> &DVector<f64> {
        &self.states[0]
    }

    pub fn terminal_state(&self) -> &DVector<f64> {
        self.states.last().unwrap()
    }

    /// Largest pointwise 2-norm distance to another path on the same grid.
    pub fn sup_distance(&self, other: &Path) -> Result<f64> {
        if self.grid.len() != other.grid.len() {
            return Err(Error::Dimension("paths live on different grids".into()));
        }
        Ok(self
            .states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max))
    }

    /// Linear interpolation of the state at an arbitrary time inside the
    /// grid span (clamped at the ends).
    pub fn state_at(&self, t: f64) -> DVector<f64> {
        interpolate(&self.grid, &self.states, t)
    }

    /// Linear interpolation of the deviation at time `t`.
    pub fn deviation_at(&self, t: f64) -> Result<DVector<f64>> {
        let dev = self.deviations.as_ref().ok_or(Error::MissingDeviations)?;
        Ok(interpolate(&self.grid, dev, t))
    }
}

fn interpolate(grid: &TimeGrid, values: &[DVector<f64>], t: f64) -> DVector<f64> {
    let times = grid.times();
    if t <= times[0] {
        return values[0].clone();
    }
    if t >= grid.duration() {
        return values.last().unwrap().clone();
    }
    let idx = match times.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
        Ok(i) => return values[i].clone(),
        Err(i) => i - 1,
    };
    let t0 = times[idx];
    let t1 = times[idx + 1];
    let a = (t - t0) / (t1 - t0);
    &values[idx] * (1.0 - a) + &values[idx + 1] * a
}
