//! Direct transcription of the variational problems.
//!
//! Decision variables are the deviation samples at the nodes of a fixed
//! unit grid, the initial state (free-start problems only, parameterized
//! through the prior Cholesky factor) and a time scale `s`: physical time
//! is `t = s * tau` with `tau` on `[0, 1]`. States are recovered from the
//! decisions by classical Runge-Kutta steps of
//! `d phi / d tau = s * (b(phi) + sigma w(tau))`, with the deviation
//! interpolated linearly inside a step. Gradients of the objective and of
//! the terminal level constraint are exact reverse-mode derivatives of
//! this discrete forward map; the reverse sweep also yields the node
//! cotangents used as the discrete adjoint trajectory.

use nalgebra::DVector;

use crate::action::trapezoid_weights;
use crate::dynamics::{DynamicsModel, TimeGrid};
use crate::unsafe_set::UnsafeSet;

/// Per-step storage of the forward Runge-Kutta pass.
struct StepRecord {
    /// Stage base points a2, a3, a4 (a1 is the node state itself).
    bases: [DVector<f64>; 3],
    /// Stage slopes K1..K4.
    slopes: [DVector<f64>; 4],
}

pub(crate) struct ForwardPass {
    pub states: Vec<DVector<f64>>,
    steps: Vec<StepRecord>,
    /// True when a non-finite state was produced (gradients are unusable).
    pub diverged: bool,
}

/// Gradients produced by one reverse sweep for a terminal scalar seeded
/// with cotangent `seed` at the final state.
pub(crate) struct ReverseSweep {
    pub grad_w: Vec<DVector<f64>>,
    pub grad_x0: DVector<f64>,
    /// Derivative with respect to the time scale `s`.
    pub grad_s: f64,
    /// Cotangent of each node state (index 0..=N), when recorded.
    pub node_cotangents: Option<Vec<DVector<f64>>>,
}

pub(crate) struct Transcription<'a> {
    pub model: &'a DynamicsModel,
    pub set: &'a UnsafeSet,
    pub n_steps: usize,
    /// Trapezoid weights on the unit grid.
    pub weights: Vec<f64>,
}

impl<'a> Transcription<'a> {
    pub fn new(model: &'a DynamicsModel, set: &'a UnsafeSet, n_steps: usize) -> Self {
        let grid = TimeGrid::uniform(1.0, n_steps).unwrap();
        let weights = trapezoid_weights(grid.times());
        Self { model, set, n_steps, weights }
    }

    fn rhs(&self, x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.model.drift_unchecked(x) + self.model.inject_deviation(w)
    }

    /// Integrates the controlled dynamics from `x0` under deviations `w`
    /// (one sample per node) over physical duration `s`.
    pub fn forward(&self, x0: &DVector<f64>, w: &[DVector<f64>], s: f64) -> ForwardPass {
        debug_assert_eq!(w.len(), self.n_steps + 1);
        let h = s / self.n_steps as f64;
        let mut states = Vec::with_capacity(self.n_steps + 1);
        let mut steps = Vec::with_capacity(self.n_steps);
        states.push(x0.clone());
        let mut x = x0.clone();
        let mut diverged = false;
        for k in 0..self.n_steps {
            let w_mid = (&w[k] + &w[k + 1]) * 0.5;
            let k1 = self.rhs(&x, &w[k]);
            let a2 = &x + &k1 * (h / 2.0);
            let k2 = self.rhs(&a2, &w_mid);
            let a3 = &x + &k2 * (h / 2.0);
            let k3 = self.rhs(&a3, &w_mid);
            let a4 = &x + &k3 * h;
            let k4 = self.rhs(&a4, &w[k + 1]);
            x = &x + (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (h / 6.0);
            if x.iter().any(|v| !v.is_finite()) {
                diverged = true;
                // Freeze the remaining nodes at the last finite state so the
                // caller can still evaluate a (penalized) objective.
                let last = states.last().unwrap().clone();
                while states.len() < self.n_steps + 1 {
                    states.push(last.clone());
                }
                return ForwardPass { states, steps, diverged };
            }
            steps.push(StepRecord { bases: [a2, a3, a4], slopes: [k1, k2, k3, k4] });
            states.push(x.clone());
        }
        ForwardPass { states, steps, diverged }
    }

    /// Reverse sweep: propagates a terminal cotangent `seed` (the gradient
    /// of some scalar of the final state) back through the forward pass.
    pub fn reverse(
        &self,
        fp: &ForwardPass,
        s: f64,
        seed: &DVector<f64>,
        record_nodes: bool,
    ) -> ReverseSweep {
        let n = self.n_steps;
        let h = s / n as f64;
        let dim = self.model.dim();
        let dev = self.model.dev_dim();
        let mut grad_w = vec![DVector::zeros(dev); n + 1];
        let mut grad_h_total = 0.0;
        let mut v = seed.clone();
        let mut nodes = if record_nodes {
            let mut ns = vec![DVector::zeros(dim); n + 1];
            ns[n] = v.clone();
            Some(ns)
        } else {
            None
        };

        for k in (0..n).rev() {
            let rec = &fp.steps[k];
            let x_k = &fp.states[k];
            let [a2, a3, a4] = &rec.bases;
            let [k1, k2, k3, k4] = &rec.slopes;

            // out = x_k + (h/6)(K1 + 2K2 + 2K3 + K4)
            let mut c_k1 = &v * (h / 6.0);
            let mut c_k2 = &v * (h / 3.0);
            let c_k3_base = &v * (h / 3.0);
            let c_k4 = &v * (h / 6.0);
            grad_h_total +=
                (v.dot(k1) + 2.0 * v.dot(k2) + 2.0 * v.dot(k3) + v.dot(k4)) / 6.0;

            let mut v_next = v.clone();

            // K4 = F(a4) + B w_{k+1}; a4 = x_k + h K3
            let c_a4 = self.model.drift_vjp(a4, &c_k4);
            grad_w[k + 1] += self.model.diffusion_t_apply(&c_k4);
            v_next += &c_a4;
            let c_k3 = c_k3_base + &c_a4 * h;
            grad_h_total += k3.dot(&c_a4);

            // K3 = F(a3) + B m; a3 = x_k + (h/2) K2
            let c_a3 = self.model.drift_vjp(a3, &c_k3);
            let mut c_m = self.model.diffusion_t_apply(&c_k3);
            v_next += &c_a3;
            c_k2 += &c_a3 * (h / 2.0);
            grad_h_total += 0.5 * k2.dot(&c_a3);

            // K2 = F(a2) + B m; a2 = x_k + (h/2) K1
            let c_a2 = self.model.drift_vjp(a2, &c_k2);
            c_m += self.model.diffusion_t_apply(&c_k2);
            v_next += &c_a2;
            c_k1 += &c_a2 * (h / 2.0);
            grad_h_total += 0.5 * k1.dot(&c_a2);

            // K1 = F(x_k) + B w_k
            v_next += self.model.drift_vjp(x_k, &c_k1);
            grad_w[k] += self.model.diffusion_t_apply(&c_k1);

            // Midpoint deviation m = (w_k + w_{k+1}) / 2.
            grad_w[k] += &c_m * 0.5;
            grad_w[k + 1] += &c_m * 0.5;

            v = v_next;
            if let Some(ns) = nodes.as_mut() {
                ns[k] = v.clone();
            }
        }

        ReverseSweep {
            grad_w,
            grad_x0: v,
            grad_s: grad_h_total / n as f64,
            node_cotangents: nodes,
        }
    }

    /// Trapezoidal action of the deviations over physical duration `s`.
    pub fn action(&self, w: &[DVector<f64>], s: f64) -> f64 {
        0.5 * s
            * w.iter()
                .zip(&self.weights)
                .map(|(wk, c)| c * wk.norm_squared())
                .sum::<f64>()
    }

    /// Contribution of the action to the gradients: `s c_k w_k` per node
    /// and `action / s` for the time scale.
    pub fn action_gradients(&self, w: &[DVector<f64>], s: f64, grad_w: &mut [DVector<f64>]) -> f64 {
        for (k, wk) in w.iter().enumerate() {
            grad_w[k] += wk * (s * self.weights[k]);
        }
        0.5 * w
            .iter()
            .zip(&self.weights)
            .map(|(wk, c)| c * wk.norm_squared())
            .sum::<f64>()
    }

    pub fn terminal_level(&self, fp: &ForwardPass) -> f64 {
        self.set.value(fp.states.last().unwrap())
    }
}
