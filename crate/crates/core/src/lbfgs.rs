//! Limited-memory BFGS with Armijo backtracking.
//!
//! Small self-contained minimizer for the smooth augmented-Lagrangian
//! subproblems. Stops on an absolute gradient norm, on iteration budget,
//! or when the line search can no longer certify descent at machine
//! precision (common when polishing well past optimizer tolerance).

use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    /// Absolute infinity-norm gradient target.
    pub grad_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { memory: 10, max_iter: 500, grad_tol: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradTol,
    MaxIterations,
    /// No step could reduce the objective beyond rounding noise.
    Stalled,
}

#[derive(Debug)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    #[allow(dead_code)]
    pub value: f64,
    /// Infinity norm of the gradient at the final iterate.
    #[allow(dead_code)]
    pub grad_inf: f64,
    pub iterations: usize,
    pub stop: StopReason,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f`, which writes the gradient into its second argument and
/// returns the objective value.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, opts: &LbfgsOptions) -> LbfgsOutcome
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut grad = vec![0.0; n];
    let mut value = f(&x, &mut grad);
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;
    let mut stagnant = 0usize;

    for iter in 0..opts.max_iter {
        iterations = iter;
        let g_inf = inf_norm(&grad);
        if g_inf <= opts.grad_tol {
            stop = StopReason::GradTol;
            break;
        }

        // Two-loop recursion for d = -H g.
        let mut d: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &d);
            for i in 0..n {
                d[i] -= a * y[i];
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.back() {
            let yy = dot(y, y);
            if yy > 0.0 {
                let gamma = dot(s, y) / yy;
                for di in d.iter_mut() {
                    *di *= gamma;
                }
            }
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for i in 0..n {
                d[i] += s[i] * (a - b);
            }
        }

        let mut slope = dot(&grad, &d);
        if slope >= 0.0 {
            // Not a descent direction; fall back to steepest descent.
            pairs.clear();
            for i in 0..n {
                d[i] = -grad[i];
            }
            slope = -dot(&grad, &grad);
        }

        // No measurable decrease is possible when the directional
        // derivative is below rounding noise of the objective.
        if slope.abs() <= 1e-16 * (1.0 + value.abs()) {
            stop = StopReason::Stalled;
            break;
        }

        // Armijo backtracking from a unit step (gradient-scaled on the
        // very first iteration when no curvature information exists).
        let mut step = if pairs.is_empty() { (1.0 / (1.0 + g_inf)).min(1.0) } else { 1.0 };
        let c1 = 1e-4;
        let mut x_new = vec![0.0; n];
        let mut g_new = vec![0.0; n];
        let mut v_accepted = value;
        let mut accepted = false;
        for _ in 0..25 {
            // Stop once the trial decrease drops below rounding noise.
            if (step * slope).abs() <= 1e-17 * (1.0 + value.abs()) {
                break;
            }
            for i in 0..n {
                x_new[i] = x[i] + step * d[i];
            }
            let v_new = f(&x_new, &mut g_new);
            if v_new.is_finite() && v_new <= value + c1 * step * slope {
                accepted = true;
                v_accepted = v_new;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            stop = StopReason::Stalled;
            break;
        }
        // Give up once accepted steps stop making measurable progress.
        if value - v_accepted <= 1e-15 * (1.0 + value.abs()) {
            stagnant += 1;
            if stagnant >= 3 {
                x = x_new;
                std::mem::swap(&mut grad, &mut g_new);
                value = v_accepted;
                stop = StopReason::Stalled;
                break;
            }
        } else {
            stagnant = 0;
        }

        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - grad[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * inf_norm(&s) * inf_norm(&y) * n as f64 {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        std::mem::swap(&mut grad, &mut g_new);
        value = v_accepted;
        if iter + 1 == opts.max_iter {
            stop = StopReason::MaxIterations;
        }
    }

    let grad_inf = inf_norm(&grad);
    LbfgsOutcome { x, value, grad_inf, iterations, stop }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic_bowl() {
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * (x[0] - 3.0);
            g[1] = 8.0 * (x[1] + 1.0);
            (x[0] - 3.0).powi(2) + 4.0 * (x[1] + 1.0).powi(2)
        };
        let out = minimize(f, vec![0.0, 0.0], &LbfgsOptions::default());
        assert!(out.grad_inf < 1e-7, "grad {}", out.grad_inf);
        assert!((out.x[0] - 3.0).abs() < 1e-6);
        assert!((out.x[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn minimizes_rosenbrock() {
        let f = |x: &[f64], g: &mut [f64]| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        };
        let out = minimize(
            f,
            vec![-1.2, 1.0],
            &LbfgsOptions { max_iter: 2000, grad_tol: 1e-9, ..Default::default() },
        );
        assert!((out.x[0] - 1.0).abs() < 1e-5, "x = {:?}", out.x);
        assert!((out.x[1] - 1.0).abs() < 1e-5);
    }
}
