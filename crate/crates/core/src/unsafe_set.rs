//! Level-set description of the unsafe region.
//!
//! The unsafe set is `D = { z : f(z) <= 0 }` with boundary at `f = 0`.
//! For mechanical models the level function may read the position block
//! only; its full-state gradient is then zero on the velocity block.

use nalgebra::DVector;

use crate::error::{Error, Result};

type ScalarFn = dyn Fn(&DVector<f64>) -> f64 + Send + Sync;
type GradFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;

/// Which part of the state the level function reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateSelector {
    FullState,
    /// The first `m` components (the position block of a mechanical model).
    PositionBlock(usize),
}

/// Unsafe region `D = { z : f(z) <= 0 }` given by a smooth level function.
pub struct UnsafeSet {
    level: Box<ScalarFn>,
    gradient: Box<GradFn>,
    selector: StateSelector,
}

impl std::fmt::Debug for UnsafeSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UnsafeSet").field("selector", &self.selector).finish()
    }
}

impl UnsafeSet {
    /// Level function over the full state.
    pub fn new<F, G>(level: F, gradient: G) -> Self
    where
        F: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        G: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            level: Box::new(level),
            gradient: Box::new(gradient),
            selector: StateSelector::FullState,
        }
    }

    /// Level function over the position block of a mechanical state; `level`
    /// and `gradient` receive the `m`-dimensional position sub-vector.
    pub fn position_block<F, G>(m: usize, level: F, gradient: G) -> Self
    where
        F: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        G: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            level: Box::new(level),
            gradient: Box::new(gradient),
            selector: StateSelector::PositionBlock(m),
        }
    }

    pub fn selector(&self) -> StateSelector {
        self.selector
    }

    /// Evaluates `f` at a full state.
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        match self.selector {
            StateSelector::FullState => (self.level)(x),
            StateSelector::PositionBlock(m) => (self.level)(&x.rows(0, m).into_owned()),
        }
    }

    /// Full-state gradient of `f`; zero on unread components.
    pub fn gradient_full(&self, x: &DVector<f64>) -> DVector<f64> {
        match self.selector {
            StateSelector::FullState => (self.gradient)(x),
            StateSelector::PositionBlock(m) => {
                let g = (self.gradient)(&x.rows(0, m).into_owned());
                let mut out = DVector::zeros(x.len());
                out.rows_mut(0, m).copy_from(&g);
                out
            }
        }
    }

    /// True when the state lies in the unsafe set (including its boundary).
    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.value(x) <= 0.0
    }

    /// Moves a state onto the boundary `f = 0` by damped Newton steps along
    /// the level gradient. Fails when the gradient vanishes on the way.
    pub fn project_to_boundary(&self, x: &DVector<f64>, max_iter: usize) -> Result<DVector<f64>> {
        let mut z = x.clone();
        let scale = 1.0 + self.value(x).abs();
        for _ in 0..max_iter {
            let f = self.value(&z);
            if f.abs() <= 1e-12 * scale {
                return Ok(z);
            }
            let g = self.gradient_full(&z);
            let gn2 = g.norm_squared();
            if gn2 < 1e-300 {
                return Err(Error::InvalidArgument(
                    "level gradient vanished during boundary projection".into(),
                ));
            }
            z -= g * (f / gn2);
        }
        let f = self.value(&z);
        if f.abs() <= 1e-8 * scale {
            Ok(z)
        } else {
            Err(Error::InvalidArgument(format!(
                "boundary projection did not converge (residual {f:.3e})"
            )))
        }
    }

    /// Compares the supplied gradient against central finite differences
    /// at the given probe states; returns the worst relative error.
    pub fn check_gradient(&self, probes: &[DVector<f64>]) -> f64 {
        let mut worst: f64 = 0.0;
        for x in probes {
            let g = self.gradient_full(x);
            let h = 1e-6 * (1.0 + x.norm());
            let mut fd = DVector::zeros(x.len());
            for j in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                fd[j] = (self.value(&xp) - self.value(&xm)) / (2.0 * h);
            }
            let denom = 1.0 + g.norm().max(fd.norm());
            worst = worst.max((g - fd).norm() / denom);
        }
        worst
    }
}

/// Half-line unsafe set `D = { x : x_0 >= threshold }`, i.e.
/// `f(x) = threshold - x_0`.
pub fn half_line_above(threshold: f64) -> UnsafeSet {
    UnsafeSet::new(
        move |x: &DVector<f64>| threshold - x[0],
        move |x: &DVector<f64>| {
            let mut g = DVector::zeros(x.len());
            g[0] = -1.0;
            g
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    #[test]
    fn half_line_membership() {
        let set = half_line_above(1.0);
        assert!(!set.contains(&dvector![0.0]));
        assert!(set.contains(&dvector![1.0]));
        assert!(set.contains(&dvector![2.5]));
        assert_relative_eq!(set.value(&dvector![0.25]), 0.75);
    }

    #[test]
    fn projection_lands_on_boundary() {
        let set = half_line_above(1.0);
        let z = set.project_to_boundary(&dvector![0.0], 50).unwrap();
        assert_relative_eq!(z[0], 1.0, epsilon = 1e-10);

        let ball = UnsafeSet::new(
            |x: &DVector<f64>| 1.0 - x.norm_squared(),
            |x: &DVector<f64>| x * -2.0,
        );
        let z = ball.project_to_boundary(&dvector![3.0, 4.0], 50).unwrap();
        assert_relative_eq!(z.norm(), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn projection_fails_on_flat_gradient() {
        let ball = UnsafeSet::new(
            |x: &DVector<f64>| 1.0 - x.norm_squared(),
            |x: &DVector<f64>| x * -2.0,
        );
        assert!(ball.project_to_boundary(&dvector![0.0, 0.0], 50).is_err());
    }

    #[test]
    fn position_block_gradient_padded() {
        let set = UnsafeSet::position_block(
            1,
            |r: &DVector<f64>| 1.0 - r[0],
            |r: &DVector<f64>| {
                let mut g = DVector::zeros(r.len());
                g[0] = -1.0;
                g
            },
        );
        let x = dvector![0.5, 9.0]; // (eta, nu)
        assert_relative_eq!(set.value(&x), 0.5);
        let g = set.gradient_full(&x);
        assert_eq!(g.len(), 2);
        assert_relative_eq!(g[0], -1.0);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn gradient_check_catches_mismatch() {
        let good = half_line_above(0.0);
        assert!(good.check_gradient(&[dvector![0.3, 0.0]]) < 1e-9);
        let bad = UnsafeSet::new(
            |x: &DVector<f64>| 1.0 - x[0],
            |x: &DVector<f64>| {
                let mut g = DVector::zeros(x.len());
                g[0] = 1.0; // wrong sign
                g
            },
        );
        assert!(bad.check_gradient(&[dvector![0.3]]) > 0.1);
    }
}
