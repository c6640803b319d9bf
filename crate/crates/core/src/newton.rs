//! Damped Newton with Armijo backtracking for smooth convex objectives.

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, solve_spd, CgOptions, SparseMatrix};

/// A smooth convex objective in a flat coordinate vector.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], g: &mut [f64]);
    fn hessian(&self, x: &[f64]) -> SparseMatrix;
    /// Projection onto the admissible subspace (identity by default).
    fn project(&self, _v: &mut [f64]) {}
    /// Whether [`Objective::project`] is nontrivial.
    fn constrained(&self) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NewtonOptions {
    /// Target for the Euclidean norm of the (projected) gradient.
    pub tol: f64,
    pub max_iter: usize,
    pub cg: CgOptions,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { tol: 1e-10, max_iter: 100, cg: CgOptions { tol: 1e-12, max_iter: 50_000 }, max_halvings: 60 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NewtonReport {
    pub iterations: usize,
    pub gradient_norm: f64,
    pub value: f64,
    /// Objective value after every accepted iteration, starting with the initial guess.
    pub history: Vec<f64>,
    /// Iterations that fell back to steepest descent.
    pub descent_steps: usize,
}

const LEVENBERG: f64 = 1e-10;

/// Minimizes `obj` starting from `x`, which is overwritten with the minimizer.
pub fn minimize<O: Objective + ?Sized>(obj: &O, x: &mut [f64], opts: &NewtonOptions) -> Result<NewtonReport> {
    let n = obj.dim();
    debug_assert_eq!(x.len(), n);
    if obj.constrained() {
        obj.project(x);
    }
    let mut g = vec![0.0; n];
    let mut value = obj.value(x);
    let mut history = vec![value];
    let mut descent_steps = 0;
    let project = |v: &mut [f64]| obj.project(v);
    let proj: Option<&dyn Fn(&mut [f64])> = if obj.constrained() { Some(&project) } else { None };
    for it in 0..=opts.max_iter {
        obj.gradient(x, &mut g);
        if let Some(p) = proj {
            p(&mut g);
        }
        let gnorm = norm2(&g);
        if !gnorm.is_finite() {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        if gnorm <= opts.tol {
            return Ok(NewtonReport { iterations: it, gradient_norm: gnorm, value, history, descent_steps });
        }
        if it == opts.max_iter {
            return Err(Error::Divergence(format!(
                "Newton stopped after {it} iterations with gradient norm {gnorm:e}"
            )));
        }
        let mut h = obj.hessian(x);
        let diag = h.diagonal();
        let dmax = diag.iter().cloned().fold(0.0, f64::max);
        let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if dmin <= 1e-12 * dmax.max(f64::MIN_POSITIVE) {
            h.shift_diagonal(LEVENBERG * dmax.max(1.0));
        }
        let rhs: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut step = vec![0.0; n];
        let rep = solve_spd(&h, &rhs, &mut step, proj, opts.cg);
        let mut slope = dot(&g, &step);
        if !rep.converged && rep.residual > 1e-2 || !(slope < 0.0) {
            step = rhs;
            slope = -gnorm * gnorm;
            descent_steps += 1;
        }
        let mut alpha = 1.0;
        let mut trial = vec![0.0; n];
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            for i in 0..n {
                trial[i] = x[i] + alpha * step[i];
            }
            let v = obj.value(&trial);
            // rounding slack: near the minimizer the decrease is below machine precision
            if v <= value + 1e-4 * alpha * slope + 4.0 * f64::EPSILON * value.abs() {
                x.copy_from_slice(&trial);
                value = v;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(Error::LineSearch { halvings: opts.max_halvings, gradient_norm: gnorm });
        }
        history.push(value);
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SparseBuilder;

    /// sum_i c_i x_i^4 / 4 + x_i^2 / 2 - b_i x_i
    struct Separable {
        c: Vec<f64>,
        b: Vec<f64>,
    }

    impl Objective for Separable {
        fn dim(&self) -> usize {
            self.c.len()
        }
        fn value(&self, x: &[f64]) -> f64 {
            (0..x.len()).map(|i| self.c[i] * x[i].powi(4) / 4.0 + x[i] * x[i] / 2.0 - self.b[i] * x[i]).sum()
        }
        fn gradient(&self, x: &[f64], g: &mut [f64]) {
            for i in 0..x.len() {
                g[i] = self.c[i] * x[i].powi(3) + x[i] - self.b[i];
            }
        }
        fn hessian(&self, x: &[f64]) -> SparseMatrix {
            let mut b = SparseBuilder::new(x.len());
            for i in 0..x.len() {
                b.push(i, i, 3.0 * self.c[i] * x[i] * x[i] + 1.0);
            }
            b.build()
        }
    }

    #[test]
    fn converges_with_monotone_history() {
        let obj = Separable { c: vec![1.0, 10.0, 0.5], b: vec![3.0, -20.0, 0.1] };
        let mut x = vec![0.0; 3];
        let rep = minimize(&obj, &mut x, &NewtonOptions::default()).unwrap();
        assert!(rep.gradient_norm <= 1e-10);
        for w in rep.history.windows(2) {
            assert!(w[1] <= w[0] + 1e-14 * w[0].abs());
        }
        for i in 0..3 {
            let r = obj.c[i] * x[i].powi(3) + x[i] - obj.b[i];
            assert!(r.abs() < 1e-10);
        }
    }
}
