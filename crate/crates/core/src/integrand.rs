//! Convex integrands `V(omega, xi)` with first and second derivatives.
//!
//! `xi` is a flat row-major `m x d` matrix: component `i * d + j` is the
//! derivative along axis `j` of the `i`-th field component.

use serde::{Deserialize, Serialize};

use crate::env::Phase;
use crate::error::{Error, Result};

/// Which integrand family to use. Coefficients come from the phase table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Integrand {
    /// `1/2 A xi . xi` (scalar fields).
    Quadratic,
    /// `a |xi|^p / p` (scalar fields).
    PowerLaw { p: f64 },
    /// `1/2 a |xi^s|^2` (vector fields with `d` components).
    Elastic,
    /// `a (1/4 (|xi|^2 - 1)^2 + kappa/2 |xi|^2)`, convex iff `kappa >= 1`.
    RegularizedDoubleWell { kappa: f64 },
    /// Homogenized radial integrand `g(|xi|)` from a table (phase ignored).
    Tabulated(RadialTable),
    /// `1/2 M xi . xi` with a fixed symmetric `n x n` matrix, `n = xi.len()` (phase ignored).
    QuadraticForm { matrix: Vec<f64> },
}

impl Integrand {
    /// Rejects integrands that are not convex or have an invalid exponent.
    pub fn validate(&self) -> Result<()> {
        match self {
            Integrand::PowerLaw { p } if !(*p > 1.0) => {
                Err(Error::NonConvex(format!("power-law exponent p = {p} must exceed 1")))
            }
            Integrand::RegularizedDoubleWell { kappa } if !(*kappa >= 1.0) => Err(Error::NonConvex(format!(
                "double-well regularization kappa = {kappa} < 1 leaves a non-convex integrand"
            ))),
            Integrand::Tabulated(t) => t.validate(),
            Integrand::QuadraticForm { matrix } => {
                let n = (matrix.len() as f64).sqrt().round() as usize;
                if n * n != matrix.len() || n == 0 {
                    return Err(Error::NonConvex("quadratic form must be a square matrix".into()));
                }
                let m = nalgebra::DMatrix::from_row_slice(n, n, matrix);
                if (&m - m.transpose()).amax() > 1e-10 * m.amax().max(1.0) {
                    return Err(Error::NonConvex("quadratic form is not symmetric".into()));
                }
                if nalgebra::SymmetricEigen::new(m).eigenvalues.min() < -1e-12 {
                    return Err(Error::NonConvex("quadratic form is not positive semidefinite".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Field components `m` for spatial dimension `d`.
    pub fn components(&self, d: usize) -> usize {
        match self {
            Integrand::Elastic => d,
            Integrand::QuadraticForm { matrix } => ((matrix.len() as f64).sqrt().round() as usize / d).max(1),
            _ => 1,
        }
    }

    /// Growth exponent.
    pub fn exponent(&self) -> f64 {
        match self {
            Integrand::PowerLaw { p } => *p,
            Integrand::RegularizedDoubleWell { .. } => 4.0,
            _ => 2.0,
        }
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self, Integrand::Quadratic | Integrand::Elastic | Integrand::QuadraticForm { .. })
    }

    pub fn value(&self, phase: &Phase, xi: &[f64], d: usize) -> f64 {
        match self {
            Integrand::Quadratic => {
                let mut s = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        s += phase.matrix[i][j] * xi[i] * xi[j];
                    }
                }
                0.5 * s
            }
            Integrand::PowerLaw { p } => phase.a * norm_sq(xi).sqrt().powf(*p) / p,
            Integrand::Elastic => 0.5 * phase.a * sym_norm_sq(xi, d),
            Integrand::RegularizedDoubleWell { kappa } => {
                let s2 = norm_sq(xi);
                phase.a * (0.25 * (s2 - 1.0) * (s2 - 1.0) + 0.5 * kappa * s2)
            }
            Integrand::Tabulated(t) => t.value(norm_sq(xi).sqrt()),
            Integrand::QuadraticForm { matrix } => {
                let n = xi.len();
                let mut s = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        s += matrix[i * n + j] * xi[i] * xi[j];
                    }
                }
                0.5 * s
            }
        }
    }

    pub fn gradient(&self, phase: &Phase, xi: &[f64], d: usize, out: &mut [f64]) {
        match self {
            Integrand::Quadratic => {
                for i in 0..d {
                    out[i] = (0..d).map(|j| phase.matrix[i][j] * xi[j]).sum();
                }
            }
            Integrand::PowerLaw { p } => {
                let s = norm_sq(xi).sqrt();
                let f = if s > 0.0 { phase.a * s.powf(p - 2.0) } else { 0.0 };
                out.iter_mut().zip(xi).for_each(|(o, x)| *o = f * x);
            }
            Integrand::Elastic => {
                for i in 0..d {
                    for j in 0..d {
                        out[i * d + j] = phase.a * 0.5 * (xi[i * d + j] + xi[j * d + i]);
                    }
                }
            }
            Integrand::RegularizedDoubleWell { kappa } => {
                let f = phase.a * (norm_sq(xi) - 1.0 + kappa);
                out.iter_mut().zip(xi).for_each(|(o, x)| *o = f * x);
            }
            Integrand::Tabulated(t) => {
                let s = norm_sq(xi).sqrt();
                let f = if s > 0.0 { t.slope(s) / s } else { 0.0 };
                out.iter_mut().zip(xi).for_each(|(o, x)| *o = f * x);
            }
            Integrand::QuadraticForm { matrix } => {
                let n = xi.len();
                for i in 0..n {
                    out[i] = (0..n).map(|j| matrix[i * n + j] * xi[j]).sum();
                }
            }
        }
    }

    /// Row-major `n x n` Hessian with `n = xi.len()`.
    pub fn hessian(&self, phase: &Phase, xi: &[f64], d: usize, out: &mut [f64]) {
        let n = xi.len();
        out.iter_mut().for_each(|v| *v = 0.0);
        match self {
            Integrand::Quadratic => {
                for i in 0..d {
                    for j in 0..d {
                        out[i * n + j] = phase.matrix[i][j];
                    }
                }
            }
            Integrand::PowerLaw { p } => {
                // smoothed at 0 for p < 2 so the Newton matrix stays finite
                let s2 = norm_sq(xi);
                let s2 = if *p < 2.0 { s2 + 1e-12 } else { s2 };
                let base = if s2 > 0.0 { phase.a * s2.powf(0.5 * (p - 2.0)) } else if *p == 2.0 { phase.a } else { 0.0 };
                let rank1 = if s2 > 0.0 { base * (p - 2.0) / s2 } else { 0.0 };
                for i in 0..n {
                    out[i * n + i] += base;
                    for j in 0..n {
                        out[i * n + j] += rank1 * xi[i] * xi[j];
                    }
                }
            }
            Integrand::Elastic => {
                for i in 0..d {
                    for j in 0..d {
                        let row = i * d + j;
                        out[row * n + row] += 0.5 * phase.a;
                        out[row * n + (j * d + i)] += 0.5 * phase.a;
                    }
                }
            }
            Integrand::RegularizedDoubleWell { kappa } => {
                let base = phase.a * (norm_sq(xi) - 1.0 + kappa);
                for i in 0..n {
                    out[i * n + i] += base;
                    for j in 0..n {
                        out[i * n + j] += 2.0 * phase.a * xi[i] * xi[j];
                    }
                }
            }
            Integrand::Tabulated(t) => {
                let s = norm_sq(xi).sqrt();
                if s == 0.0 {
                    let c = t.curvature(0.0);
                    for i in 0..n {
                        out[i * n + i] = c;
                    }
                } else {
                    let tangential = t.slope(s) / s;
                    let radial = t.curvature(s);
                    for i in 0..n {
                        out[i * n + i] += tangential;
                        for j in 0..n {
                            out[i * n + j] += (radial - tangential) * xi[i] * xi[j] / (s * s);
                        }
                    }
                }
            }
            Integrand::QuadraticForm { matrix } => out.copy_from_slice(&matrix[..n * n]),
        }
    }
}

/// Convex radial function `g(s)`, `s >= 0`, from samples of `g'`.
///
/// `g'` is interpolated piecewise linearly (so `g` is piecewise quadratic and
/// convex whenever the slopes are nondecreasing) and extended linearly past
/// the last radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialTable {
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    pub slopes: Vec<f64>,
}

impl RadialTable {
    /// Builds the table from slopes at increasing radii starting at 0; values are
    /// integrated from `g(0) = value0`.
    pub fn from_slopes(radii: Vec<f64>, slopes: Vec<f64>, value0: f64) -> Result<Self> {
        if radii.len() < 2 || radii.len() != slopes.len() || radii[0] != 0.0 {
            return Err(Error::NonConvex("table needs >= 2 radii starting at 0 with matching slopes".into()));
        }
        let mut values = vec![value0];
        for k in 1..radii.len() {
            let h = radii[k] - radii[k - 1];
            values.push(values[k - 1] + 0.5 * h * (slopes[k] + slopes[k - 1]));
        }
        let t = RadialTable { radii, values, slopes };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.radii.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::NonConvex("table radii must increase".into()));
        }
        if self.slopes[0].abs() > 1e-12 * self.slopes.last().unwrap().abs().max(1.0) {
            return Err(Error::NonConvex("radial slope must vanish at the origin".into()));
        }
        if self.slopes.windows(2).any(|w| w[1] < w[0] - 1e-12 * w[0].abs().max(1.0)) {
            return Err(Error::NonConvex("interpolated table is not convex (slopes decrease)".into()));
        }
        Ok(())
    }

    fn segment(&self, s: f64) -> usize {
        let n = self.radii.len();
        match self.radii.binary_search_by(|r| r.partial_cmp(&s).unwrap()) {
            Ok(k) => k.min(n - 2),
            Err(k) => k.saturating_sub(1).min(n - 2),
        }
    }

    pub fn slope(&self, s: f64) -> f64 {
        let k = self.segment(s);
        let (r0, r1) = (self.radii[k], self.radii[k + 1]);
        let t = (s - r0) / (r1 - r0);
        self.slopes[k] + t * (self.slopes[k + 1] - self.slopes[k])
    }

    pub fn curvature(&self, s: f64) -> f64 {
        let k = self.segment(s);
        (self.slopes[k + 1] - self.slopes[k]) / (self.radii[k + 1] - self.radii[k])
    }

    pub fn value(&self, s: f64) -> f64 {
        let k = self.segment(s);
        let r0 = self.radii[k];
        let h = s - r0;
        self.values[k] + self.slopes[k] * h + 0.5 * self.curvature(s) * h * h
    }
}

#[inline]
fn norm_sq(xi: &[f64]) -> f64 {
    xi.iter().map(|x| x * x).sum()
}

#[inline]
fn sym_norm_sq(xi: &[f64], d: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            let e = 0.5 * (xi[i * d + j] + xi[j * d + i]);
            s += e * e;
        }
    }
    s
}
