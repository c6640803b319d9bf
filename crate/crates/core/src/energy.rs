//! Discrete energies of nodal fields at scale `eps`.
//!
//! Gradient terms use one-point (cell-center) quadrature with the coefficient
//! of the cell. Zero-order terms (load, reaction, dissipation) use corner
//! quadrature: each cell gives weight `vol / 2^d` to its corners and uses its
//! own coefficient there.

use crate::env::{Cell, Ensemble, Environment, Phase, Realization};
use crate::error::{Error, Result};
use crate::fem::{cell_gradient, scatter_flux, scatter_tensor, Dofs};
use crate::grid::{CellField, Domain};
use crate::integrand::Integrand;
use crate::linalg::{NeumaierSum, SparseBuilder, SparseMatrix};
use crate::newton::Objective;
use crate::unfold::lattice_points;

/// Phase index of every grid cell for one realization at scale `eps`
/// (`eps = None` means the coefficient of the origin everywhere).
pub fn cell_phases(env: &Environment, omega: &Realization, domain: &Domain, eps: Option<f64>) -> Result<Vec<usize>> {
    match eps {
        None => Ok(vec![env.phase_at(omega, &[0; 3]); domain.cell_count()]),
        Some(eps) => {
            let zs: Vec<Cell> = lattice_points(&CellField::zeros(domain, 1, &[1.0]), eps, 1)?;
            Ok(zs.iter().map(|z| env.phase_at(omega, z)).collect())
        }
    }
}

/// Implicit-Euler inertia `(1/tau) * 1/2 int r (u - prev)^2`.
#[derive(Clone, Debug)]
pub struct Inertia {
    pub inv_tau: f64,
    /// Previous iterate, full nodal vector.
    pub prev: Vec<f64>,
}

/// `sum_cells vol * s * V(phase, grad u) + int f(u) - int load . u (+ inertia)`.
pub struct FieldEnergy<'a> {
    pub domain: &'a Domain,
    pub dofs: &'a Dofs,
    pub phases: &'a [Phase],
    pub cell_phase: Vec<usize>,
    pub integrand: &'a Integrand,
    /// Multiplies the gradient term.
    pub grad_scale: f64,
    pub load: Vec<f64>,
    /// Include the per-phase reaction potential (scalar fields only).
    pub reaction: bool,
    pub inertia: Option<Inertia>,
}

impl<'a> FieldEnergy<'a> {
    pub fn new(domain: &'a Domain, dofs: &'a Dofs, phases: &'a [Phase], cell_phase: Vec<usize>, integrand: &'a Integrand) -> Self {
        FieldEnergy {
            domain,
            dofs,
            phases,
            cell_phase,
            integrand,
            grad_scale: 1.0,
            load: vec![0.0; dofs.components],
            reaction: false,
            inertia: None,
        }
    }

    fn m(&self) -> usize {
        self.dofs.components
    }

    fn corner_weight(&self) -> f64 {
        self.domain.cell_volume() / self.domain.corners() as f64
    }

    /// Energy of a full nodal vector.
    pub fn value_full(&self, full: &[f64]) -> f64 {
        let (m, d) = (self.m(), self.domain.dim());
        let vol = self.domain.cell_volume();
        let cw = self.corner_weight();
        let mut g = vec![0.0; m * d];
        let mut s = NeumaierSum::default();
        for c in 0..self.domain.cell_count() {
            let ph = &self.phases[self.cell_phase[c]];
            cell_gradient(self.domain, c, full, m, &mut g);
            s.add(vol * self.grad_scale * self.integrand.value(ph, &g, d));
            for &node in &self.domain.cell_corners(c)[..self.domain.corners()] {
                for i in 0..m {
                    let u = full[node * m + i];
                    let mut z = -self.load[i] * u;
                    if self.reaction {
                        z += ph.reaction.value(u);
                    }
                    if let Some(inr) = &self.inertia {
                        let v = u - inr.prev[node * m + i];
                        z += inr.inv_tau * 0.5 * ph.r * v * v;
                    }
                    s.add(cw * z);
                }
            }
        }
        s.value()
    }

    /// Integrand values `V(phase, grad u)` per cell.
    pub fn integrand_values(&self, full: &[f64]) -> Vec<f64> {
        let (m, d) = (self.m(), self.domain.dim());
        let mut g = vec![0.0; m * d];
        (0..self.domain.cell_count())
            .map(|c| {
                cell_gradient(self.domain, c, full, m, &mut g);
                self.integrand.value(&self.phases[self.cell_phase[c]], &g, d)
            })
            .collect()
    }
}

impl Objective for FieldEnergy<'_> {
    fn dim(&self) -> usize {
        self.dofs.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.value_full(&self.dofs.expand(x))
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let full = self.dofs.expand(x);
        let (m, d) = (self.m(), self.domain.dim());
        let vol = self.domain.cell_volume();
        let cw = self.corner_weight();
        let mut g = vec![0.0; m * d];
        let mut flux = vec![0.0; m * d];
        out.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..self.domain.cell_count() {
            let ph = &self.phases[self.cell_phase[c]];
            cell_gradient(self.domain, c, &full, m, &mut g);
            self.integrand.gradient(ph, &g, d, &mut flux);
            scatter_flux(self.domain, c, &flux, self.dofs, vol * self.grad_scale, out);
            for &node in &self.domain.cell_corners(c)[..self.domain.corners()] {
                for i in 0..m {
                    let Some(k) = self.dofs.dof(node * m + i) else { continue };
                    let u = full[node * m + i];
                    let mut z = -self.load[i];
                    if self.reaction {
                        z += ph.reaction.derivative(u);
                    }
                    if let Some(inr) = &self.inertia {
                        z += inr.inv_tau * ph.r * (u - inr.prev[node * m + i]);
                    }
                    out[k] += cw * z;
                }
            }
        }
    }

    fn hessian(&self, x: &[f64]) -> SparseMatrix {
        let full = self.dofs.expand(x);
        let (m, d) = (self.m(), self.domain.dim());
        let n = m * d;
        let vol = self.domain.cell_volume();
        let cw = self.corner_weight();
        let mut g = vec![0.0; n];
        let mut h = vec![0.0; n * n];
        let mut b = SparseBuilder::new(self.dofs.len());
        for c in 0..self.domain.cell_count() {
            let ph = &self.phases[self.cell_phase[c]];
            cell_gradient(self.domain, c, &full, m, &mut g);
            self.integrand.hessian(ph, &g, d, &mut h);
            scatter_tensor(self.domain, c, &h, self.dofs, vol * self.grad_scale, &mut b);
            for &node in &self.domain.cell_corners(c)[..self.domain.corners()] {
                for i in 0..m {
                    let Some(k) = self.dofs.dof(node * m + i) else { continue };
                    let mut z = 0.0;
                    if self.reaction {
                        z += ph.reaction.second_derivative(full[node * m + i]);
                    }
                    if let Some(inr) = &self.inertia {
                        z += inr.inv_tau * ph.r;
                    }
                    b.push(k, k, cw * z);
                }
            }
        }
        b.build()
    }
}

/// Per-cell phase tables for every member of an ensemble.
pub fn ensemble_phases(env: &Environment, ens: &Ensemble, domain: &Domain, eps: Option<f64>) -> Result<Vec<Vec<usize>>> {
    if env.dim() != domain.dim() {
        return Err(Error::FieldMismatch("environment and domain dimensions differ".into()));
    }
    ens.members.iter().map(|omega| cell_phases(env, omega, domain, eps)).collect()
}
