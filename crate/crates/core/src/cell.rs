//! Corrector problems on the shift torus.
//!
//! The horizontal derivative `D_j` is the forward difference along axis `j`,
//! averaged over the `2^(d-1)` edges of a unit cell parallel to `e_j` (the
//! cell-center gradient of the multilinear interpolant; plain forward
//! differences in one dimension). Potential fields are exactly the range of
//! `D` on mean-zero torus functions. A refinement factor `k` subdivides every
//! lattice cell into `k^d` sites; differences are then scaled by `k` so that
//! `chi` is measured in units of the unrefined lattice.

use web_time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::env::{Cell, Environment, Medium, Phase, Quartic, Realization, MAX_DIM};
use crate::error::{Error, Result};
use crate::integrand::Integrand;
use crate::linalg::{solve_spd, CgOptions, NeumaierSum, SparseBuilder, SparseMatrix};
use crate::newton::{minimize, NewtonOptions, Objective};
use crate::{par, rng};

/// Default number of sites per lattice cell and axis.
pub const DEFAULT_REFINEMENT: usize = 4;

/// `chi = k D phi` for a mean-zero torus function `phi` with `m` components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialField {
    pub d: usize,
    pub components: usize,
    /// Sites per axis of the (refined) torus.
    pub period: [usize; MAX_DIM],
    pub refinement: usize,
    /// `phi[site * components + c]`.
    pub phi: Vec<f64>,
}

impl PotentialField {
    /// Wraps `phi`, removing its mean per component.
    pub fn new(d: usize, components: usize, period: [usize; MAX_DIM], refinement: usize, mut phi: Vec<f64>) -> Result<Self> {
        let sites: usize = period[..d].iter().product();
        if phi.len() != sites * components {
            return Err(Error::FieldMismatch(format!(
                "potential needs {} values, got {}",
                sites * components,
                phi.len()
            )));
        }
        if refinement == 0 {
            return Err(Error::InvalidEnvironment("refinement must be positive".into()));
        }
        project_mean_zero(&mut phi, components);
        Ok(PotentialField { d, components, period, refinement, phi })
    }

    pub fn zero(d: usize, components: usize, period: [usize; MAX_DIM], refinement: usize) -> Self {
        let sites: usize = period[..d].iter().product();
        PotentialField { d, components, period, refinement, phi: vec![0.0; sites * components] }
    }

    pub fn site_count(&self) -> usize {
        self.period[..self.d].iter().product()
    }

    pub fn site_index(&self, cell: &Cell) -> usize {
        let mut idx = 0usize;
        for axis in (0..self.d).rev() {
            idx = idx * self.period[axis] + cell[axis].rem_euclid(self.period[axis] as i64) as usize;
        }
        idx
    }

    pub fn site_cell(&self, mut idx: usize) -> Cell {
        let mut c = [0i64; MAX_DIM];
        for axis in 0..self.d {
            c[axis] = (idx % self.period[axis]) as i64;
            idx /= self.period[axis];
        }
        c
    }

    pub fn phi_at(&self, cell: &Cell) -> &[f64] {
        let s = self.site_index(cell);
        &self.phi[s * self.components..(s + 1) * self.components]
    }

    /// `chi` at a site; `out[i * d + j] = k (D_j phi_i)(s)`.
    pub fn chi_at(&self, cell: &Cell, out: &mut [f64]) {
        let (d, m) = (self.d, self.components);
        let w = self.refinement as f64 / (1usize << (d - 1)) as f64;
        out[..m * d].iter_mut().for_each(|v| *v = 0.0);
        for b in 0..(1usize << d) {
            let mut c = *cell;
            for axis in 0..d {
                c[axis] += ((b >> axis) & 1) as i64;
            }
            let site = self.site_index(&c);
            for j in 0..d {
                let sign = if (b >> j) & 1 == 1 { w } else { -w };
                for i in 0..m {
                    out[i * d + j] += sign * self.phi[site * m + i];
                }
            }
        }
    }

    /// `chi` at every site, `m * d` values per site.
    pub fn chi(&self) -> Vec<f64> {
        let n = self.components * self.d;
        let mut out = vec![0.0; self.site_count() * n];
        for s in 0..self.site_count() {
            let c = self.site_cell(s);
            self.chi_at(&c, &mut out[s * n..(s + 1) * n]);
        }
        out
    }

    pub fn scale(&self, alpha: f64) -> Self {
        PotentialField { phi: self.phi.iter().map(|v| alpha * v).collect(), ..self.clone() }
    }

    /// `alpha * self + beta * other`.
    pub fn combine(&self, alpha: f64, other: &PotentialField, beta: f64) -> Result<Self> {
        if self.period != other.period || self.components != other.components || self.refinement != other.refinement {
            return Err(Error::FieldMismatch("potential fields live on different tori".into()));
        }
        let phi = self.phi.iter().zip(&other.phi).map(|(a, b)| alpha * a + beta * b).collect();
        Ok(PotentialField { phi, ..self.clone() })
    }
}

fn project_mean_zero(v: &mut [f64], m: usize) {
    let sites = v.len() / m;
    for c in 0..m {
        let mut s = NeumaierSum::default();
        for site in 0..sites {
            s.add(v[site * m + c]);
        }
        let mean = s.value() / sites as f64;
        for site in 0..sites {
            v[site * m + c] -= mean;
        }
    }
}

/// The refined torus: per-site phase and forward neighbours.
struct Torus {
    d: usize,
    period: [usize; MAX_DIM],
    refinement: usize,
    phases: Vec<usize>,
    /// Site of corner `b` (bit `j` = offset along axis `j`) of each unit cell.
    corners: Vec<[usize; 1 << MAX_DIM]>,
}

impl Torus {
    fn new(env: &Environment, k: usize) -> Result<Self> {
        if matches!(env.medium(), Medium::IidLattice { .. }) {
            return Err(Error::Unsupported(
                "cell problems need a shift torus; window an i.i.d. medium first".into(),
            ));
        }
        let fine = env.refine(k)?;
        let d = env.dim();
        let period = fine.period().unwrap();
        let sites = fine.site_count().unwrap();
        let origin = Realization::origin();
        let phases = (0..sites).map(|s| fine.phase_at(&origin, &fine.site_cell(s))).collect();
        let corners = (0..sites)
            .map(|s| {
                let c = fine.site_cell(s);
                let mut out = [0usize; 1 << MAX_DIM];
                for (b, slot) in out.iter_mut().enumerate().take(1 << d) {
                    let mut n = c;
                    for axis in 0..d {
                        n[axis] += ((b >> axis) & 1) as i64;
                    }
                    *slot = fine.site_index(&n);
                }
                out
            })
            .collect();
        Ok(Torus { d, period, refinement: k, phases, corners })
    }

    fn sites(&self) -> usize {
        self.phases.len()
    }

    /// Weight of corner `b` in `D_j`, including the factor `k`.
    fn weight(&self, b: usize, j: usize) -> f64 {
        let w = self.refinement as f64 / (1usize << (self.d - 1)) as f64;
        if (b >> j) & 1 == 1 {
            w
        } else {
            -w
        }
    }
}

/// `phi -> <V(omega, F + k D phi)>` over the refined torus.
struct CellObjective<'a> {
    torus: &'a Torus,
    phases: &'a [Phase],
    v: &'a Integrand,
    f: &'a [f64],
    m: usize,
}

impl CellObjective<'_> {
    fn xi(&self, phi: &[f64], s: usize, out: &mut [f64]) {
        let (d, m) = (self.torus.d, self.m);
        out.copy_from_slice(&self.f[..m * d]);
        for b in 0..(1usize << d) {
            let site = self.torus.corners[s][b];
            for j in 0..d {
                let w = self.torus.weight(b, j);
                for i in 0..m {
                    out[i * d + j] += w * phi[site * m + i];
                }
            }
        }
    }
}

impl Objective for CellObjective<'_> {
    fn dim(&self) -> usize {
        self.torus.sites() * self.m
    }

    fn value(&self, phi: &[f64]) -> f64 {
        let d = self.torus.d;
        let mut xi = vec![0.0; self.m * d];
        let mut s = NeumaierSum::default();
        for site in 0..self.torus.sites() {
            self.xi(phi, site, &mut xi);
            s.add(self.v.value(&self.phases[self.torus.phases[site]], &xi, d));
        }
        s.value() / self.torus.sites() as f64
    }

    fn gradient(&self, phi: &[f64], g: &mut [f64]) {
        let (d, m) = (self.torus.d, self.m);
        let n = self.torus.sites();
        let mut xi = vec![0.0; m * d];
        let mut gv = vec![0.0; m * d];
        g.iter_mut().for_each(|v| *v = 0.0);
        for s in 0..n {
            self.xi(phi, s, &mut xi);
            self.v.gradient(&self.phases[self.torus.phases[s]], &xi, d, &mut gv);
            for b in 0..(1usize << d) {
                let site = self.torus.corners[s][b];
                for i in 0..m {
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += self.torus.weight(b, j) * gv[i * d + j];
                    }
                    g[site * m + i] += acc / n as f64;
                }
            }
        }
    }

    fn hessian(&self, phi: &[f64]) -> SparseMatrix {
        let (d, m) = (self.torus.d, self.m);
        let n = self.torus.sites();
        let w = m * d;
        let corners = 1usize << d;
        let mut xi = vec![0.0; w];
        let mut hv = vec![0.0; w * w];
        let mut b = SparseBuilder::new(n * m);
        for s in 0..n {
            self.xi(phi, s, &mut xi);
            self.v.hessian(&self.phases[self.torus.phases[s]], &xi, d, &mut hv);
            for ca in 0..corners {
                let sa = self.torus.corners[s][ca];
                for cb in 0..corners {
                    let sb = self.torus.corners[s][cb];
                    for i in 0..m {
                        for l in 0..m {
                            let mut acc = 0.0;
                            for j in 0..d {
                                for q in 0..d {
                                    acc += self.torus.weight(ca, j) * hv[(i * d + j) * w + l * d + q] * self.torus.weight(cb, q);
                                }
                            }
                            b.push(sa * m + i, sb * m + l, acc / n as f64);
                        }
                    }
                }
            }
        }
        b.build()
    }

    fn project(&self, v: &mut [f64]) {
        project_mean_zero(v, self.m);
    }

    fn constrained(&self) -> bool {
        true
    }
}

/// Minimizer of a cell problem.
#[derive(Clone, Debug, PartialEq)]
pub struct Corrector {
    pub chi: PotentialField,
    /// `A_hom F . F` for quadratic problems, `V_hom(F)` otherwise.
    pub value: f64,
    pub iterations: usize,
    /// Relative CG residual (quadratic) or gradient norm (convex).
    pub residual: f64,
    pub seconds: f64,
}

fn check_load(env: &Environment, v: &Integrand, f: &[f64]) -> Result<usize> {
    v.validate()?;
    let d = env.dim();
    let m = v.components(d);
    if f.len() != m * d {
        return Err(Error::FieldMismatch(format!("F needs {} entries, got {}", m * d, f.len())));
    }
    Ok(m)
}

/// `inf_chi <A (F + chi) . (F + chi)>` by one CG solve. A vector `F` (length `d`)
/// gives the conductivity problem, a matrix `F` (length `d^2`, row-major) the
/// elasticity problem `<a |(F + chi)^s|^2>`.
pub fn corrector_quadratic(env: &Environment, f: &[f64], k: usize) -> Result<Corrector> {
    let d = env.dim();
    let v = if f.len() == d * d && d > 1 { Integrand::Elastic } else { Integrand::Quadratic };
    let start = Instant::now();
    let m = check_load(env, &v, f)?;
    let torus = Torus::new(env, k)?;
    let obj = CellObjective { torus: &torus, phases: env.phases(), v: &v, f, m };
    let n = obj.dim();
    let zero = vec![0.0; n];
    let h = obj.hessian(&zero);
    let mut g = vec![0.0; n];
    obj.gradient(&zero, &mut g);
    let rhs: Vec<f64> = g.iter().map(|x| -x).collect();
    let mut phi = vec![0.0; n];
    let project = |x: &mut [f64]| project_mean_zero(x, m);
    let rep = solve_spd(&h, &rhs, &mut phi, Some(&project), CgOptions { tol: 1e-12, max_iter: 50 * n + 1000 });
    if rep.residual > 1e-10 {
        return Err(Error::CgNotConverged { iterations: rep.iterations, residual: rep.residual });
    }
    let value = 2.0 * obj.value(&phi);
    let chi = PotentialField::new(d, m, torus.period, k, phi)?;
    Ok(Corrector { chi, value, iterations: rep.iterations, residual: rep.residual, seconds: start.elapsed().as_secs_f64() })
}

/// `V_hom(F) = inf_chi <V(omega, F + chi)>` by damped Newton.
pub fn corrector_convex(env: &Environment, v: &Integrand, f: &[f64], k: usize, tol: f64) -> Result<Corrector> {
    let start = Instant::now();
    let m = check_load(env, v, f)?;
    let torus = Torus::new(env, k)?;
    let obj = CellObjective { torus: &torus, phases: env.phases(), v, f, m };
    let mut phi = vec![0.0; obj.dim()];
    let opts = NewtonOptions { tol, ..NewtonOptions::default() };
    let rep = minimize(&obj, &mut phi, &opts)?;
    let chi = PotentialField::new(env.dim(), m, torus.period, k, phi)?;
    Ok(Corrector {
        chi,
        value: rep.value,
        iterations: rep.iterations,
        residual: rep.gradient_norm,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Quadratic integrands report `A_hom F . F`, the others `V_hom(F)`.
pub fn cell_value(env: &Environment, v: &Integrand, f: &[f64], k: usize, tol: f64) -> Result<Corrector> {
    match v {
        Integrand::Quadratic if f.len() == env.dim() => corrector_quadratic(env, f, k),
        Integrand::Elastic => corrector_quadratic(env, f, k),
        _ => corrector_convex(env, v, f, k, tol),
    }
}

/// Effective conductivity matrix with its correctors.
#[derive(Clone, Debug, PartialEq)]
pub struct Homogenized {
    pub d: usize,
    /// Row-major `d x d`.
    pub matrix: Vec<f64>,
    /// Corrector for each unit vector `e_j`.
    pub correctors: Vec<PotentialField>,
    /// Largest CG residual among the solves.
    pub residual: f64,
    /// `<A^{-1}>^{-1}` and `<A>`.
    pub reuss: Vec<f64>,
    pub voigt: Vec<f64>,
}

impl Homogenized {
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.d + j]
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut e: Vec<f64> = SymmetricEigen::new(DMatrix::from_row_slice(self.d, self.d, &self.matrix)).eigenvalues.iter().copied().collect();
        e.sort_by(|a, b| a.partial_cmp(b).unwrap());
        e
    }

    /// `chi(F) = sum_j F_j chi_j`.
    pub fn corrector_for(&self, f: &[f64]) -> PotentialField {
        let mut out = self.correctors[0].scale(f[0]);
        for j in 1..self.d {
            out = out.combine(1.0, &self.correctors[j], f[j]).unwrap();
        }
        out
    }
}

/// Assembles `A_hom` from `d` unit-load correctors and checks symmetry and the
/// Voigt-Reuss sandwich `<A^{-1}>^{-1} <= A_hom <= <A>`.
pub fn assemble_ahom(env: &Environment, k: usize) -> Result<Homogenized> {
    let d = env.dim();
    let torus = Torus::new(env, k)?;
    let unit = |j: usize| {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        e
    };
    let sols = par::try_map_indices(d, |j| corrector_quadratic(env, &unit(j), k))?;
    let chis: Vec<Vec<f64>> = sols.iter().map(|s| s.chi.chi()).collect();
    let mut matrix = vec![0.0; d * d];
    let n = torus.sites();
    for i in 0..d {
        for j in 0..d {
            let mut s = NeumaierSum::default();
            for site in 0..n {
                let a = &env.phase(torus.phases[site]).matrix;
                let xi_i: Vec<f64> = (0..d).map(|q| unit(i)[q] + chis[i][site * d + q]).collect();
                let xi_j: Vec<f64> = (0..d).map(|q| unit(j)[q] + chis[j][site * d + q]).collect();
                for p in 0..d {
                    for q in 0..d {
                        s.add(a[p][q] * xi_i[p] * xi_j[q]);
                    }
                }
            }
            matrix[i * d + j] = s.value() / n as f64;
        }
    }
    let scale = matrix.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    for i in 0..d {
        for j in 0..i {
            if (matrix[i * d + j] - matrix[j * d + i]).abs() > 1e-10 * scale {
                return Err(Error::BoundViolation(format!("A_hom is not symmetric: entry ({i},{j})")));
            }
            let s = 0.5 * (matrix[i * d + j] + matrix[j * d + i]);
            matrix[i * d + j] = s;
            matrix[j * d + i] = s;
        }
    }
    let mut voigt = DMatrix::zeros(d, d);
    let mut inverse = DMatrix::zeros(d, d);
    for &ph in &torus.phases {
        let a = DMatrix::from_fn(d, d, |i, j| env.phase(ph).matrix[i][j]);
        inverse += a.clone().try_inverse().unwrap() / n as f64;
        voigt += a / n as f64;
    }
    let reuss = inverse.try_inverse().unwrap();
    let ahom = DMatrix::from_row_slice(d, d, &matrix);
    let tol = 1e-9 * scale;
    let lower = SymmetricEigen::new(&ahom - &reuss).eigenvalues.min();
    let upper = SymmetricEigen::new(&voigt - &ahom).eigenvalues.min();
    if lower < -tol || upper < -tol {
        return Err(Error::BoundViolation(format!(
            "A_hom leaves the Voigt-Reuss bounds (margins {lower:e}, {upper:e})"
        )));
    }
    let residual = sols.iter().map(|s| s.residual).fold(0.0, f64::max);
    let row_major = |m: &DMatrix<f64>| (0..d * d).map(|k| m[(k / d, k % d)]).collect::<Vec<f64>>();
    Ok(Homogenized {
        d,
        matrix,
        correctors: sols.into_iter().map(|s| s.chi).collect(),
        residual,
        reuss: row_major(&reuss),
        voigt: row_major(&voigt),
    })
}

/// `<dV(omega, F + chi)>`, the derivative of `V_hom` at `F` when `chi` is the optimal corrector.
pub fn mean_flux(env: &Environment, v: &Integrand, f: &[f64], chi: &PotentialField) -> Result<Vec<f64>> {
    let m = check_load(env, v, f)?;
    let torus = Torus::new(env, chi.refinement)?;
    if chi.components != m || chi.period != torus.period {
        return Err(Error::FieldMismatch("corrector does not match the environment torus".into()));
    }
    let d = env.dim();
    let n = m * d;
    let mut xi = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut sums = vec![NeumaierSum::default(); n];
    for site in 0..torus.sites() {
        chi.chi_at(&chi.site_cell(site), &mut xi);
        xi.iter_mut().zip(f).for_each(|(x, fv)| *x += fv);
        v.gradient(env.phase(torus.phases[site]), &xi, d, &mut g);
        sums.iter_mut().zip(&g).for_each(|(s, gv)| s.add(*gv));
    }
    Ok(sums.iter().map(|s| s.value() / torus.sites() as f64).collect())
}

/// Effective tensor of a quadratic integrand: `M[a][b] = <V'' (e_a + chi_a) . (e_b + chi_b)>`
/// over the `m d` unit gradients, with the corrector of each.
pub fn effective_tensor(env: &Environment, v: &Integrand, k: usize) -> Result<(Vec<f64>, Vec<PotentialField>)> {
    if !matches!(v, Integrand::Quadratic | Integrand::Elastic) {
        return Err(Error::Unsupported("effective tensors need a quadratic or elastic integrand".into()));
    }
    let d = env.dim();
    let n = v.components(d) * d;
    let unit = |a: usize| {
        let mut e = vec![0.0; n];
        e[a] = 1.0;
        e
    };
    let sols = par::try_map_indices(n, |a| {
        let m = check_load(env, v, &unit(a))?;
        let torus = Torus::new(env, k)?;
        let obj = CellObjective { torus: &torus, phases: env.phases(), v, f: &unit(a), m };
        let dim = obj.dim();
        let zero = vec![0.0; dim];
        let h = obj.hessian(&zero);
        let mut g = vec![0.0; dim];
        obj.gradient(&zero, &mut g);
        let rhs: Vec<f64> = g.iter().map(|x| -x).collect();
        let mut phi = vec![0.0; dim];
        let project = |x: &mut [f64]| project_mean_zero(x, m);
        let rep = solve_spd(&h, &rhs, &mut phi, Some(&project), CgOptions { tol: 1e-12, max_iter: 50 * dim + 1000 });
        if rep.residual > 1e-10 {
            return Err(Error::CgNotConverged { iterations: rep.iterations, residual: rep.residual });
        }
        PotentialField::new(d, m, torus.period, k, phi)
    })?;
    let torus = Torus::new(env, k)?;
    let chis: Vec<Vec<f64>> = sols.iter().map(|c| c.chi()).collect();
    let mut h = vec![0.0; n * n];
    let mut sums = vec![NeumaierSum::default(); n * n];
    let zero = vec![0.0; n];
    for site in 0..torus.sites() {
        v.hessian(env.phase(torus.phases[site]), &zero, d, &mut h);
        for a in 0..n {
            let xa: Vec<f64> = (0..n).map(|q| unit(a)[q] + chis[a][site * n + q]).collect();
            for b in 0..n {
                let xb = |q: usize| unit(b)[q] + chis[b][site * n + q];
                let mut acc = 0.0;
                for p in 0..n {
                    for q in 0..n {
                        acc += xa[p] * h[p * n + q] * xb(q);
                    }
                }
                sums[a * n + b].add(acc);
            }
        }
    }
    let mut matrix: Vec<f64> = sums.iter().map(|s| s.value() / torus.sites() as f64).collect();
    for a in 0..n {
        for b in 0..a {
            let s = 0.5 * (matrix[a * n + b] + matrix[b * n + a]);
            matrix[a * n + b] = s;
            matrix[b * n + a] = s;
        }
    }
    Ok((matrix, sols))
}

/// Expected reaction potential, tabulated on `ys`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReactionTable {
    pub ys: Vec<f64>,
    pub values: Vec<f64>,
    pub polynomial: Quartic,
    /// Smallest per-phase convexity modulus.
    pub lambda: f64,
}

pub fn f_hom(env: &Environment, ys: &[f64]) -> ReactionTable {
    let probs = env.phase_probabilities();
    let polynomial = Quartic::average(probs.iter().copied().zip(env.phases().iter().map(|p| &p.reaction)));
    let lambda = env
        .phases()
        .iter()
        .zip(&probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(ph, _)| ph.reaction.lambda())
        .fold(f64::INFINITY, f64::min);
    ReactionTable { ys: ys.to_vec(), values: ys.iter().map(|&y| polynomial.value(y)).collect(), polynomial, lambda }
}

/// Windowed cell values over independent realizations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RveEstimate {
    pub side: usize,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation.
    pub std: f64,
}

/// Cell value on periodized `side^d` windows of `seeds` realizations of an i.i.d. medium.
pub fn rve_vhom(env: &Environment, v: &Integrand, f: &[f64], side: usize, seeds: usize, seed: u64, k: usize, tol: f64) -> Result<RveEstimate> {
    if seeds == 0 {
        return Err(Error::Empty("no seeds".into()));
    }
    let values = par::try_map_indices(seeds, |s| {
        let r = match env.medium() {
            Medium::IidLattice { .. } => Realization::with_stream(rng::derive(seed, s as u64)),
            _ => Realization::origin(),
        };
        let w = match env.medium() {
            Medium::Deterministic => env.clone(),
            _ => env.window(&r, side)?,
        };
        Ok(cell_value(&w, v, f, k, tol)?.value)
    })?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Ok(RveEstimate { side, values, mean, std: var.sqrt() })
}

/// Outcome of a stochastic Korn experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KornReport {
    pub p: f64,
    pub trials: usize,
    /// Trials with `chi = 0`, excluded from the supremum.
    pub skipped: usize,
    /// Largest `<|chi|^p> / <|chi^s|^p>` over the trials.
    pub max_ratio: f64,
    /// Same ratio recomputed from the Fourier symbol (`p = 2` only).
    pub fourier_max_ratio: Option<f64>,
    /// Largest discrepancy between direct and Fourier ratios.
    pub fourier_discrepancy: Option<f64>,
    /// Supremum of the symbol ratio over all nonzero frequencies.
    pub symbol_bound: f64,
}

/// Samples random vector potentials on the torus of `env` and measures
/// `<|chi|^p> / <|chi^s|^p>`.
pub fn korn_ratio(env: &Environment, trials: usize, p: f64, seed: u64) -> Result<KornReport> {
    if trials == 0 {
        return Err(Error::Empty("korn_ratio needs at least one trial".into()));
    }
    let d = env.dim();
    let period = env.period().ok_or_else(|| Error::Unsupported("korn_ratio needs a finite torus".into()))?;
    let sites: usize = period[..d].iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_ratio: f64 = 0.0;
    let mut fourier_max: f64 = 0.0;
    let mut discrepancy: f64 = 0.0;
    let mut skipped = 0;
    for _ in 0..trials {
        let phi: Vec<f64> = (0..sites * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let field = PotentialField::new(d, d, period, 1, phi)?;
        let chi = field.chi();
        let mut full = NeumaierSum::default();
        let mut sym = NeumaierSum::default();
        for block in chi.chunks_exact(d * d) {
            let mut s = block.to_vec();
            crate::grid::symmetrize(&mut s, d);
            full.add(block.iter().map(|x| x * x).sum::<f64>().powf(p / 2.0));
            sym.add(s.iter().map(|x| x * x).sum::<f64>().powf(p / 2.0));
        }
        let (num, den) = (full.value(), sym.value());
        if num <= 1e-28 {
            skipped += 1;
            continue;
        }
        if den <= 1e-14 * num {
            return Err(Error::Degenerate("nonzero potential field with vanishing symmetric part".into()));
        }
        let ratio = num / den;
        max_ratio = max_ratio.max(ratio);
        if p == 2.0 {
            let (fnum, fden) = fourier_energies(&field);
            let fr = fnum / fden;
            fourier_max = fourier_max.max(fr);
            discrepancy = discrepancy.max((fr - ratio).abs());
        }
    }
    let (fourier_max_ratio, fourier_discrepancy) = if p == 2.0 { (Some(fourier_max), Some(discrepancy)) } else { (None, None) };
    Ok(KornReport { p, trials, skipped, max_ratio, fourier_max_ratio, fourier_discrepancy, symbol_bound: symbol_bound(d, &period) })
}

/// Fourier symbol of `k D` at the frequency with multi-index `cell`:
/// `k (e^{i t_j} - 1) prod_{l != j} (1 + e^{i t_l}) / 2`.
fn symbol(d: usize, cell: &Cell, period: &[usize; MAX_DIM], k: f64) -> Vec<Complex64> {
    let e: Vec<Complex64> = (0..d)
        .map(|j| Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * cell[j] as f64 / period[j] as f64))
        .collect();
    (0..d)
        .map(|j| {
            let mut z = (e[j] - 1.0) * k;
            for l in (0..d).filter(|&l| l != j) {
                z *= (e[l] + 1.0) * 0.5;
            }
            z
        })
        .collect()
}

/// `sup |d|^2 |v|^2 / (|d|^2 |v|^2 / 2 + |v . conj(d)|^2 / 2)` over frequencies with
/// nonzero symbol `d` and `v != 0`.
pub fn symbol_bound(d: usize, period: &[usize; MAX_DIM]) -> f64 {
    let sites: usize = period[..d].iter().product();
    let mut best: f64 = 0.0;
    for s in 1..sites {
        let mut cell = [0i64; MAX_DIM];
        let mut idx = s;
        for axis in 0..d {
            cell[axis] = (idx % period[axis]) as i64;
            idx /= period[axis];
        }
        let norm2: f64 = symbol(d, &cell, period, 1.0).iter().map(|z| z.norm_sqr()).sum();
        if norm2 < 1e-24 {
            continue;
        }
        // min over unit v of |v . conj(d)|^2 is 0 once v can be chosen orthogonal to d
        let min_proj = if d >= 2 { 0.0 } else { norm2 };
        best = best.max(norm2 / (0.5 * norm2 + 0.5 * min_proj));
    }
    best
}

/// `(sum |chi|^2, sum |chi^s|^2)` computed through the discrete Fourier transform.
fn fourier_energies(field: &PotentialField) -> (f64, f64) {
    let d = field.d;
    let n = field.site_count();
    let k = field.refinement as f64;
    let hats: Vec<Vec<Complex64>> = (0..d)
        .map(|c| {
            let mut data: Vec<Complex64> = (0..n).map(|s| Complex64::new(field.phi[s * d + c], 0.0)).collect();
            fft_nd(&mut data, &field.period[..d]);
            data
        })
        .collect();
    let mut full = NeumaierSum::default();
    let mut sym = NeumaierSum::default();
    for s in 0..n {
        let cell = field.site_cell(s);
        let dvec = symbol(d, &cell, &field.period, k);
        let v: Vec<Complex64> = (0..d).map(|i| hats[i][s]).collect();
        let d2: f64 = dvec.iter().map(|z| z.norm_sqr()).sum();
        let v2: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        let vd: Complex64 = v.iter().zip(&dvec).map(|(a, b)| a * b.conj()).sum();
        full.add(d2 * v2);
        sym.add(0.5 * d2 * v2 + 0.5 * vd.norm_sqr());
    }
    (full.value() / n as f64, sym.value() / n as f64)
}

/// In-place multidimensional forward DFT (axis 0 fastest in memory).
fn fft_nd(data: &mut [Complex64], dims: &[usize]) {
    let mut planner = FftPlanner::new();
    let mut stride = 1;
    for &len in dims {
        let fft = planner.plan_fft_forward(len);
        let block = stride * len;
        let mut line = vec![Complex64::new(0.0, 0.0); len];
        for start in (0..data.len()).step_by(block) {
            for offset in 0..stride {
                for t in 0..len {
                    line[t] = data[start + offset + t * stride];
                }
                fft.process(&mut line);
                for t in 0..len {
                    data[start + offset + t * stride] = line[t];
                }
            }
        }
        stride = block;
    }
}

/// Aitken extrapolation of a sequence with geometric error decay (last three terms).
pub fn extrapolate(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 3 {
        return *values.last().expect("extrapolate needs at least one value");
    }
    let (a, b, c) = (values[n - 3], values[n - 2], values[n - 1]);
    let denom = (c - b) - (b - a);
    if denom.abs() <= 1e-300 || ((c - b) / (b - a)).abs() >= 1.0 {
        return c;
    }
    c - (c - b) * (c - b) / denom
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_tensor_matches_ahom_and_flux_matches_vhom_slope() {
        let env = Environment::shift_torus(2, &[2, 2], vec![0, 1, 1, 0], vec![Phase::scalar(1.0), Phase::scalar(4.0)]).unwrap();
        let hom = assemble_ahom(&env, 2).unwrap();
        let (m, chis) = effective_tensor(&env, &Integrand::Quadratic, 2).unwrap();
        for (a, b) in m.iter().zip(&hom.matrix) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(chis.len(), 2);

        // constant elastic medium: no correction, C_hom is the integrand Hessian
        let flat = Environment::shift_torus(2, &[1, 1], vec![0], vec![Phase::scalar(3.0)]).unwrap();
        let (c, _) = effective_tensor(&flat, &Integrand::Elastic, 1).unwrap();
        let mut h = vec![0.0; 16];
        Integrand::Elastic.hessian(&Phase::scalar(3.0), &[0.0; 4], 2, &mut h);
        for (a, b) in c.iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }

        let env1 = two_phase_1d(1.0, 4.0);
        let v = Integrand::PowerLaw { p: 3.0 };
        let s = 0.7;
        let sol = corrector_convex(&env1, &v, &[s], 2, 1e-13).unwrap();
        let flux = mean_flux(&env1, &v, &[s], &sol.chi).unwrap();
        let h = 1e-4;
        let up = corrector_convex(&env1, &v, &[s + h], 2, 1e-13).unwrap().value;
        let down = corrector_convex(&env1, &v, &[s - h], 2, 1e-13).unwrap().value;
        assert!((flux[0] - (up - down) / (2.0 * h)).abs() < 1e-6, "{flux:?}");
    }

    fn two_phase_1d(a: f64, b: f64) -> Environment {
        Environment::shift_torus(1, &[2], vec![0, 1], vec![Phase::scalar(a), Phase::scalar(b)]).unwrap()
    }

    fn checkerboard(a: f64, b: f64) -> Environment {
        Environment::shift_torus(2, &[2, 2], vec![0, 1, 1, 0], vec![Phase::scalar(a), Phase::scalar(b)]).unwrap()
    }

    #[test]
    fn constant_medium_has_zero_corrector() {
        let env = Environment::deterministic(2, Phase::scalar(3.0)).unwrap();
        let c = corrector_quadratic(&env, &[1.0, 2.0], 4).unwrap();
        assert!((c.value - 15.0).abs() < 1e-12);
        assert!(c.chi.chi().iter().all(|v| v.abs() < 1e-14));
        let p4 = corrector_convex(&env, &Integrand::PowerLaw { p: 4.0 }, &[0.5, -1.0], 4, 1e-10).unwrap();
        assert!((p4.value - 3.0 * 1.25f64.powi(2) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn harmonic_mean_in_one_dimension() {
        let env = two_phase_1d(1.0, 4.0);
        for k in [1, 3, 4] {
            let c = corrector_quadratic(&env, &[1.0], k).unwrap();
            assert!((c.value - 1.6).abs() < 1e-10, "k={k}: {}", c.value);
            assert!(c.residual <= 1e-10);
        }
    }

    #[test]
    fn brute_force_two_site_minimum() {
        // phi = (t, -t); the energy is a parabola in t, minimized from three samples
        let env = two_phase_1d(2.0, 7.0);
        let energy = |t: f64| 0.5 * (2.0 * (1.0 - 2.0 * t).powi(2) + 7.0 * (1.0 + 2.0 * t).powi(2));
        let (e0, e1, e2) = (energy(-1.0), energy(0.0), energy(1.0));
        let a = 0.5 * (e0 + e2) - e1;
        let b = 0.5 * (e2 - e0);
        let t = -b / (2.0 * a);
        let c = corrector_quadratic(&env, &[1.0], 1).unwrap();
        assert!((c.value - energy(t)).abs() < 1e-10);
        assert!((c.chi.phi[0] - t).abs() < 1e-10);
    }

    #[test]
    fn power_law_matches_bisection() {
        let (a1, a2, f) = (1.0, 16.0, 1.0);
        let res = |c: f64| a1 * (f + c).powi(3) - a2 * (f - c).powi(3);
        let (mut lo, mut hi) = (-f, f);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if res(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let c = 0.5 * (lo + hi);
        let oracle = 0.5 * (a1 * (f + c).powi(4) + a2 * (f - c).powi(4)) / 4.0;
        let env = two_phase_1d(a1, a2);
        let sol = corrector_convex(&env, &Integrand::PowerLaw { p: 4.0 }, &[f], 1, 1e-12).unwrap();
        assert!((sol.value - oracle).abs() < 1e-10, "{} vs {oracle}", sol.value);
    }

    #[test]
    fn checkerboard_approaches_geometric_mean() {
        let env = checkerboard(1.0, 4.0);
        let vals: Vec<f64> = [1, 2, 4, 8].iter().map(|&k| corrector_quadratic(&env, &[1.0, 0.0], k).unwrap().value).collect();
        for w in vals.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "refinement must not raise the value: {vals:?}");
        }
        assert!((extrapolate(&vals) - 2.0).abs() < 0.04, "{vals:?}");
        let ahom = assemble_ahom(&env, 4).unwrap();
        assert!((ahom.entry(0, 0) - ahom.entry(1, 1)).abs() < 1e-10);
        assert!(ahom.entry(0, 1).abs() < 1e-10);
    }

    #[test]
    fn matches_dense_periodic_cell_problem() {
        // independent dense assembly of the periodic cell problem with
        // cell-center gradients of the bilinear interpolant
        let config = vec![0, 1, 2, 1, 0, 2, 2, 2, 1];
        let coef = [1.0, 3.0, 0.5];
        let phases = coef.iter().map(|&a| Phase::scalar(a)).collect();
        let env = Environment::shift_torus(2, &[3, 3], config.clone(), phases).unwrap();
        let ahom = assemble_ahom(&env, 1).unwrap();
        let idx = |x: usize, y: usize| (x % 3) + 3 * (y % 3);
        let mut g = DMatrix::<f64>::zeros(18, 9);
        for y in 0..3 {
            for x in 0..3 {
                let s = idx(x, y);
                let (c00, c10, c01, c11) = (idx(x, y), idx(x + 1, y), idx(x, y + 1), idx(x + 1, y + 1));
                g[(2 * s, c10)] += 0.5;
                g[(2 * s, c11)] += 0.5;
                g[(2 * s, c00)] -= 0.5;
                g[(2 * s, c01)] -= 0.5;
                g[(2 * s + 1, c01)] += 0.5;
                g[(2 * s + 1, c11)] += 0.5;
                g[(2 * s + 1, c00)] -= 0.5;
                g[(2 * s + 1, c10)] -= 0.5;
            }
        }
        let w = DMatrix::from_fn(18, 18, |i, j| if i == j { coef[config[i / 2]] } else { 0.0 });
        let k = g.transpose() * &w * &g;
        let kinv = k.pseudo_inverse(1e-12).unwrap();
        let mut fields = Vec::new();
        for i in 0..2 {
            let f = nalgebra::DVector::from_fn(18, |r, _| if r % 2 == i { 1.0 } else { 0.0 });
            let phi = -(&kinv * (g.transpose() * &w * &f));
            fields.push(f + &g * phi);
        }
        for i in 0..2 {
            for j in 0..2 {
                let val = (fields[i].transpose() * &w * &fields[j])[(0, 0)] / 9.0;
                assert!((val - ahom.entry(i, j)).abs() < 1e-9, "({i},{j}): {val} vs {}", ahom.entry(i, j));
            }
        }
    }

    #[test]
    fn vhom_is_midpoint_convex() {
        let env = checkerboard(1.0, 5.0);
        let v = Integrand::PowerLaw { p: 3.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let f1 = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let f2 = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let mid = [0.5 * (f1[0] + f2[0]), 0.5 * (f1[1] + f2[1])];
            let val = |f: &[f64]| corrector_convex(&env, &v, f, 2, 1e-11).unwrap().value;
            assert!(val(&mid) <= 0.5 * (val(&f1) + val(&f2)) + 1e-9);
        }
    }

    #[test]
    fn f_hom_averages_reactions() {
        let phases = vec![Phase::scalar(1.0), Phase::scalar(1.0).with_reaction(Quartic::double_well().scaled(2.0))];
        let env = Environment::shift_torus(1, &[2], vec![0, 1], phases).unwrap();
        let ys: Vec<f64> = (-30..=30).map(|i| i as f64 / 10.0).collect();
        let t = f_hom(&env, &ys);
        for (y, v) in ys.iter().zip(&t.values) {
            assert!((v - 1.5 * Quartic::double_well().value(*y)).abs() < 1e-12);
        }
        assert!((t.lambda + 2.0).abs() < 1e-12);
    }

    #[test]
    fn korn_ratio_respects_symbol_bound() {
        let env = checkerboard(1.0, 1.0);
        let env = env.refine(3).unwrap();
        let rep = korn_ratio(&env, 50, 2.0, 9).unwrap();
        assert!((rep.symbol_bound - 2.0).abs() < 1e-12);
        assert!(rep.max_ratio <= 2.0 + 1e-8);
        assert!(rep.fourier_discrepancy.unwrap() < 1e-10);
        let one_d = two_phase_1d(1.0, 1.0);
        assert!((korn_ratio(&one_d, 5, 2.0, 1).unwrap().max_ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn extrapolation_recovers_geometric_limit() {
        let vals: Vec<f64> = (0..5).map(|i| 3.0 + 0.7 * 0.25f64.powi(i)).collect();
        assert!((extrapolate(&vals) - 3.0).abs() < 1e-12);
    }
}
