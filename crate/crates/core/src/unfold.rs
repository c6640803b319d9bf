//! Stochastic unfolding `T_eps u(omega, x) = u(tau_{-x/eps} omega, x)` on a shift torus.
//!
//! At scale `eps = 1/m` every grid point `x` (node or cell center) is assigned
//! the lattice vector `z(x) = floor(x / eps)`, constant on coefficient cells.
//! Unfolding then permutes the realizations of each point by `-z(x)`; the
//! adjoint (and inverse) permutes by `+z(x)`. Nodes on a coefficient-cell
//! boundary take the cell above them.

use crate::cell::PotentialField;
use crate::env::{Cell, Ensemble, Environment, Medium, Realization, MAX_DIM};
use crate::error::{Error, Result};
use crate::fem::{assemble_stiffness, scatter_flux, Dofs};
use crate::grid::{CellField, Domain, RandomField};
use crate::linalg::{solve_spd, CgOptions, NeumaierSum};
use crate::par;
use serde::{Deserialize, Serialize};

/// Common view of nodal and cell fields as weighted point samples.
pub trait Sampled: Clone {
    fn domain(&self) -> &Domain;
    fn components(&self) -> usize;
    fn weights(&self) -> &[f64];
    fn values(&self) -> &[Vec<f64>];
    fn values_mut(&mut self) -> &mut Vec<Vec<f64>>;
    fn set_eps(&mut self, eps: Option<f64>);
    fn point_count(&self) -> usize;
    /// Multi-index of point `p` on the grid (node or cell).
    fn point_multi(&self, p: usize) -> [usize; MAX_DIM];
    fn point_coord(&self, p: usize) -> [f64; MAX_DIM];
    /// Quadrature volumes.
    fn point_volumes(&self) -> Vec<f64>;

    fn realizations(&self) -> usize {
        self.values().len()
    }
}

impl Sampled for RandomField {
    fn domain(&self) -> &Domain {
        &self.domain
    }
    fn components(&self) -> usize {
        self.components
    }
    fn weights(&self) -> &[f64] {
        &self.weights
    }
    fn values(&self) -> &[Vec<f64>] {
        &self.values
    }
    fn values_mut(&mut self) -> &mut Vec<Vec<f64>> {
        &mut self.values
    }
    fn set_eps(&mut self, eps: Option<f64>) {
        self.eps = eps;
    }
    fn point_count(&self) -> usize {
        self.domain.node_count()
    }
    fn point_multi(&self, p: usize) -> [usize; MAX_DIM] {
        self.domain.node_multi(p)
    }
    fn point_coord(&self, p: usize) -> [f64; MAX_DIM] {
        self.domain.node_coord(p)
    }
    fn point_volumes(&self) -> Vec<f64> {
        self.domain.node_weights()
    }
}

impl Sampled for CellField {
    fn domain(&self) -> &Domain {
        &self.domain
    }
    fn components(&self) -> usize {
        self.components
    }
    fn weights(&self) -> &[f64] {
        &self.weights
    }
    fn values(&self) -> &[Vec<f64>] {
        &self.values
    }
    fn values_mut(&mut self) -> &mut Vec<Vec<f64>> {
        &mut self.values
    }
    fn set_eps(&mut self, eps: Option<f64>) {
        self.eps = eps;
    }
    fn point_count(&self) -> usize {
        self.domain.cell_count()
    }
    fn point_multi(&self, p: usize) -> [usize; MAX_DIM] {
        self.domain.cell_multi(p)
    }
    fn point_coord(&self, p: usize) -> [f64; MAX_DIM] {
        self.domain.cell_center(p)
    }
    fn point_volumes(&self) -> Vec<f64> {
        vec![self.domain.cell_volume(); self.domain.cell_count()]
    }
}

/// Lattice vector `floor(x / eps)` of every point of `field`, refined `k` times:
/// the result is `floor(k x / eps)`.
pub fn lattice_points<F: Sampled>(field: &F, eps: f64, k: usize) -> Result<Vec<Cell>> {
    let dom = field.domain();
    let coarse = dom.coefficient_cells(eps)?;
    let d = dom.dim();
    let mut per = [1usize; MAX_DIM];
    for axis in 0..d {
        let cells = coarse[axis] * k;
        if dom.cells_per_axis()[axis] % cells != 0 {
            return Err(Error::Incommensurate {
                eps,
                reason: format!("{cells} sub-cells do not divide n = {} along axis {}", dom.cells_per_axis()[axis], axis + 1),
            });
        }
        per[axis] = dom.cells_per_axis()[axis] / cells;
    }
    Ok((0..field.point_count())
        .map(|p| {
            let mi = field.point_multi(p);
            let mut z = [0i64; MAX_DIM];
            for axis in 0..d {
                z[axis] = (mi[axis] / per[axis]) as i64;
            }
            z
        })
        .collect())
}

/// Precomputed realization permutations for one scale.
#[derive(Clone, Debug)]
pub struct UnfoldPlan {
    eps: f64,
    domain: Domain,
    sites: usize,
    cell_class: Vec<usize>,
    node_class: Vec<usize>,
    /// `forward[class][r]`: index of `tau_{-z} omega_r`.
    forward: Vec<Vec<usize>>,
    /// `backward[class][r]`: index of `tau_{+z} omega_r`.
    backward: Vec<Vec<usize>>,
}

impl UnfoldPlan {
    /// Requires the exact enumeration of a shift torus (or a deterministic medium).
    pub fn new(env: &Environment, ens: &Ensemble, domain: &Domain, eps: f64) -> Result<Self> {
        if env.dim() != domain.dim() {
            return Err(Error::FieldMismatch("environment and domain dimensions differ".into()));
        }
        let sites = match env.medium() {
            Medium::IidLattice { .. } => None,
            _ => env.site_count(),
        };
        let sites = match sites {
            Some(s) if ens.exact && ens.len() == s => s,
            Some(1) if ens.len() == 1 => 1,
            _ => {
                return Err(Error::Unsupported(
                    "unfolding needs the full orbit: use the exact enumeration of a shift torus".into(),
                ))
            }
        };
        let probe_nodes = RandomField::zeros(domain, 1, &[1.0]);
        let probe_cells = CellField::zeros(domain, 1, &[1.0]);
        let class = |z: &Cell| env.site_index(z);
        let cell_class = lattice_points(&probe_cells, eps, 1)?.iter().map(class).collect();
        let node_class = lattice_points(&probe_nodes, eps, 1)?.iter().map(class).collect();
        let mut forward = vec![vec![0; sites]; sites];
        let mut backward = vec![vec![0; sites]; sites];
        for c in 0..sites {
            let z = env.site_cell(c);
            let minus: Cell = std::array::from_fn(|a| -z[a]);
            for r in 0..sites {
                let omega = Realization { offset: env.site_cell(r), stream: 0 };
                forward[c][r] = env.site_index(&env.shift(&omega, &minus).offset);
                backward[c][r] = env.site_index(&env.shift(&omega, &z).offset);
            }
        }
        Ok(UnfoldPlan { eps, domain: domain.clone(), sites, cell_class, node_class, forward, backward })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    fn classes<F: Sampled>(&self, field: &F) -> Result<&[usize]> {
        if field.domain() != &self.domain {
            return Err(Error::FieldMismatch("field lives on a different grid".into()));
        }
        if field.point_count() == self.domain.node_count() && field.point_count() != self.domain.cell_count() {
            return Ok(&self.node_class);
        }
        if field.point_count() == self.domain.cell_count() && field.point_count() != self.domain.node_count() {
            return Ok(&self.cell_class);
        }
        Err(Error::FieldMismatch("cannot tell nodal from cell field".into()))
    }

    fn permute<F: Sampled>(&self, field: &F, tables: &[Vec<usize>], eps: Option<f64>) -> Result<F> {
        let classes = self.classes(field)?;
        if field.realizations() == 1 {
            // deterministic fields are fixed points
            let mut out = field.clone();
            out.set_eps(eps);
            return Ok(out);
        }
        if field.realizations() != self.sites {
            return Err(Error::FieldMismatch(format!(
                "field has {} realizations, the torus {}",
                field.realizations(),
                self.sites
            )));
        }
        let m = field.components();
        let src = field.values();
        let mut out = field.clone();
        for (r, dst) in out.values_mut().iter_mut().enumerate() {
            for (p, &class) in classes.iter().enumerate() {
                let from = tables[class][r];
                dst[p * m..(p + 1) * m].copy_from_slice(&src[from][p * m..(p + 1) * m]);
            }
        }
        out.set_eps(eps);
        Ok(out)
    }

    /// `T_eps u`.
    pub fn unfold<F: Sampled>(&self, u: &F) -> Result<F> {
        self.permute(u, &self.forward, None)
    }

    /// `T_eps^* v`, which is also `T_eps^{-1} v`.
    pub fn fold_adjoint<F: Sampled>(&self, v: &F) -> Result<F> {
        self.permute(v, &self.backward, Some(self.eps))
    }
}

/// Invariant projection: average over each shift orbit of the enumerated realizations.
pub fn project_inv<F: Sampled>(env: &Environment, ens: &Ensemble, u: &F) -> Result<F> {
    if u.realizations() == 1 {
        return Ok(u.clone());
    }
    let sites = env.site_count().filter(|&s| ens.exact && ens.len() == s && u.realizations() == s);
    let Some(sites) = sites else {
        return Err(Error::Unsupported("invariant projection needs the exact torus enumeration".into()));
    };
    // breadth-first search over the generators e_j
    let d = env.dim();
    let mut orbit = vec![usize::MAX; sites];
    let mut orbits = 0;
    for start in 0..sites {
        if orbit[start] != usize::MAX {
            continue;
        }
        orbit[start] = orbits;
        let mut queue = vec![start];
        while let Some(r) = queue.pop() {
            let omega = Realization { offset: env.site_cell(r), stream: 0 };
            for j in 0..d {
                for sign in [1i64, -1] {
                    let mut e = [0i64; MAX_DIM];
                    e[j] = sign;
                    let next = env.site_index(&env.shift(&omega, &e).offset);
                    if orbit[next] == usize::MAX {
                        orbit[next] = orbits;
                        queue.push(next);
                    }
                }
            }
        }
        orbits += 1;
    }
    let w = u.weights();
    let n = u.values()[0].len();
    let mut out = u.clone();
    for o in 0..orbits {
        let members: Vec<usize> = (0..sites).filter(|&r| orbit[r] == o).collect();
        let mass: f64 = members.iter().map(|&r| w[r]).sum();
        for i in 0..n {
            let mut s = NeumaierSum::default();
            for &r in &members {
                s.add(w[r] * u.values()[r][i]);
            }
            let avg = s.value() / mass;
            for &r in &members {
                out.values_mut()[r][i] = avg;
            }
        }
    }
    Ok(out)
}

/// Residuals of the unfolding and invariant-projection identities on one random field.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdentityResiduals {
    /// `| ||T u||_p - ||u||_p |`, `p in {2, 4}`.
    pub isometry: f64,
    /// `|<T u, v> - <u, T^* v>|`.
    pub duality: f64,
    /// `|T^* T u - u|` and `|T T^* u - u|`.
    pub inverse: f64,
    /// `|<int V(tau_{x/eps} omega, g)> - <int V(omega, T g)>|` for several integrands.
    pub transformation: f64,
    /// `|P P u - P u|`.
    pub idempotence: f64,
    /// `|P T u - P u|` and `|T P u - P u|`.
    pub commutation: f64,
    /// `max(0, ||P u||_p - ||u||_p)`.
    pub contraction: f64,
    /// `|P u - <u>|`.
    pub ergodic: f64,
}

impl IdentityResiduals {
    /// Names of the invariant-projection identities in [`IdentityResiduals::entries`].
    pub const PROJECTION: [&'static str; 4] = ["idempotence", "commutation", "contraction", "ergodic"];

    pub fn unfolding(&self) -> f64 {
        self.isometry.max(self.duality).max(self.inverse).max(self.transformation)
    }

    pub fn projection(&self) -> f64 {
        self.idempotence.max(self.commutation).max(self.contraction).max(self.ergodic)
    }

    /// `(name, residual)` in a fixed order.
    pub fn entries(&self) -> [(&'static str, f64); 8] {
        [
            ("isometry", self.isometry),
            ("duality", self.duality),
            ("inverse", self.inverse),
            ("transformation", self.transformation),
            ("idempotence", self.idempotence),
            ("commutation", self.commutation),
            ("contraction", self.contraction),
            ("ergodic", self.ergodic),
        ]
    }

    /// Entrywise maximum.
    pub fn worst(all: &[IdentityResiduals]) -> IdentityResiduals {
        all.iter().fold(IdentityResiduals::default(), |a, b| IdentityResiduals {
            isometry: a.isometry.max(b.isometry),
            duality: a.duality.max(b.duality),
            inverse: a.inverse.max(b.inverse),
            transformation: a.transformation.max(b.transformation),
            idempotence: a.idempotence.max(b.idempotence),
            commutation: a.commutation.max(b.commutation),
            contraction: a.contraction.max(b.contraction),
            ergodic: a.ergodic.max(b.ergodic),
        })
    }
}

/// Runs every identity on `trials` random fields; field `i` uses the integrand `i mod 3` for the transformation formula.
pub fn identity_residuals(env: &Environment, ens: &Ensemble, domain: &Domain, eps: f64, trials: usize, seed: u64) -> Result<Vec<IdentityResiduals>> {
    use crate::integrand::Integrand;
    use rand::{Rng, SeedableRng};

    let plan = UnfoldPlan::new(env, ens, domain, eps)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let d = domain.dim();
    let zs = lattice_points(&CellField::zeros(domain, 1, &[1.0]), eps, 1)?;
    let integrands = [Integrand::Quadratic, Integrand::PowerLaw { p: 3.0 }, Integrand::Elastic];
    let mut out = Vec::with_capacity(trials);
    let max_diff = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f64::max)
    };
    for trial in 0..trials {
        let mut res = IdentityResiduals::default();
        let v = &integrands[trial % integrands.len()];
        let m = v.components(d);
        let mut random = |m: usize| {
            let mut f = RandomField::zeros(domain, m, &ens.weights);
            f.values.iter_mut().for_each(|vals| vals.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0)));
            f
        };
        let u = random(m);
        let w = random(m);
        let tu = plan.unfold(&u)?;
        for p in [2.0, 4.0] {
            res.isometry = res.isometry.max((tu.norm_p(p) - u.norm_p(p)).abs());
        }
        res.duality = res.duality.max((tu.inner(&w)? - u.inner(&plan.fold_adjoint(&w)?)?).abs());
        res.inverse = res.inverse.max(max_diff(&plan.fold_adjoint(&tu)?.values, &u.values));
        res.inverse = res.inverse.max(max_diff(&plan.unfold(&plan.fold_adjoint(&u)?)?.values, &u.values));

        let g = crate::grid::gradient(&u);
        let tg = plan.unfold(&g)?;
        let n = m * d;
        let (mut lhs, mut rhs) = (NeumaierSum::default(), NeumaierSum::default());
        for (r, (omega, wt)) in ens.iter().enumerate() {
            let here = env.eval_env(omega, &[0; MAX_DIM]);
            for c in 0..domain.cell_count() {
                let osc = env.eval_env(omega, &zs[c]);
                lhs.add(wt * domain.cell_volume() * v.value(osc, &g.values[r][c * n..(c + 1) * n], d));
                rhs.add(wt * domain.cell_volume() * v.value(here, &tg.values[r][c * n..(c + 1) * n], d));
            }
        }
        res.transformation = res.transformation.max((lhs.value() - rhs.value()).abs());

        let p = project_inv(env, ens, &g)?;
        res.idempotence = res.idempotence.max(max_diff(&project_inv(env, ens, &p)?.values, &p.values));
        res.commutation = res.commutation.max(max_diff(&project_inv(env, ens, &tg)?.values, &p.values));
        res.commutation = res.commutation.max(max_diff(&plan.unfold(&p)?.values, &p.values));
        for q in [1.0, 2.0, 4.0] {
            res.contraction = res.contraction.max(p.norm_p(q) - g.norm_p(q));
        }
        for i in 0..g.values[0].len() {
            let mut mean = NeumaierSum::default();
            for (vals, wt) in g.values.iter().zip(&ens.weights) {
                mean.add(wt * vals[i]);
            }
            for vals in &p.values {
                res.ergodic = res.ergodic.max((vals[i] - mean.value()).abs());
            }
        }
        out.push(res);
    }
    Ok(out)
}

/// Oscillating test function `phase indicator(tau_{x/eps} omega) * x^alpha` on one component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TestFunction {
    pub phase: usize,
    pub exponents: [u32; MAX_DIM],
    pub component: usize,
}

impl TestFunction {
    fn monomial(&self, x: &[f64; MAX_DIM]) -> f64 {
        x.iter().zip(&self.exponents).map(|(xi, &e)| xi.powi(e as i32)).product()
    }
}

/// Phase indicators times tensor monomials of degree at most 2 per axis, for every component.
pub fn default_battery(env: &Environment, components: usize) -> Vec<TestFunction> {
    let d = env.dim();
    let mut out = Vec::new();
    let monomials = 3usize.pow(d as u32);
    for phase in 0..env.phases().len() {
        for mono in 0..monomials {
            let mut exponents = [0u32; MAX_DIM];
            let mut idx = mono;
            for e in exponents.iter_mut().take(d) {
                *e = (idx % 3) as u32;
                idx /= 3;
            }
            for component in 0..components {
                out.push(TestFunction { phase, exponents, component });
            }
        }
    }
    out
}

/// `max_i |<int u_eps . T_eps^*(phi_i eta_i)> - <int u . phi_i eta_i>|` over the battery.
///
/// Only the adjoint pairing is used, so Monte Carlo ensembles are allowed. A
/// single-realization `u` is treated as deterministic.
pub fn two_scale_residual<F: Sampled, G: Sampled>(
    env: &Environment,
    ens: &Ensemble,
    eps: f64,
    u_eps: &F,
    u: &G,
    battery: &[TestFunction],
) -> Result<f64> {
    if battery.is_empty() {
        return Err(Error::Empty("empty test battery".into()));
    }
    if u_eps.domain() != u.domain() || u_eps.components() != u.components() {
        return Err(Error::FieldMismatch("two-scale pairing needs matching grids and components".into()));
    }
    if u_eps.realizations() != ens.len() || (u.realizations() != 1 && u.realizations() != ens.len()) {
        return Err(Error::FieldMismatch("fields do not match the ensemble".into()));
    }
    if let Some(bad) = battery.iter().find(|t| t.component >= u.components() || t.phase >= env.phases().len()) {
        return Err(Error::FieldMismatch(format!("test function {bad:?} out of range")));
    }
    let m = u.components();
    let zs = lattice_points(u_eps, eps, 1)?;
    let pairing = |values: &[Vec<f64>], coords: &dyn Fn(usize) -> [f64; MAX_DIM], vols: &[f64], oscillating: bool| {
        let origin = [0i64; MAX_DIM];
        let mut sums = vec![NeumaierSum::default(); battery.len()];
        for (r, (omega, w)) in ens.iter().enumerate() {
            let vals = &values[if values.len() == 1 { 0 } else { r }];
            for (p, vol) in vols.iter().enumerate() {
                let ph = env.phase_at(omega, if oscillating { &zs[p] } else { &origin });
                let x = coords(p);
                for (t, s) in battery.iter().zip(sums.iter_mut()) {
                    if t.phase == ph {
                        s.add(w * vol * vals[p * m + t.component] * t.monomial(&x));
                    }
                }
            }
        }
        sums.iter().map(|s| s.value()).collect::<Vec<f64>>()
    };
    let lhs = pairing(u_eps.values(), &|p| u_eps.point_coord(p), &u_eps.point_volumes(), true);
    let rhs = pairing(u.values(), &|p| u.point_coord(p), &u.point_volumes(), false);
    Ok(lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Stationary extension sampled on the points of `template`:
/// value `f(tau_{floor(x/eps)} omega, c)`.
pub fn stationary_extension<F, S>(env: &Environment, ens: &Ensemble, template: &S, eps: f64, f: F) -> Result<S>
where
    F: Fn(&Realization, usize) -> f64,
    S: Sampled,
{
    let zs = lattice_points(template, eps, 1)?;
    let m = template.components();
    let mut out = template.clone();
    *out.values_mut() = ens
        .members
        .iter()
        .map(|omega| {
            let mut vals = vec![0.0; zs.len() * m];
            for (p, z) in zs.iter().enumerate() {
                let shifted = env.shift(omega, z);
                for c in 0..m {
                    vals[p * m + c] = f(&shifted, c);
                }
            }
            vals
        })
        .collect();
    out.set_eps(Some(eps));
    Ok(out)
}

fn check_potential(env: &Environment, g: &PotentialField) -> Result<usize> {
    let period = env.period().filter(|_| !matches!(env.medium(), Medium::IidLattice { .. }));
    let Some(period) = period else {
        return Err(Error::Unsupported("potential fields live on a shift torus".into()));
    };
    let k = g.refinement;
    if g.d != env.dim() || (0..env.dim()).any(|a| period[a] * k != g.period[a]) {
        return Err(Error::FieldMismatch("potential field does not match the environment torus".into()));
    }
    Ok(k)
}

/// Refined torus site of `omega` at the refined lattice point `local`.
fn refined_site(omega: &Realization, local: &Cell, k: usize) -> Cell {
    std::array::from_fn(|a| omega.offset[a] * k as i64 + local[a])
}

/// Two-scale limit `grad u(x) + eta(x) chi(tau_{x/eps} omega)` seen through unfolding:
/// on grid cell `x` with sub-cell position `s` the corrector is read at `k omega + s`.
pub fn limit_gradient(env: &Environment, ens: &Ensemble, grad_u: &CellField, chi: &PotentialField, eta: Option<&CellField>, eps: f64) -> Result<CellField> {
    let k = check_potential(env, chi)?;
    let dom = &grad_u.domain;
    let n = chi.components * chi.d;
    if grad_u.components != n || grad_u.realizations() != 1 {
        return Err(Error::FieldMismatch("limit_gradient needs a deterministic gradient matching chi".into()));
    }
    let coarse = lattice_points(grad_u, eps, 1)?;
    let fine = lattice_points(grad_u, eps, k)?;
    let mut chi_local = vec![0.0; n];
    let values = ens
        .members
        .iter()
        .map(|omega| {
            let mut vals = grad_u.values[0].clone();
            for c in 0..dom.cell_count() {
                let local: Cell = std::array::from_fn(|a| fine[c][a] - k as i64 * coarse[c][a]);
                chi.chi_at(&refined_site(omega, &local, k), &mut chi_local);
                let h = eta.map_or(1.0, |e| e.values[0][c]);
                for i in 0..n {
                    vals[c * n + i] += h * chi_local[i];
                }
            }
            vals
        })
        .collect();
    Ok(CellField { domain: dom.clone(), components: n, weights: ens.weights.clone(), values, eps: None })
}

/// Nonlinear recovery sequence `u_eps = u + eps eta Phi_eps`, where `Phi_eps` is the
/// multilinear interpolant of `phi(tau_j omega)` at the refined lattice points `j eps / k`.
pub fn recovery_nonlinear(env: &Environment, ens: &Ensemble, u: &RandomField, g: &PotentialField, eta: &RandomField, eps: f64) -> Result<RandomField> {
    let k = check_potential(env, g)?;
    let dom = &u.domain;
    let m = u.components;
    if u.realizations() != 1 || g.components != m {
        return Err(Error::FieldMismatch("recovery needs a deterministic u with as many components as phi".into()));
    }
    if eta.realizations() != 1 || eta.components != 1 || &eta.domain != dom {
        return Err(Error::FieldMismatch("cutoff must be a deterministic scalar field on the same grid".into()));
    }
    if (0..dom.node_count()).any(|node| dom.is_boundary_node(node) && eta.values[0][node] != 0.0) {
        return Err(Error::InvalidDomain("cutoff does not vanish on the boundary".into()));
    }
    let d = dom.dim();
    let coarse = dom.coefficient_cells(eps)?;
    let mut per = [1usize; MAX_DIM];
    for axis in 0..d {
        let cells = coarse[axis] * k;
        if dom.cells_per_axis()[axis] % cells != 0 {
            return Err(Error::Incommensurate { eps, reason: format!("{cells} sub-cells do not divide the grid") });
        }
        per[axis] = dom.cells_per_axis()[axis] / cells;
    }
    let values = ens
        .members
        .iter()
        .map(|omega| {
            let mut vals = u.values[0].clone();
            for node in 0..dom.node_count() {
                let h = eta.values[0][node];
                if h == 0.0 {
                    continue;
                }
                let mi = dom.node_multi(node);
                for b in 0..(1usize << d) {
                    let mut weight = 1.0;
                    let mut local = [0i64; MAX_DIM];
                    for axis in 0..d {
                        let t = (mi[axis] % per[axis]) as f64 / per[axis] as f64;
                        let up = (b >> axis) & 1 == 1;
                        weight *= if up { t } else { 1.0 - t };
                        local[axis] = (mi[axis] / per[axis]) as i64 + up as i64;
                    }
                    if weight == 0.0 {
                        continue;
                    }
                    let phi = g.phi_at(&refined_site(omega, &local, k));
                    for c in 0..m {
                        vals[node * m + c] += eps * h * weight * phi[c];
                    }
                }
            }
            vals
        })
        .collect();
    Ok(RandomField { domain: dom.clone(), components: m, weights: ens.weights.clone(), values, eps: Some(eps), dirichlet: u.dirichlet })
}

/// Linear recovery sequence: per realization the Dirichlet solution of
/// `int grad v . grad psi = int T_eps^{-1} chi . grad psi`.
pub fn recovery_linear(env: &Environment, ens: &Ensemble, chi: &PotentialField, domain: &Domain, eps: f64, opts: CgOptions) -> Result<RandomField> {
    let k = check_potential(env, chi)?;
    let m = chi.components;
    let d = domain.dim();
    let n = m * d;
    let probe = CellField::zeros(domain, 1, &[1.0]);
    let fine = lattice_points(&probe, eps, k)?;
    let dofs = Dofs::dirichlet(domain, m);
    let stiffness = assemble_stiffness(domain, &dofs, |_, t| {
        t.iter_mut().for_each(|v| *v = 0.0);
        for a in 0..n {
            t[a * n + a] = 1.0;
        }
    });
    let vol = domain.cell_volume();
    let solutions = par::try_map_indices(ens.len(), |r| {
        let omega = &ens.members[r];
        let mut rhs = vec![0.0; dofs.len()];
        let mut flux = vec![0.0; n];
        for c in 0..domain.cell_count() {
            chi.chi_at(&refined_site(omega, &fine[c], k), &mut flux);
            scatter_flux(domain, c, &flux, &dofs, vol, &mut rhs);
        }
        let mut x = vec![0.0; dofs.len()];
        solve_spd(&stiffness, &rhs, &mut x, None, opts).into_result()?;
        Ok(dofs.expand(&x))
    })?;
    Ok(RandomField { domain: domain.clone(), components: m, weights: ens.weights.clone(), values: solutions, eps: Some(eps), dirichlet: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Phase, SamplingPlan};
    use crate::grid::gradient;
    use crate::integrand::{Integrand, RadialTable};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn torus(d: usize, l: usize, seed: u64) -> Environment {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sites = l.pow(d as u32);
        let config = (0..sites).map(|_| rng.gen_range(0..2)).collect();
        let phases = vec![
            Phase::scalar(1.0),
            Phase::scalar(4.0).with_matrix(d, &if d == 1 { vec![vec![4.0]] } else { vec![vec![4.0, 0.5], vec![0.5, 2.0]] }),
        ];
        Environment::shift_torus(d, &vec![l; d], config, phases).unwrap()
    }

    fn exact(env: &Environment) -> Ensemble {
        let n = env.site_count().unwrap();
        env.enumerate_or_sample(&SamplingPlan::Exact { count: n }).unwrap()
    }

    fn random_cells(dom: &Domain, m: usize, ens: &Ensemble, rng: &mut ChaCha8Rng) -> CellField {
        let mut f = CellField::zeros(dom, m, &ens.weights);
        f.values.iter_mut().for_each(|v| v.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0)));
        f
    }

    fn random_nodes(dom: &Domain, m: usize, ens: &Ensemble, rng: &mut ChaCha8Rng) -> RandomField {
        let mut f = RandomField::zeros(dom, m, &ens.weights);
        f.values.iter_mut().for_each(|v| v.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0)));
        f
    }

    #[test]
    fn deterministic_fields_are_fixed_points() {
        let env = torus(2, 2, 1);
        let ens = exact(&env);
        let dom = Domain::unit(2, 4).unwrap();
        let plan = UnfoldPlan::new(&env, &ens, &dom, 0.5).unwrap();
        let eta = RandomField::deterministic(&dom, 1, |x, _| x[0] * x[1]).broadcast(&ens.weights);
        assert_eq!(plan.unfold(&eta).unwrap().values, eta.values);
    }

    #[test]
    fn unfolding_shifts_by_minus_z() {
        let env = Environment::shift_torus(2, &[2, 2], vec![0, 1, 1, 0], vec![Phase::scalar(1.0), Phase::scalar(4.0)]).unwrap();
        let ens = exact(&env);
        let dom = Domain::unit(2, 4).unwrap();
        let eps = 0.5;
        let plan = UnfoldPlan::new(&env, &ens, &dom, eps).unwrap();
        let phi = |r: &Realization| (r.offset[0] + 10 * r.offset[1]) as f64;
        let u = CellField::from_fn(&dom, 1, &ens.weights, |r, _, _| phi(&ens.members[r]));
        let t = plan.unfold(&u).unwrap();
        // cell with center (0.625, 0.125) has z = (1, 0)
        let cell = dom.cell_multi(2);
        assert_eq!(cell[..2], [2, 0]);
        for (r, omega) in ens.members.iter().enumerate() {
            let expected = phi(&env.shift(omega, &[-1, 0, 0]));
            assert_eq!(t.values[r][2], expected);
        }
    }

    /// `(T u)(omega, x) = u(tau_{-z(x)} omega, x)` evaluated by searching the enumeration.
    fn brute_unfold(env: &Environment, ens: &Ensemble, u: &CellField, eps: f64) -> CellField {
        let mut out = u.clone();
        for (r, omega) in ens.members.iter().enumerate() {
            for c in 0..u.domain.cell_count() {
                let x = u.domain.cell_center(c);
                let z: Cell = std::array::from_fn(|a| -((x[a] / eps).floor() as i64));
                let target = env.shift(omega, &z);
                let src = ens.members.iter().position(|m| *m == target).unwrap();
                out.values[r][c] = u.values[src][c];
            }
        }
        out
    }

    #[test]
    fn adjoint_duality_by_double_sum() {
        let env = torus(1, 2, 3);
        let ens = exact(&env);
        let dom = Domain::unit(1, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plan = UnfoldPlan::new(&env, &ens, &dom, 0.25).unwrap();
        for _ in 0..10 {
            let u = random_cells(&dom, 1, &ens, &mut rng);
            let v = random_cells(&dom, 1, &ens, &mut rng);
            let tu = brute_unfold(&env, &ens, &u, 0.25);
            assert_eq!(plan.unfold(&u).unwrap().values, tu.values);
            let mut lhs = 0.0;
            let mut rhs = 0.0;
            let tsv = plan.fold_adjoint(&v).unwrap();
            for r in 0..ens.len() {
                for c in 0..4 {
                    lhs += ens.weights[r] * 0.25 * tu.values[r][c] * v.values[r][c];
                    rhs += ens.weights[r] * 0.25 * u.values[r][c] * tsv.values[r][c];
                }
            }
            assert!((lhs - rhs).abs() < 1e-13);
        }
    }

    #[test]
    fn isometry_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in 1..=2 {
            for l in 2..=3 {
                let env = torus(d, l, 7 + l as u64);
                let ens = exact(&env);
                let n = if d == 1 { 12 } else { 6 };
                let dom = Domain::unit(d, n).unwrap();
                for eps in [1.0 / 3.0, 0.5] {
                    let plan = UnfoldPlan::new(&env, &ens, &dom, eps).unwrap();
                    for _ in 0..50 {
                        let u = random_nodes(&dom, 2, &ens, &mut rng);
                        let tu = plan.unfold(&u).unwrap();
                        for p in [2.0, 4.0] {
                            assert!((tu.norm_p(p) - u.norm_p(p)).abs() < 1e-13);
                        }
                        assert_eq!(plan.fold_adjoint(&tu).unwrap().values, u.values);
                        let g = gradient(&u);
                        assert_eq!(plan.fold_adjoint(&plan.unfold(&g).unwrap()).unwrap().values, g.values);
                    }
                }
            }
        }
    }

    #[test]
    fn transformation_formula_for_every_integrand() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let table = RadialTable::from_slopes(vec![0.0, 1.0, 2.0, 4.0], vec![0.0, 1.5, 3.5, 9.0], 0.0).unwrap();
        let integrands = [
            Integrand::Quadratic,
            Integrand::PowerLaw { p: 3.0 },
            Integrand::Elastic,
            Integrand::RegularizedDoubleWell { kappa: 1.0 },
            Integrand::Tabulated(table),
        ];
        for d in 1..=2 {
            let env = torus(d, 3, 21);
            let ens = exact(&env);
            let dom = Domain::unit(d, 6).unwrap();
            let eps = 1.0 / 3.0;
            let plan = UnfoldPlan::new(&env, &ens, &dom, eps).unwrap();
            let zs = lattice_points(&CellField::zeros(&dom, 1, &[1.0]), eps, 1).unwrap();
            for v in &integrands {
                let m = v.components(d);
                let u = random_nodes(&dom, m, &ens, &mut rng);
                let g = gradient(&u);
                let tg = plan.unfold(&g).unwrap();
                let n = m * d;
                let (mut lhs, mut rhs) = (NeumaierSum::default(), NeumaierSum::default());
                for (r, (omega, w)) in ens.iter().enumerate() {
                    for c in 0..dom.cell_count() {
                        let osc = env.eval_env(omega, &zs[c]);
                        let here = env.eval_env(omega, &[0; MAX_DIM]);
                        lhs.add(w * dom.cell_volume() * v.value(osc, &g.values[r][c * n..(c + 1) * n], d));
                        rhs.add(w * dom.cell_volume() * v.value(here, &tg.values[r][c * n..(c + 1) * n], d));
                    }
                }
                assert!((lhs.value() - rhs.value()).abs() < 1e-12, "{v:?}");
            }
        }
    }

    #[test]
    fn identity_residuals_are_rounding_level() {
        for d in 1..=2 {
            let env = torus(d, 3, 5);
            let ens = exact(&env);
            let dom = Domain::unit(d, 6).unwrap();
            let r = IdentityResiduals::worst(&identity_residuals(&env, &ens, &dom, 1.0 / 3.0, 6, 1).unwrap());
            assert!(r.unfolding() < 1e-12 && r.projection() < 1e-13, "{r:?}");
        }
    }

    #[test]
    fn invariant_projection_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let env = torus(2, 3, 2);
        let ens = exact(&env);
        let dom = Domain::unit(2, 6).unwrap();
        let plan = UnfoldPlan::new(&env, &ens, &dom, 1.0 / 3.0).unwrap();
        for _ in 0..10 {
            let u = random_cells(&dom, 1, &ens, &mut rng);
            let p = project_inv(&env, &ens, &u).unwrap();
            let pp = project_inv(&env, &ens, &p).unwrap();
            assert!(p.max_abs_diff(&pp).unwrap() < 1e-13);
            for q in [1.0, 2.0, 4.0] {
                assert!(p.norm_p(q) <= u.norm_p(q) + 1e-13);
            }
            let pt = project_inv(&env, &ens, &plan.unfold(&u).unwrap()).unwrap();
            assert!(pt.max_abs_diff(&p).unwrap() < 1e-13);
            let tp = plan.unfold(&p).unwrap();
            assert!(tp.max_abs_diff(&p).unwrap() < 1e-13);
            for c in 0..dom.cell_count() {
                let mean: f64 = (0..ens.len()).map(|r| ens.weights[r] * u.values[r][c]).sum();
                assert!((p.values[0][c] - mean).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn two_scale_residual_vanishes_on_exact_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let env = torus(2, 2, 4);
        let ens = exact(&env);
        let dom = Domain::unit(2, 4).unwrap();
        let eps = 0.5;
        let plan = UnfoldPlan::new(&env, &ens, &dom, eps).unwrap();
        let battery = default_battery(&env, 1);
        let u = random_nodes(&dom, 1, &ens, &mut rng);
        let u_eps = plan.fold_adjoint(&u).unwrap();
        assert!(two_scale_residual(&env, &ens, eps, &u_eps, &u, &battery).unwrap() < 1e-13);
        // stationary oscillation against its profile
        let phi = |r: &Realization, _c: usize| (env.phase_at(r, &[0; MAX_DIM]) as f64 + 1.0) * (1.0 + r.offset[0] as f64);
        let osc = stationary_extension(&env, &ens, &RandomField::zeros(&dom, 1, &ens.weights), eps, phi).unwrap();
        let profile = RandomField::from_fn(&dom, 1, &ens.weights, |r, _, c| phi(&ens.members[r], c));
        assert!(two_scale_residual(&env, &ens, eps, &osc, &profile, &battery).unwrap() < 1e-13);
        assert!(two_scale_residual(&env, &ens, eps, &osc, &profile, &[]).is_err());
        // products of exactly recovered pairs
        let v = random_nodes(&dom, 1, &ens, &mut rng);
        let v_eps = plan.fold_adjoint(&v).unwrap();
        assert!((u_eps.inner(&v_eps).unwrap() - u.inner(&v).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_unfolding_is_rejected() {
        let env = Environment::iid(1, vec![0.5, 0.5], 3, vec![Phase::scalar(1.0), Phase::scalar(2.0)]).unwrap();
        let ens = env.enumerate_or_sample(&SamplingPlan::MonteCarlo { count: 8, seed: 1 }).unwrap();
        let dom = Domain::unit(1, 8).unwrap();
        assert!(matches!(UnfoldPlan::new(&env, &ens, &dom, 0.25), Err(Error::Unsupported(_))));
    }

    fn bump(dom: &Domain) -> RandomField {
        RandomField::deterministic(dom, 1, |x, _| (std::f64::consts::PI * x[0]).sin()).with_dirichlet()
    }

    #[test]
    fn nonlinear_recovery_matches_construction() {
        let env = Environment::shift_torus(1, &[2], vec![0, 1], vec![Phase::scalar(1.0), Phase::scalar(4.0)]).unwrap();
        let ens = exact(&env);
        let c = 0.3;
        let g = PotentialField::new(1, 1, [2, 1, 1], 1, vec![c, -c]).unwrap();
        let mut last = None;
        for m in [4usize, 8, 16] {
            let eps = 1.0 / m as f64;
            let dom = Domain::unit(1, 64).unwrap();
            let u = RandomField::deterministic(&dom, 1, |x, _| x[0] * (1.0 - x[0])).with_dirichlet();
            let eta = bump(&dom);
            let zero = PotentialField::zero(1, 1, [2, 1, 1], 1);
            let same = recovery_nonlinear(&env, &ens, &u, &zero, &eta, eps).unwrap();
            assert!(same.values.iter().all(|v| *v == u.values[0]));
            let u_eps = recovery_nonlinear(&env, &ens, &u, &g, &eta, eps).unwrap();
            let diff = u_eps.combine(1.0, &u.broadcast(&ens.weights), -1.0).unwrap().norm_p(2.0);
            assert!(diff / eps <= c + 1e-12);
            if let Some(prev) = last {
                assert!(diff < prev);
            }
            last = Some(diff);
            let plan = UnfoldPlan::new(&env, &ens, &dom, eps).unwrap();
            let tg = plan.unfold(&gradient(&u_eps)).unwrap();
            let target = limit_gradient(&env, &ens, &gradient(&u), &g, Some(&eta.cell_average()), eps).unwrap();
            let err = tg.combine(1.0, &target, -1.0).unwrap().norm_p(2.0);
            let grad_eta = gradient(&eta).norm_p(2.0);
            // the interpolant of phi(+c, -c) is bounded by c, plus the cell-average mismatch of eta
            assert!(err <= 2.0 * eps * c * grad_eta + 1e-12, "eps={eps}: {err}");
        }
        let dom = Domain::unit(1, 16).unwrap();
        let u = RandomField::deterministic(&dom, 1, |_, _| 0.0);
        let flat = RandomField::deterministic(&dom, 1, |_, _| 1.0);
        assert!(matches!(recovery_nonlinear(&env, &ens, &u, &g, &flat, 0.25), Err(Error::InvalidDomain(_))));
    }

    #[test]
    fn linear_recovery_converges() {
        // period 3 so that the oscillation does not close up at x = 1
        let env = Environment::shift_torus(1, &[3], vec![0, 1, 1], vec![Phase::scalar(1.0), Phase::scalar(4.0)]).unwrap();
        let ens = exact(&env);
        let chi = PotentialField::new(1, 1, [3, 1, 1], 1, vec![0.5, -0.2, -0.3]).unwrap();
        let dom = Domain::unit(1, 64).unwrap();
        let opts = CgOptions::default();
        let zero = recovery_linear(&env, &ens, &chi.scale(0.0), &dom, 0.25, opts).unwrap();
        assert!(zero.values.iter().flatten().all(|v| *v == 0.0));
        let one = recovery_linear(&env, &ens, &chi, &dom, 0.25, opts).unwrap();
        let three = recovery_linear(&env, &ens, &chi.scale(3.0), &dom, 0.25, opts).unwrap();
        assert!(three.combine(1.0, &one, -3.0).unwrap().norm_p(2.0) < 1e-10);
        let mut prev = f64::INFINITY;
        for m in [4usize, 8, 16] {
            let eps = 1.0 / m as f64;
            let v = recovery_linear(&env, &ens, &chi, &dom, eps, opts).unwrap();
            let plan = UnfoldPlan::new(&env, &ens, &dom, eps).unwrap();
            let tg = plan.unfold(&gradient(&v)).unwrap();
            let zero_grad = CellField::zeros(&dom, 1, &[1.0]);
            let target = limit_gradient(&env, &ens, &zero_grad, &chi, None, eps).unwrap();
            let err = tg.combine(1.0, &target, -1.0).unwrap().norm_p(2.0);
            assert!(err < prev, "eps={eps}: {err} vs {prev}");
            prev = err;
        }
    }
}
