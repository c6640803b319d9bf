//! Minimizers of the scale-`eps` energy and of its homogenized limit.
//!
//! `E_eps(omega, u) = int V(tau_{x/eps} omega, grad u) - int load . u` with
//! homogeneous Dirichlet data. The mean functional has no coupling between
//! realizations, so it is minimized one realization at a time.

use web_time::Instant;

use serde::{Deserialize, Serialize};

use crate::cell::{self, PotentialField};
use crate::energy::{cell_phases, FieldEnergy};
use crate::env::{Ensemble, Environment, Medium, Phase, Realization, SamplingPlan};
use crate::error::{Error, Result};
use crate::fem::Dofs;
use crate::grid::{gradient, CellField, Domain, RandomField};
use crate::integrand::{Integrand, RadialTable};
use crate::linalg::NeumaierSum;
use crate::newton::{minimize, NewtonOptions};
use crate::study::{StudyResult, Table};
use crate::unfold::{default_battery, limit_gradient, recovery_nonlinear, two_scale_residual, UnfoldPlan};
use crate::{par, rng};

/// Integrand plus a constant load per field component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergySpec {
    pub integrand: Integrand,
    /// Empty means no load.
    #[serde(default)]
    pub load: Vec<f64>,
}

impl EnergySpec {
    pub fn new(integrand: Integrand) -> Self {
        EnergySpec { integrand, load: Vec::new() }
    }

    pub fn with_load(mut self, load: Vec<f64>) -> Self {
        self.load = load;
        self
    }

    pub fn components(&self, d: usize) -> usize {
        self.integrand.components(d)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        self.integrand.validate()?;
        if matches!(self.integrand, Integrand::Tabulated(_) | Integrand::QuadraticForm { .. }) {
            return Err(Error::Unsupported("homogenized integrands cannot be used at scale eps".into()));
        }
        let m = self.components(d);
        if !self.load.is_empty() && self.load.len() != m {
            return Err(Error::FieldMismatch(format!("load needs {m} components, got {}", self.load.len())));
        }
        Ok(())
    }

    pub fn load_vector(&self, d: usize) -> Vec<f64> {
        if self.load.is_empty() {
            vec![0.0; self.components(d)]
        } else {
            self.load.clone()
        }
    }
}

/// Newton settings used by the static solvers.
pub fn default_options() -> NewtonOptions {
    NewtonOptions { tol: 1e-11, ..NewtonOptions::default() }
}

/// Per-realization minimizers at one scale.
#[derive(Clone, Debug)]
pub struct Minimizers {
    pub field: RandomField,
    pub values: Vec<f64>,
    /// Weighted mean of `values`.
    pub mean: f64,
    pub iterations: Vec<usize>,
    pub gradient_norms: Vec<f64>,
}

fn check_domain(env: &Environment, spec: &EnergySpec, domain: &Domain) -> Result<usize> {
    if env.dim() != domain.dim() {
        return Err(Error::FieldMismatch("environment and domain dimensions differ".into()));
    }
    spec.validate(domain.dim())?;
    Ok(spec.components(domain.dim()))
}

/// Minimizes `E_eps(omega, .)` for every member of `ens`.
pub fn minimize_eps(env: &Environment, ens: &Ensemble, spec: &EnergySpec, domain: &Domain, eps: f64, opts: &NewtonOptions) -> Result<Minimizers> {
    minimize_eps_from(env, ens, spec, domain, eps, opts, None)
}

/// As [`minimize_eps`], starting from `start` (deterministic or one field per member).
pub fn minimize_eps_from(
    env: &Environment,
    ens: &Ensemble,
    spec: &EnergySpec,
    domain: &Domain,
    eps: f64,
    opts: &NewtonOptions,
    start: Option<&RandomField>,
) -> Result<Minimizers> {
    let m = check_domain(env, spec, domain)?;
    if ens.is_empty() {
        return Err(Error::Empty("empty ensemble".into()));
    }
    if let Some(s) = start {
        if s.domain != *domain || s.components != m || (s.realizations() != 1 && s.realizations() != ens.len()) {
            return Err(Error::FieldMismatch("initial guess does not match the problem".into()));
        }
    }
    domain.coefficient_cells(eps)?;
    let dofs = Dofs::dirichlet(domain, m);
    let load = spec.load_vector(domain.dim());
    let solved = par::try_map_indices(ens.len(), |r| {
        let phases = cell_phases(env, &ens.members[r], domain, Some(eps))?;
        let mut energy = FieldEnergy::new(domain, &dofs, env.phases(), phases, &spec.integrand);
        energy.load = load.clone();
        let mut x = match start {
            Some(s) => dofs.restrict(&s.values[if s.realizations() == 1 { 0 } else { r }]),
            None => vec![0.0; dofs.len()],
        };
        let rep = minimize(&energy, &mut x, opts)?;
        Ok((dofs.expand(&x), rep.value, rep.iterations, rep.gradient_norm))
    })?;
    let mut field = RandomField::zeros(domain, m, &ens.weights);
    field.eps = Some(eps);
    field.dirichlet = true;
    let mut values = Vec::with_capacity(ens.len());
    let mut iterations = Vec::with_capacity(ens.len());
    let mut gradient_norms = Vec::with_capacity(ens.len());
    for (r, (u, v, it, g)) in solved.into_iter().enumerate() {
        field.values[r] = u;
        values.push(v);
        iterations.push(it);
        gradient_norms.push(g);
    }
    let mean = weighted_mean(&values, &ens.weights);
    Ok(Minimizers { field, values, mean, iterations, gradient_norms })
}

fn weighted_mean(values: &[f64], weights: &[f64]) -> f64 {
    let mut s = NeumaierSum::default();
    values.iter().zip(weights).for_each(|(v, w)| s.add(v * w));
    s.value()
}

/// `E_eps(omega, u)` per member; a deterministic `u` is used for every member.
pub fn energy_eps(env: &Environment, ens: &Ensemble, spec: &EnergySpec, domain: &Domain, eps: f64, u: &RandomField) -> Result<Vec<f64>> {
    let m = check_domain(env, spec, domain)?;
    if u.domain != *domain || u.components != m || (u.realizations() != 1 && u.realizations() != ens.len()) {
        return Err(Error::FieldMismatch("field does not match the problem".into()));
    }
    let dofs = Dofs::free(domain, m);
    let load = spec.load_vector(domain.dim());
    par::try_map_indices(ens.len(), |r| {
        let phases = cell_phases(env, &ens.members[r], domain, Some(eps))?;
        let mut energy = FieldEnergy::new(domain, &dofs, env.phases(), phases, &spec.integrand);
        energy.load = load.clone();
        Ok(energy.value_full(&u.values[if u.realizations() == 1 { 0 } else { r }]))
    })
}

/// `<int V(omega, T_eps grad u)> - <int load . u>`, the mean energy computed on the unfolded gradient.
pub fn transformed_energy(env: &Environment, ens: &Ensemble, spec: &EnergySpec, domain: &Domain, eps: f64, u: &RandomField) -> Result<f64> {
    let m = check_domain(env, spec, domain)?;
    let plan = UnfoldPlan::new(env, ens, domain, eps)?;
    let g = plan.unfold(&gradient(u))?;
    let d = domain.dim();
    let vol = domain.cell_volume();
    let nw = domain.node_weights();
    let load = spec.load_vector(d);
    let origin = [0i64; 3];
    let mut s = NeumaierSum::default();
    for (r, (omega, w)) in ens.iter().enumerate() {
        let ph = env.eval_env(omega, &origin);
        let gv = &g.values[if g.realizations() == 1 { 0 } else { r }];
        for c in 0..domain.cell_count() {
            s.add(w * vol * spec.integrand.value(ph, &gv[c * m * d..(c + 1) * m * d], d));
        }
        let uv = &u.values[if u.realizations() == 1 { 0 } else { r }];
        for (node, vn) in nw.iter().enumerate() {
            for i in 0..m {
                s.add(-w * vn * load[i] * uv[node * m + i]);
            }
        }
    }
    Ok(s.value())
}

/// A deterministic homogenized problem.
#[derive(Clone, Debug, PartialEq)]
pub struct HomProblem {
    pub integrand: Integrand,
    pub phase: Phase,
    /// Correctors of the unit gradients `e_a`, when the problem is quadratic on a torus.
    pub correctors: Vec<PotentialField>,
    pub refinement: usize,
}

/// Settings for [`HomProblem::homogenize`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HomOptions {
    pub k: usize,
    pub tol: f64,
    /// Table radii for nonquadratic integrands, starting at 0.
    pub radii: Vec<f64>,
    pub rve_side: usize,
    pub rve_seeds: usize,
    pub rve_seed: u64,
}

impl Default for HomOptions {
    fn default() -> Self {
        HomOptions {
            k: cell::DEFAULT_REFINEMENT,
            tol: 1e-11,
            radii: (0..=60).map(|i| 0.05 * i as f64).collect(),
            rve_side: 8,
            rve_seeds: 8,
            rve_seed: 0x5EED,
        }
    }
}

impl HomProblem {
    /// `1/2 M xi . xi`.
    pub fn from_matrix(matrix: Vec<f64>) -> Result<Self> {
        let integrand = Integrand::QuadraticForm { matrix };
        integrand.validate()?;
        Ok(HomProblem { integrand, phase: Phase::scalar(1.0), correctors: Vec::new(), refinement: 1 })
    }

    /// Radial table `g(|xi|)`.
    pub fn from_table(table: RadialTable) -> Result<Self> {
        let integrand = Integrand::Tabulated(table);
        integrand.validate()?;
        Ok(HomProblem { integrand, phase: Phase::scalar(1.0), correctors: Vec::new(), refinement: 1 })
    }

    /// Effective integrand of `spec` in `env`. Quadratic problems get a matrix and
    /// correctors; convex ones a radial table measured along `e_1`. On an i.i.d.
    /// lattice the one-dimensional closed forms are used, and windowed averages for
    /// quadratic problems in higher dimension.
    pub fn homogenize(env: &Environment, spec: &EnergySpec, opts: &HomOptions) -> Result<Self> {
        let d = env.dim();
        spec.validate(d)?;
        let v = &spec.integrand;
        if let Medium::IidLattice { .. } = env.medium() {
            return Self::homogenize_iid(env, v, opts);
        }
        match v {
            Integrand::Quadratic => {
                let hom = cell::assemble_ahom(env, opts.k)?;
                Ok(HomProblem { correctors: hom.correctors, refinement: opts.k, ..Self::from_matrix(hom.matrix)? })
            }
            Integrand::Elastic => {
                let (matrix, correctors) = cell::effective_tensor(env, v, opts.k)?;
                Ok(HomProblem { correctors, refinement: opts.k, ..Self::from_matrix(matrix)? })
            }
            _ => Self::from_table(vhom_table(env, v, &opts.radii, opts.k, opts.tol)?),
        }
    }

    fn homogenize_iid(env: &Environment, v: &Integrand, opts: &HomOptions) -> Result<Self> {
        let d = env.dim();
        let probs = env.phase_probabilities();
        let terms = || probs.iter().zip(env.phases()).filter(|(p, _)| **p > 0.0);
        match v {
            Integrand::Quadratic if d == 1 => {
                let a = 1.0 / terms().map(|(p, ph)| p / ph.matrix[0][0]).sum::<f64>();
                Self::from_matrix(vec![a])
            }
            Integrand::PowerLaw { p } if d == 1 => {
                let q = 1.0 / (p - 1.0);
                let c = terms().map(|(w, ph)| w * ph.a.powf(-q)).sum::<f64>().powf(1.0 - p);
                Ok(HomProblem { integrand: v.clone(), phase: Phase::scalar(c), correctors: Vec::new(), refinement: 1 })
            }
            Integrand::Quadratic | Integrand::Elastic => {
                if opts.rve_seeds == 0 {
                    return Err(Error::Empty("no RVE seeds".into()));
                }
                let tensors = par::try_map_indices(opts.rve_seeds, |s| {
                    let w = env.window(&Realization::with_stream(rng::derive(opts.rve_seed, s as u64)), opts.rve_side)?;
                    Ok(cell::effective_tensor(&w, v, opts.k)?.0)
                })?;
                let n = tensors[0].len();
                let mean = (0..n).map(|i| tensors.iter().map(|t| t[i]).sum::<f64>() / tensors.len() as f64).collect();
                Self::from_matrix(mean)
            }
            _ => Err(Error::Unsupported("nonquadratic homogenization of an i.i.d. medium needs d = 1 and a power law".into())),
        }
    }

    pub fn components(&self, d: usize) -> usize {
        self.integrand.components(d)
    }
}

/// `V_hom(s e_1)` tabulated on `radii` from the envelope slopes `<dV(s e_1 + chi) . e_1>`.
pub fn vhom_table(env: &Environment, v: &Integrand, radii: &[f64], k: usize, tol: f64) -> Result<RadialTable> {
    let d = env.dim();
    let n = v.components(d) * d;
    let load = |s: f64| {
        let mut f = vec![0.0; n];
        f[0] = s;
        f
    };
    let value0 = cell::corrector_convex(env, v, &load(0.0), k, tol)?.value;
    let slopes = par::try_map_indices(radii.len(), |i| {
        let f = load(radii[i]);
        let sol = cell::corrector_convex(env, v, &f, k, tol)?;
        Ok(cell::mean_flux(env, v, &f, &sol.chi)?[0])
    })?;
    RadialTable::from_slopes(radii.to_vec(), slopes, value0)
}

/// Minimizer of the homogenized energy.
#[derive(Clone, Debug)]
pub struct HomSolution {
    /// Deterministic field.
    pub u: RandomField,
    pub value: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
}

/// Minimizes `int V_hom(grad u) - int load . u` with Dirichlet data.
pub fn minimize_hom(hom: &HomProblem, domain: &Domain, load: &[f64], opts: &NewtonOptions) -> Result<HomSolution> {
    hom.integrand.validate()?;
    let m = hom.components(domain.dim());
    if !load.is_empty() && load.len() != m {
        return Err(Error::FieldMismatch(format!("load needs {m} components, got {}", load.len())));
    }
    let dofs = Dofs::dirichlet(domain, m);
    let phases = [hom.phase.clone()];
    let mut energy = FieldEnergy::new(domain, &dofs, &phases, vec![0; domain.cell_count()], &hom.integrand);
    if !load.is_empty() {
        energy.load = load.to_vec();
    }
    let mut x = vec![0.0; dofs.len()];
    let rep = minimize(&energy, &mut x, opts)?;
    let mut u = RandomField::zeros(domain, m, &[1.0]);
    u.values[0] = dofs.expand(&x);
    u.dirichlet = true;
    Ok(HomSolution { u, value: rep.value, iterations: rep.iterations, gradient_norm: rep.gradient_norm })
}

/// Homogenized energy of a deterministic field.
pub fn energy_hom(hom: &HomProblem, u: &RandomField, load: &[f64]) -> Result<f64> {
    let m = hom.components(u.domain.dim());
    if u.components != m || u.realizations() != 1 {
        return Err(Error::FieldMismatch("homogenized energy needs a deterministic field".into()));
    }
    let dofs = Dofs::free(&u.domain, m);
    let phases = [hom.phase.clone()];
    let mut energy = FieldEnergy::new(&u.domain, &dofs, &phases, vec![0; u.domain.cell_count()], &hom.integrand);
    if !load.is_empty() {
        energy.load = load.to_vec();
    }
    Ok(energy.value_full(&u.values[0]))
}

/// Nodal gradient of a deterministic field: average of the adjacent cell gradients.
pub fn nodal_gradient(u: &RandomField) -> Vec<f64> {
    let dom = &u.domain;
    let n = u.components * dom.dim();
    let g = gradient(u);
    let mut out = vec![0.0; dom.node_count() * n];
    let mut count = vec![0usize; dom.node_count()];
    for c in 0..dom.cell_count() {
        for &node in &dom.cell_corners(c)[..dom.corners()] {
            count[node] += 1;
            for a in 0..n {
                out[node * n + a] += g.values[0][c * n + a];
            }
        }
    }
    for (node, k) in count.iter().enumerate() {
        out[node * n..(node + 1) * n].iter_mut().for_each(|v| *v /= *k as f64);
    }
    out
}

/// Cutoff `prod_a min(1, x_a / delta, (1 - x_a) / delta)` relative to the domain size.
pub fn cutoff(domain: &Domain, delta: f64) -> RandomField {
    let size = domain.size().to_vec();
    RandomField::deterministic(domain, 1, |x, _| {
        (0..size.len()).map(|a| (x[a] / delta).min((size[a] - x[a]) / delta).clamp(0.0, 1.0)).product()
    })
}

/// Recovery sequence `u + eps sum_a zeta_delta d_a u Phi_a(omega, x / eps)` built from
/// the unit-gradient correctors of a quadratic homogenized problem.
pub fn recovery_sequence(env: &Environment, ens: &Ensemble, hom: &HomProblem, u: &RandomField, eps: f64, delta: f64) -> Result<RandomField> {
    let dom = &u.domain;
    let m = u.components;
    let n = m * dom.dim();
    let mut out = u.broadcast(&ens.weights);
    out.eps = Some(eps);
    if matches!(env.medium(), Medium::Deterministic) {
        return Ok(out);
    }
    if hom.correctors.len() != n {
        return Err(Error::Unsupported("recovery needs the unit-gradient correctors of a torus".into()));
    }
    let grad = nodal_gradient(u);
    let zeta = cutoff(dom, delta);
    let zero = RandomField::zeros(dom, m, &[1.0]);
    for (a, chi) in hom.correctors.iter().enumerate() {
        let mut eta = zeta.clone();
        for node in 0..dom.node_count() {
            eta.values[0][node] *= grad[node * n + a];
        }
        let part = recovery_nonlinear(env, ens, &zero, chi, &eta, eps)?;
        out = out.combine(1.0, &part, 1.0)?;
    }
    Ok(out)
}

/// Two-scale limit `grad u + sum_a d_a u chi_a` of the gradients at scale `eps`.
pub fn limit_of_gradients(env: &Environment, ens: &Ensemble, hom: &HomProblem, u: &RandomField, eps: f64) -> Result<CellField> {
    let g = gradient(u);
    let n = g.components;
    if matches!(env.medium(), Medium::Deterministic) {
        return Ok(g);
    }
    if hom.correctors.len() != n {
        return Err(Error::Unsupported("the two-scale limit needs the unit-gradient correctors of a torus".into()));
    }
    let mut out: Option<CellField> = None;
    for (a, chi) in hom.correctors.iter().enumerate() {
        let eta = CellField { values: vec![g.values[0].chunks(n).map(|c| c[a]).collect()], components: 1, ..g.clone() };
        let full = limit_gradient(env, ens, &g, chi, Some(&eta), eps)?;
        let corr = full.combine(1.0, &g.broadcast(&ens.weights), -1.0)?;
        out = Some(match out {
            None => corr,
            Some(acc) => acc.combine(1.0, &corr, 1.0)?,
        });
    }
    out.expect("at least one corrector").combine(1.0, &g.broadcast(&ens.weights), 1.0)
}

/// The realizations used by the studies: the full orbit of a torus, a single
/// point for a deterministic medium, `samples` draws of an i.i.d. lattice.
pub fn study_ensemble(env: &Environment, samples: usize, seed: u64) -> Result<Ensemble> {
    match env.medium() {
        Medium::IidLattice { .. } => env.enumerate_or_sample(&SamplingPlan::MonteCarlo { count: samples, seed }),
        _ => env.enumerate_or_sample(&SamplingPlan::Exact { count: env.site_count().unwrap_or(1) }),
    }
}

/// Inputs of a static sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub spec: EnergySpec,
    /// Grid cells per axis.
    pub n: usize,
    /// Halving sweep, coarsest first.
    pub eps: Vec<f64>,
    #[serde(default)]
    pub hom: HomOptions,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Monte Carlo draws for i.i.d. media.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_tol() -> f64 {
    1e-11
}

fn default_samples() -> usize {
    32
}

fn check_sweep(n: usize, eps: &[f64], d: usize) -> Result<Domain> {
    if eps.is_empty() {
        return Err(Error::Empty("empty eps sweep".into()));
    }
    let domain = Domain::unit(d, n)?;
    for &e in eps {
        domain.coefficient_cells(e)?;
    }
    Ok(domain)
}

/// Gap sequence decreases, allowing `slack` on the first ratio and an absolute floor.
pub fn decreasing(values: &[f64], slack: f64, floor: f64) -> bool {
    values.windows(2).enumerate().all(|(i, w)| {
        let allow = if i == 0 { 1.0 + slack } else { 1.0 };
        w[1] <= w[0] * allow + floor
    })
}

/// Static sweep: energy gap, minimizer errors, two-scale residual and recovery energy per `eps`.
pub fn convergence_study(env: &Environment, cfg: &ConvergenceConfig) -> Result<StudyResult> {
    let total = Instant::now();
    let d = env.dim();
    let domain = check_sweep(cfg.n, &cfg.eps, d)?;
    let spec = &cfg.spec;
    spec.validate(d)?;
    let opts = NewtonOptions { tol: cfg.tol, ..default_options() };
    let ens = study_ensemble(env, cfg.samples, cfg.seed)?;
    let load = spec.load_vector(d);
    let m = spec.components(d);

    let stage = Instant::now();
    let hom = HomProblem::homogenize(env, spec, &cfg.hom)?;
    let hom_sol = minimize_hom(&hom, &domain, &load, &opts)?;
    let u_hom = hom_sol.u.broadcast(&ens.weights);
    let hom_seconds = stage.elapsed().as_secs_f64();

    let linear = spec.integrand.is_quadratic() && (!hom.correctors.is_empty() || matches!(env.medium(), Medium::Deterministic));
    let on_torus = ens.exact;
    let battery = default_battery(env, m * d);
    let mut sweep = Table::new(
        "sweep",
        &[
            "eps",
            "energy_eps",
            "energy_hom",
            "gap",
            "l2_error",
            "mean_l2_error",
            "ts_residual",
            "recovery_energy",
            "recovery_gap",
            "transform_defect",
            "seconds",
        ],
    );
    let mut last: Option<Minimizers> = None;
    for &eps in &cfg.eps {
        let t = Instant::now();
        let sol = minimize_eps(env, &ens, spec, &domain, eps, &opts)?;
        let gap = (sol.mean - hom_sol.value).abs();
        let l2 = sol.field.combine(1.0, &u_hom, -1.0)?.norm_p(2.0);
        let mean_l2 = sol.field.mean().combine(1.0, &hom_sol.u, -1.0)?.norm_p(2.0);
        let (ts, rec, rec_gap) = if linear {
            let limit = limit_of_gradients(env, &ens, &hom, &hom_sol.u, eps)?;
            let ts = two_scale_residual(env, &ens, eps, &gradient(&sol.field), &limit, &battery)?;
            let r = recovery_sequence(env, &ens, &hom, &hom_sol.u, eps, eps)?;
            let e = weighted_mean(&energy_eps(env, &ens, spec, &domain, eps, &r)?, &ens.weights);
            (ts, e, e - hom_sol.value)
        } else {
            (f64::NAN, f64::NAN, f64::NAN)
        };
        let defect = if on_torus {
            (transformed_energy(env, &ens, spec, &domain, eps, &sol.field)? - sol.mean).abs()
        } else {
            f64::NAN
        };
        sweep.push(&[eps, sol.mean, hom_sol.value, gap, l2, mean_l2, ts, rec, rec_gap, defect, t.elapsed().as_secs_f64()]);
        last = Some(sol);
    }

    let mut result = StudyResult::new(
        "convergence",
        serde_json::json!({ "environment": env.to_spec(), "study": cfg }),
    );
    let scale = hom_sol.value.abs().max(1.0);
    let gaps = sweep.column("gap").unwrap().to_vec();
    result.assert(
        "energy gap decreases across eps-halvings",
        decreasing(&gaps, 0.05, 1e-9 * scale),
        format!("gaps {gaps:?}"),
    );
    if linear && on_torus {
        let energies = sweep.column("energy_eps").unwrap();
        let rec = sweep.column("recovery_energy").unwrap();
        let ok = energies.iter().zip(rec).all(|(e, r)| *e <= r + 1e-12 * scale);
        result.assert("min E_eps <= E_eps(recovery)", ok, format!("minima {energies:?}, recovery {rec:?}"));
    }
    if on_torus {
        let worst = sweep.column("transform_defect").unwrap().iter().cloned().fold(0.0, f64::max);
        result.assert("transformation identity", worst <= 1e-12 * scale, format!("largest defect {worst:e}"));
    }
    let last = last.expect("non-empty sweep");
    let eps = *cfg.eps.last().unwrap();
    let start = RandomField::from_fn(&domain, m, &[1.0], |_, x, c| {
        (0..d).map(|a| (std::f64::consts::PI * x[a]).sin()).product::<f64>() * (1.0 + c as f64)
    })
    .with_dirichlet();
    let other = minimize_eps_from(env, &ens, spec, &domain, eps, &opts, Some(&start))?;
    let diff = other.field.values.iter().zip(&last.field.values).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs())).fold(0.0, f64::max);
    result.assert("minimizer independent of the initial guess", diff <= 1e-8, format!("max nodal difference {diff:e}"));

    result.tables.push(sweep);
    result.timings.insert("homogenize".into(), hom_seconds);
    result.timings.insert("total".into(), total.elapsed().as_secs_f64());
    Ok(result)
}

/// Inputs of a quenched sweep on an i.i.d. medium.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuenchedConfig {
    pub spec: EnergySpec,
    pub n: usize,
    pub eps: Vec<f64>,
    pub seeds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub hom: HomOptions,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Largest admissible relative energy error at the smallest `eps`.
    #[serde(default = "default_energy_tol")]
    pub energy_tol: f64,
}

fn default_energy_tol() -> f64 {
    0.02
}

fn sample_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Per-realization minimizers against the homogenized one, seed by seed.
pub fn quenched_study(env: &Environment, cfg: &QuenchedConfig) -> Result<StudyResult> {
    let total = Instant::now();
    let d = env.dim();
    let domain = check_sweep(cfg.n, &cfg.eps, d)?;
    if cfg.seeds == 0 {
        return Err(Error::Empty("no seeds".into()));
    }
    let spec = &cfg.spec;
    spec.validate(d)?;
    let opts = NewtonOptions { tol: cfg.tol, ..default_options() };
    let ens = match env.medium() {
        Medium::Deterministic => Ensemble {
            members: vec![Realization::origin(); cfg.seeds],
            weights: vec![1.0 / cfg.seeds as f64; cfg.seeds],
            exact: false,
        },
        _ => env.enumerate_or_sample(&SamplingPlan::MonteCarlo { count: cfg.seeds, seed: cfg.seed })?,
    };
    let load = spec.load_vector(d);
    let hom = HomProblem::homogenize(env, spec, &cfg.hom)?;
    let hom_sol = minimize_hom(&hom, &domain, &load, &opts)?;
    let mut sweep = Table::new(
        "sweep",
        &[
            "eps",
            "mean_energy",
            "std_energy",
            "energy_hom",
            "rel_energy_error",
            "mean_distance",
            "std_distance",
            "max_pairwise",
            "seconds",
        ],
    );
    let mut scatter = Table::new("scatter", &["eps", "seed", "l2_distance", "energy"]);
    let nw = domain.node_weights();
    let m = spec.components(d);
    let dist = |a: &[f64], b: &[f64]| {
        let mut s = NeumaierSum::default();
        for (node, w) in nw.iter().enumerate() {
            for i in 0..m {
                s.add(w * (a[node * m + i] - b[node * m + i]).powi(2));
            }
        }
        s.value().sqrt()
    };
    for &eps in &cfg.eps {
        let t = Instant::now();
        let sol = minimize_eps(env, &ens, spec, &domain, eps, &opts)?;
        let distances: Vec<f64> = sol.field.values.iter().map(|u| dist(u, &hom_sol.u.values[0])).collect();
        let mut pairwise = 0.0f64;
        for a in 0..ens.len() {
            for b in 0..a {
                pairwise = pairwise.max(dist(&sol.field.values[a], &sol.field.values[b]));
            }
        }
        for (s, (dv, e)) in distances.iter().zip(&sol.values).enumerate() {
            scatter.push(&[eps, s as f64, *dv, *e]);
        }
        let (mean_e, std_e) = sample_std(&sol.values);
        let (mean_d, std_d) = sample_std(&distances);
        let rel = (mean_e - hom_sol.value).abs() / hom_sol.value.abs().max(f64::MIN_POSITIVE);
        sweep.push(&[eps, mean_e, std_e, hom_sol.value, rel, mean_d, std_d, pairwise, t.elapsed().as_secs_f64()]);
    }
    let mut result = StudyResult::new("quenched", serde_json::json!({ "environment": env.to_spec(), "study": cfg }));
    let means = sweep.column("mean_distance").unwrap().to_vec();
    let floor = 1e-10 * hom_sol.u.norm_p(2.0).max(1e-300);
    result.assert("mean distance to u_hom decreases", decreasing(&means, 0.0, floor), format!("means {means:?}"));
    let stds = sweep.column("std_distance").unwrap().to_vec();
    result.assert("spread of distances to u_hom decreases", decreasing(&stds, 0.0, floor), format!("standard deviations {stds:?}"));
    let rel = *sweep.column("rel_energy_error").unwrap().last().unwrap();
    let exact = hom_sol.value == 0.0 && sweep.column("mean_energy").unwrap().last().unwrap().abs() < 1e-14;
    result.assert(
        "mean energy close to min E_hom at the smallest eps",
        exact || rel <= cfg.energy_tol,
        format!("relative error {rel:e}, tolerance {}", cfg.energy_tol),
    );
    result.tables.push(sweep);
    result.tables.push(scatter);
    result.timings.insert("total".into(), total.elapsed().as_secs_f64());
    Ok(result)
}
