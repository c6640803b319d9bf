//! Minimizing movements for the Allen-Cahn gradient system.
//!
//! Energy `E(u) = int A grad u . grad u + f(u)`, dissipation `R(v) = 1/2 int r v^2`,
//! homogeneous Dirichlet data. One step minimizes `J(u) = R(u - u_n) / tau + E(u)`,
//! which is strongly convex when `tau < 1 / (2 |Lambda|)` with
//! `Lambda = min(0, min_phase lambda / r)`.

use web_time::Instant;

use serde::{Deserialize, Serialize};

use crate::cell;
use crate::energy::{cell_phases, FieldEnergy, Inertia};
use crate::env::{Ensemble, Environment, Medium, Phase};
use crate::error::{Error, Result};
use crate::fem::Dofs;
use crate::grid::{Domain, RandomField};
use crate::integrand::Integrand;
use crate::linalg::NeumaierSum;
use crate::newton::{minimize, NewtonOptions};
use crate::study::{StudyResult, Table};
use crate::varmin::{decreasing, study_ensemble, EnergySpec, HomOptions, HomProblem};

/// Initial datum `u_0` (zero on the boundary).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialDatum {
    Zero,
    /// `amplitude * prod_a sin(mode pi x_a)`.
    Sine { amplitude: f64, mode: usize },
}

impl InitialDatum {
    pub fn field(&self, domain: &Domain) -> RandomField {
        match *self {
            InitialDatum::Zero => RandomField::zeros(domain, 1, &[1.0]),
            InitialDatum::Sine { amplitude, mode } => RandomField::deterministic(domain, 1, |x, _| {
                amplitude * (0..domain.dim()).map(|a| (mode as f64 * std::f64::consts::PI * x[a]).sin()).product::<f64>()
            }),
        }
        .with_dirichlet()
    }
}

/// Time discretization of a flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpec {
    pub tau: f64,
    /// Horizon `T`.
    pub horizon: f64,
    pub initial: InitialDatum,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// `C` in `|y|^4 / C - C <= f(y) <= C (|y|^4 + 1)`.
    #[serde(default = "default_growth")]
    pub growth: f64,
}

fn default_tol() -> f64 {
    1e-11
}

fn default_growth() -> f64 {
    10.0
}

/// What [`FlowSpec::validate`] established about the environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificates {
    /// Smallest `lambda` over the phases.
    pub lambda: f64,
    /// `min(0, min_phase lambda / r)`.
    pub big_lambda: f64,
    /// Supremum of admissible steps (infinite for convex reactions).
    pub tau_max: f64,
    /// Growth constant used for the quartic bounds.
    pub growth_constant: f64,
}

impl FlowSpec {
    pub fn steps(&self) -> usize {
        (self.horizon / self.tau - 1e-9).ceil().max(0.0) as usize
    }

    /// Checks the step restriction, `r` in `[1/C, C]`, and the quartic growth and
    /// `lambda`-convexity of every reaction on a sample grid.
    pub fn validate(&self, env: &Environment) -> Result<Certificates> {
        if !(self.tau > 0.0) || !(self.horizon >= 0.0) || !(self.tol > 0.0) {
            return Err(Error::InvalidFlow("tau and tol must be positive, T non-negative".into()));
        }
        let c = env.bound_constant();
        let probs = env.phase_probabilities();
        let mut lambda = f64::INFINITY;
        let mut big_lambda = 0.0f64;
        for (k, ph) in env.phases().iter().enumerate() {
            if probs.get(k).map_or(true, |p| *p == 0.0) {
                continue;
            }
            if !(ph.r >= 1.0 / c && ph.r <= c) {
                return Err(Error::InvalidFlow(format!("phase {k}: r = {} outside [1/C, C] with C = {c}", ph.r)));
            }
            let l = ph.reaction.lambda();
            lambda = lambda.min(l);
            big_lambda = big_lambda.min(l / ph.r);
            check_reaction(k, &ph.reaction, l, self.growth)?;
        }
        let tau_max = if big_lambda < 0.0 { 1.0 / (2.0 * big_lambda.abs()) } else { f64::INFINITY };
        if !(self.tau < tau_max) {
            return Err(Error::InvalidFlow(format!(
                "tau = {} violates tau < 1/(2|Lambda|) = {tau_max} (Lambda = {big_lambda})",
                self.tau
            )));
        }
        Ok(Certificates { lambda, big_lambda, tau_max, growth_constant: self.growth })
    }
}

fn check_reaction(k: usize, f: &crate::env::Quartic, lambda: f64, c: f64) -> Result<()> {
    if !lambda.is_finite() {
        return Err(Error::InvalidFlow(format!("phase {k}: reaction is not lambda-convex")));
    }
    let h = 1e-2;
    let ys: Vec<f64> = (0..=600).map(|i| -3.0 + i as f64 * h).collect();
    let g = |y: f64| f.value(y) - 0.5 * lambda * y * y;
    for w in ys.windows(3) {
        let (a, b, e) = (g(w[0]), g(w[1]), g(w[2]));
        let rounding = 8.0 * f64::EPSILON * (a.abs() + b.abs() + e.abs()) / (h * h);
        if (a - 2.0 * b + e) / (h * h) < -1e-10 - rounding {
            return Err(Error::InvalidFlow(format!("phase {k}: f - lambda/2 y^2 is not convex near y = {}", w[1])));
        }
    }
    if f.0.iter().all(|v| *v == 0.0) {
        return Ok(());
    }
    if !(f.0[4] > 0.0) {
        return Err(Error::InvalidFlow(format!("phase {k}: reaction needs quartic growth")));
    }
    for &y in &ys {
        let y4 = y.powi(4);
        let v = f.value(y);
        if v < y4 / c - c || v > c * (y4 + 1.0) {
            return Err(Error::InvalidFlow(format!("phase {k}: growth bounds with C = {c} fail at y = {y}")));
        }
    }
    Ok(())
}

/// Realizations and per-cell phases of one flow (scale `eps` or homogenized).
pub struct FlowProblem {
    pub domain: Domain,
    pub phases: Vec<Phase>,
    pub ensemble: Ensemble,
    /// Per member, per cell.
    pub cell_phase: Vec<Vec<usize>>,
    pub eps: Option<f64>,
}

impl FlowProblem {
    pub fn at_scale(env: &Environment, ens: &Ensemble, domain: &Domain, eps: f64) -> Result<Self> {
        if env.dim() != domain.dim() {
            return Err(Error::FieldMismatch("environment and domain dimensions differ".into()));
        }
        let cell_phase = ens.members.iter().map(|omega| cell_phases(env, omega, domain, Some(eps))).collect::<Result<_>>()?;
        Ok(FlowProblem { domain: domain.clone(), phases: env.phases().to_vec(), ensemble: ens.clone(), cell_phase, eps: Some(eps) })
    }

    /// Deterministic flow with a single phase.
    pub fn uniform(phase: Phase, domain: &Domain) -> Self {
        FlowProblem {
            domain: domain.clone(),
            phases: vec![phase],
            ensemble: Ensemble::single(crate::env::Realization::origin()),
            cell_phase: vec![vec![0; domain.cell_count()]],
            eps: None,
        }
    }

    /// `{A_hom, <r>, <f>}` for the quadratic part, dissipation and reaction.
    pub fn homogenized(env: &Environment, domain: &Domain, opts: &HomOptions) -> Result<Self> {
        Ok(Self::uniform(homogenized_phase(env, opts)?, domain))
    }

    fn energy<'a>(&'a self, r: usize, dofs: &'a Dofs, integrand: &'a Integrand) -> FieldEnergy<'a> {
        let mut e = FieldEnergy::new(&self.domain, dofs, &self.phases, self.cell_phase[r].clone(), integrand);
        e.grad_scale = 2.0;
        e.reaction = true;
        e
    }

    /// `E(u)` per member.
    pub fn energies(&self, u: &RandomField) -> Vec<f64> {
        let dofs = Dofs::free(&self.domain, 1);
        (0..self.ensemble.len()).map(|r| self.energy(r, &dofs, &Integrand::Quadratic).value_full(member(u, r))).collect()
    }

    /// `R(u - v)` per member.
    pub fn dissipation(&self, u: &RandomField, v: &RandomField) -> Vec<f64> {
        let cw = self.domain.cell_volume() / self.domain.corners() as f64;
        (0..self.ensemble.len())
            .map(|r| {
                let (a, b) = (member(u, r), member(v, r));
                let mut s = NeumaierSum::default();
                for c in 0..self.domain.cell_count() {
                    let rc = self.phases[self.cell_phase[r][c]].r;
                    for &node in &self.domain.cell_corners(c)[..self.domain.corners()] {
                        let dv = a[node] - b[node];
                        s.add(cw * 0.5 * rc * dv * dv);
                    }
                }
                s.value()
            })
            .collect()
    }
}

fn member(u: &RandomField, r: usize) -> &[f64] {
    &u.values[if u.realizations() == 1 { 0 } else { r }]
}

/// Synthetic phase of the homogenized flow.
pub fn homogenized_phase(env: &Environment, opts: &HomOptions) -> Result<Phase> {
    let d = env.dim();
    let hom = HomProblem::homogenize(env, &EnergySpec::new(Integrand::Quadratic), opts)?;
    let Integrand::QuadraticForm { matrix } = &hom.integrand else {
        return Err(Error::Unsupported("homogenized flow needs a quadratic effective integrand".into()));
    };
    let rows: Vec<Vec<f64>> = (0..d).map(|i| matrix[i * d..(i + 1) * d].to_vec()).collect();
    let probs = env.phase_probabilities();
    let r = probs.iter().zip(env.phases()).map(|(p, ph)| p * ph.r).sum();
    let reaction = cell::f_hom(env, &[]).polynomial;
    Ok(Phase::scalar(matrix[0]).with_matrix(d, &rows).with_dissipation(r).with_reaction(reaction))
}

/// Outcome of one minimizing-movement step.
#[derive(Clone, Debug)]
pub struct Step {
    pub u: RandomField,
    /// Largest step-optimality residual over the members.
    pub residual: f64,
    /// Whether the step was redone as two half steps.
    pub halved: bool,
}

fn solve_increment(problem: &FlowProblem, u: &RandomField, tau: f64, tol: f64) -> Result<(RandomField, f64)> {
    let dofs = Dofs::dirichlet(&problem.domain, 1);
    let opts = NewtonOptions { tol, ..NewtonOptions::default() };
    let v = Integrand::Quadratic;
    let solved = crate::par::try_map_indices(problem.ensemble.len(), |r| {
        let prev = member(u, r).to_vec();
        let mut e = problem.energy(r, &dofs, &v);
        let mut x = dofs.restrict(&prev);
        e.inertia = Some(Inertia { inv_tau: 1.0 / tau, prev });
        let rep = minimize(&e, &mut x, &opts)?;
        Ok((dofs.expand(&x), rep.gradient_norm))
    })?;
    let mut out = RandomField::zeros(&problem.domain, 1, &problem.ensemble.weights);
    out.eps = problem.eps;
    out.dirichlet = true;
    let mut residual = 0.0f64;
    for (r, (vals, g)) in solved.into_iter().enumerate() {
        out.values[r] = vals;
        residual = residual.max(g);
    }
    Ok((out, residual))
}

/// `u_{n+1} = argmin R(u - u_n) / tau + E(u)`; on solver failure the step is
/// redone once as two steps of `tau / 2`.
pub fn mm_step(problem: &FlowProblem, u: &RandomField, tau: f64, tol: f64) -> Result<Step> {
    match solve_increment(problem, u, tau, tol) {
        Ok((u, residual)) => Ok(Step { u, residual, halved: false }),
        Err(first) => {
            let retry = solve_increment(problem, u, 0.5 * tau, tol)
                .and_then(|(mid, r1)| solve_increment(problem, &mid, 0.5 * tau, tol).map(|(u, r2)| (u, r1.max(r2))));
            match retry {
                Ok((u, residual)) => Ok(Step { u, residual, halved: true }),
                Err(second) => Err(Error::Divergence(format!("step failed ({first}); halved step failed ({second})"))),
            }
        }
    }
}

/// A discrete trajectory; per-step quantities are ensemble means.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub fields: Vec<RandomField>,
    pub energies: Vec<f64>,
    /// `R(u_{n+1} - u_n) / tau`, zero at the initial time.
    pub dissipation: Vec<f64>,
    /// Largest `E(u_{n+1}) + R(u_{n+1} - u_n) / tau - E(u_n)` over steps and members.
    pub worst_inequality: f64,
    pub residual: f64,
    pub halved_steps: usize,
}

impl Trajectory {
    /// Index of the stored step closest to `t`.
    pub fn index_at(&self, t: f64) -> usize {
        self.times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().partial_cmp(&(b.1 - t).abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// Per-step table: step, time, energy, dissipation increment.
    pub fn table(&self, name: &str) -> Table {
        let mut t = Table::new(name, &["step", "time", "energy", "dissipation_increment"]);
        for i in 0..self.times.len() {
            t.push(&[i as f64, self.times[i], self.energies[i], self.dissipation[i]]);
        }
        t
    }
}

fn weighted(values: &[f64], weights: &[f64]) -> f64 {
    let mut s = NeumaierSum::default();
    values.iter().zip(weights).for_each(|(v, w)| s.add(v * w));
    s.value()
}

/// Runs `ceil(T / tau)` steps from `u0`.
pub fn integrate(problem: &FlowProblem, spec: &FlowSpec, u0: &RandomField) -> Result<Trajectory> {
    if u0.domain != problem.domain || u0.components != 1 {
        return Err(Error::FieldMismatch("initial datum does not match the flow grid".into()));
    }
    let weights = &problem.ensemble.weights;
    let mut u = if u0.realizations() == 1 { u0.broadcast(weights) } else { u0.clone() };
    if u.realizations() != weights.len() {
        return Err(Error::FieldMismatch("initial datum does not match the ensemble".into()));
    }
    let mut e = problem.energies(&u);
    let mut traj = Trajectory {
        times: vec![0.0],
        fields: vec![u.clone()],
        energies: vec![weighted(&e, weights)],
        dissipation: vec![0.0],
        worst_inequality: f64::NEG_INFINITY,
        residual: 0.0,
        halved_steps: 0,
    };
    let steps = spec.steps();
    for n in 0..steps {
        let step = mm_step(problem, &u, spec.tau, spec.tol)?;
        let e_next = problem.energies(&step.u);
        let diss: Vec<f64> = problem.dissipation(&step.u, &u).iter().map(|r| r / spec.tau).collect();
        for r in 0..weights.len() {
            traj.worst_inequality = traj.worst_inequality.max(e_next[r] + diss[r] - e[r]);
        }
        traj.residual = traj.residual.max(step.residual);
        traj.halved_steps += step.halved as usize;
        traj.times.push((n + 1) as f64 * spec.tau);
        traj.energies.push(weighted(&e_next, weights));
        traj.dissipation.push(weighted(&diss, weights));
        traj.fields.push(step.u.clone());
        u = step.u;
        e = e_next;
    }
    if steps == 0 {
        traj.worst_inequality = 0.0;
    }
    Ok(traj)
}

/// Inputs of the evolutionary sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub flow: FlowSpec,
    pub n: usize,
    /// Halving sweep, coarsest first.
    pub eps: Vec<f64>,
    #[serde(default)]
    pub hom: HomOptions,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Allowed growth of the first ratio in the sweep.
    #[serde(default = "default_slack")]
    pub slack: f64,
}

fn default_samples() -> usize {
    32
}

fn default_slack() -> f64 {
    0.1
}

/// Well-prepared data `u_0 + eps sum_a zeta_eps d_a u_0 Phi_a` (the plain `u_0` off a torus).
pub fn well_prepared(env: &Environment, ens: &Ensemble, u0: &RandomField, eps: f64, opts: &HomOptions) -> Result<RandomField> {
    match env.medium() {
        Medium::ShiftTorus { .. } => {
            let hom = HomProblem::homogenize(env, &EnergySpec::new(Integrand::Quadratic), opts)?;
            crate::varmin::recovery_sequence(env, ens, &hom, u0, eps, eps)
        }
        _ => Ok(RandomField { eps: Some(eps), ..u0.broadcast(&ens.weights) }),
    }
}

/// Flows at every `eps` against the homogenized flow at `t in {T/4, T/2, T}`.
pub fn evolutionary_convergence(env: &Environment, cfg: &FlowConfig) -> Result<StudyResult> {
    let total = Instant::now();
    let d = env.dim();
    cfg.flow.validate(env)?;
    if cfg.eps.is_empty() {
        return Err(Error::Empty("empty eps sweep".into()));
    }
    let domain = Domain::unit(d, cfg.n)?;
    for &e in &cfg.eps {
        domain.coefficient_cells(e)?;
    }
    let ens = study_ensemble(env, cfg.samples, cfg.seed)?;
    let u0 = cfg.flow.initial.field(&domain);
    let stage = Instant::now();
    let hom_problem = FlowProblem::homogenized(env, &domain, &cfg.hom)?;
    let hom = integrate(&hom_problem, &cfg.flow, &u0)?;
    let hom_seconds = stage.elapsed().as_secs_f64();
    let horizon = cfg.flow.horizon;
    let probes = [0.25 * horizon, 0.5 * horizon, horizon];

    let mut sweep = Table::new("sweep", &["eps", "time", "l2_error", "energy_gap", "seconds"]);
    let mut initial = Table::new("initial", &["eps", "initial_gap"]);
    let mut worst = hom.worst_inequality;
    let mut monotone = hom.energies.windows(2).all(|w| w[1] <= w[0] + 1e-10);
    let mut finest: Option<Trajectory> = None;
    for &eps in &cfg.eps {
        let t = Instant::now();
        let problem = FlowProblem::at_scale(env, &ens, &domain, eps)?;
        let start = well_prepared(env, &ens, &u0, eps, &cfg.hom)?;
        let traj = integrate(&problem, &cfg.flow, &start)?;
        worst = worst.max(traj.worst_inequality);
        monotone &= traj.energies.windows(2).all(|w| w[1] <= w[0] + 1e-10);
        initial.push(&[eps, (traj.energies[0] - hom.energies[0]).abs()]);
        let seconds = t.elapsed().as_secs_f64();
        for &time in &probes {
            let (i, j) = (traj.index_at(time), hom.index_at(time));
            let l2 = traj.fields[i].combine(1.0, &hom.fields[j].mean().broadcast(&ens.weights), -1.0)?.norm_p(2.0);
            sweep.push(&[eps, traj.times[i], l2, (traj.energies[i] - hom.energies[j]).abs(), seconds]);
        }
        finest = Some(traj);
    }

    let mut result = StudyResult::new("flow", serde_json::json!({ "environment": env.to_spec(), "study": cfg }));
    result.assert("dissipation inequality at every step", worst <= 1e-10, format!("largest excess {worst:e}"));
    result.assert("energy non-increasing", monotone, String::new());
    let scale = hom.energies[0].abs().max(1.0);
    for (k, &time) in probes.iter().enumerate() {
        let rows: Vec<usize> = (0..sweep.rows()).filter(|r| r % probes.len() == k).collect();
        let col = |name: &str| rows.iter().map(|&r| sweep.column(name).unwrap()[r]).collect::<Vec<f64>>();
        let (l2, gap) = (col("l2_error"), col("energy_gap"));
        result.assert(
            &format!("l2 error decreases at t = {time}"),
            decreasing(&l2, cfg.slack, 1e-9),
            format!("{l2:?}"),
        );
        result.assert(
            &format!("energy gap decreases at t = {time}"),
            decreasing(&gap, cfg.slack, 1e-9 * scale),
            format!("{gap:?}"),
        );
    }
    let gaps = initial.column("initial_gap").unwrap().to_vec();
    result.assert("initial energy gap decreases", decreasing(&gaps, cfg.slack, 1e-9 * scale), format!("{gaps:?}"));

    let fine = finest.expect("non-empty sweep");
    let mut trajectory = Table::new("trajectory", &["step", "time", "energy", "energy_hom", "dissipation_increment"]);
    for i in 0..fine.times.len() {
        trajectory.push(&[i as f64, fine.times[i], fine.energies[i], hom.energies[i.min(hom.energies.len() - 1)], fine.dissipation[i]]);
    }
    result.tables.push(sweep);
    result.tables.push(initial);
    result.tables.push(trajectory);
    result.timings.insert("homogenized".into(), hom_seconds);
    result.timings.insert("total".into(), total.elapsed().as_secs_f64());
    Ok(result)
}
