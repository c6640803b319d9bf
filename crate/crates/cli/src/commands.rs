//! One runner per subcommand. Each returns a [`StudyResult`] plus any extra files it wrote.

use std::path::{Path, PathBuf};
use std::time::Instant;

use stoch_unfold::cell::{assemble_ahom, cell_value, extrapolate, korn_ratio, rve_vhom};
use stoch_unfold::env::Medium;
use stoch_unfold::flow::{integrate, FlowConfig, FlowProblem};
use stoch_unfold::integrand::Integrand;
use stoch_unfold::newton::NewtonOptions;
use stoch_unfold::study::{format_value, StudyResult, Table};
use stoch_unfold::unfold::{identity_residuals, IdentityResiduals};
use stoch_unfold::varmin::{default_options, minimize_eps, minimize_hom, study_ensemble, ConvergenceConfig, HomProblem};
use stoch_unfold::{Domain, Environment, Error, Result, SamplingPlan};

use crate::config::{CellConfig, KornConfig, UnfoldTestConfig};

fn echo<T: serde::Serialize>(env: &Environment, cfg: &T) -> serde_json::Value {
    serde_json::json!({ "environment": env.to_spec(), "study": cfg })
}

pub fn unfold_test(env: &Environment, cfg: &UnfoldTestConfig, seed: u64, out: &Path) -> Result<(StudyResult, Vec<PathBuf>)> {
    let total = Instant::now();
    let count = env.site_count().ok_or_else(|| Error::Unsupported("unfold-test needs a shift-torus environment".into()))?;
    let ens = env.enumerate_or_sample(&SamplingPlan::Exact { count })?;
    let domain = Domain::unit(env.dim(), cfg.n)?;
    let names: Vec<&str> = IdentityResiduals::default().entries().iter().map(|e| e.0).collect();
    let mut columns = vec!["eps", "field"];
    columns.extend(&names);
    let mut table = Table::new("identities", &columns);
    let mut long: Vec<(String, f64, usize, f64)> = Vec::new();
    let mut all = Vec::new();
    for (i, &eps) in cfg.eps.iter().enumerate() {
        let res = identity_residuals(env, &ens, &domain, eps, cfg.trials, stoch_unfold::rng::derive(seed, i as u64))?;
        for (field, r) in res.iter().enumerate() {
            let mut row = vec![eps, field as f64];
            row.extend(r.entries().iter().map(|e| e.1));
            table.push(&row);
            long.extend(r.entries().iter().map(|&(name, v)| (name.to_string(), eps, field, v)));
        }
        all.extend(res);
    }
    let worst = IdentityResiduals::worst(&all);
    let mut result = StudyResult::new("unfold-test", echo(env, cfg));
    for (name, v) in worst.entries() {
        let tol = if IdentityResiduals::PROJECTION.contains(&name) { cfg.projection_tol } else { cfg.tol };
        result.assert(name, v < tol, format!("max residual {v:e} (tol {tol:e})"));
    }
    result.tables.push(table);
    result.timings.insert("total".into(), total.elapsed().as_secs_f64());

    std::fs::create_dir_all(out)?;
    let path = out.join("unfold-test_residuals.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(["identity", "eps", "field", "residual"]).map_err(csv_err)?;
    for (name, eps, field, v) in long {
        w.write_record([name, format_value(eps), field.to_string(), format_value(v)]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok((result, vec![path]))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn unit_loads(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect()
}

pub fn cell(env: &Environment, cfg: &CellConfig, seed: u64) -> Result<StudyResult> {
    let total = Instant::now();
    let d = env.dim();
    cfg.integrand.validate()?;
    let loads = if cfg.f.is_empty() { unit_loads(cfg.integrand.components(d) * d) } else { cfg.f.clone() };
    let mut result = StudyResult::new("cell", echo(env, cfg));
    let mut values = Table::new("values", &["F", "k", "value", "iterations", "residual", "seconds"]);
    let mut summary = Table::new("summary", &["F", "value"]);
    let iid = matches!(env.medium(), Medium::IidLattice { .. });
    let mut finals = Vec::with_capacity(loads.len());
    for (i, f) in loads.iter().enumerate() {
        let value = if iid {
            let rve = cfg.rve.as_ref().ok_or_else(|| Error::Unsupported("i.i.d. cell problems need a [cell.rve] window".into()))?;
            let k = *cfg.k.last().expect("validated");
            let t = Instant::now();
            let est = rve_vhom(env, &cfg.integrand, f, rve.side, rve.seeds, seed, k, cfg.tol)?;
            values.push(&[i as f64, k as f64, est.mean, rve.seeds as f64, est.std, t.elapsed().as_secs_f64()]);
            est.mean
        } else {
            let mut seq = Vec::with_capacity(cfg.k.len());
            for &k in &cfg.k {
                let c = cell_value(env, &cfg.integrand, f, k, cfg.tol)?;
                values.push(&[i as f64, k as f64, c.value, c.iterations as f64, c.residual, c.seconds]);
                seq.push(c.value);
            }
            extrapolate(&seq)
        };
        summary.push(&[i as f64, value]);
        finals.push(value);
    }
    if let Some(expect) = &cfg.expect {
        for (i, (&got, &want)) in finals.iter().zip(expect).enumerate() {
            result.assert(
                &format!("value for F[{i}]"),
                (got - want).abs() <= cfg.expect_tol,
                format!("{got} vs {want} (tol {:e})", cfg.expect_tol),
            );
        }
    }
    if matches!(cfg.integrand, Integrand::Quadratic) && !iid {
        let mut ahom = Table::new("ahom", &["k", "entry", "value", "reuss", "voigt"]);
        for &k in &cfg.k {
            match assemble_ahom(env, k) {
                Ok(h) => {
                    for e in 0..d * d {
                        ahom.push(&[k as f64, e as f64, h.matrix[e], h.reuss[e], h.voigt[e]]);
                    }
                    result.assert(&format!("Voigt-Reuss sandwich at k = {k}"), true, format!("eigenvalues {:?}", h.eigenvalues()));
                }
                Err(Error::BoundViolation(msg)) => result.assert(&format!("Voigt-Reuss sandwich at k = {k}"), false, msg),
                Err(e) => return Err(e),
            }
        }
        result.tables.push(ahom);
    }
    result.tables.push(values);
    result.tables.push(summary);
    result.timings.insert("total".into(), total.elapsed().as_secs_f64());
    Ok(result)
}

pub fn minimize(env: &Environment, cfg: &ConvergenceConfig, out: &Path) -> Result<(StudyResult, Vec<PathBuf>)> {
    let total = Instant::now();
    let d = env.dim();
    cfg.spec.validate(d)?;
    let domain = Domain::unit(d, cfg.n)?;
    let opts = NewtonOptions { tol: cfg.tol, ..default_options() };
    let ens = study_ensemble(env, cfg.samples, cfg.seed)?;
    let load = cfg.spec.load_vector(d);
    let stage = Instant::now();
    let hom = HomProblem::homogenize(env, &cfg.spec, &cfg.hom)?;
    let hom_sol = minimize_hom(&hom, &domain, &load, &opts)?;
    let hom_seconds = stage.elapsed().as_secs_f64();
    let mut table = Table::new("minimizers", &["eps", "energy_eps", "energy_hom", "gap", "iterations", "gradient_norm", "seconds"]);
    let mut worst = hom_sol.gradient_norm;
    let mut files = Vec::new();
    std::fs::create_dir_all(out)?;
    for &eps in &cfg.eps {
        let t = Instant::now();
        let m = minimize_eps(env, &ens, &cfg.spec, &domain, eps, &opts)?;
        let grad = m.gradient_norms.iter().copied().fold(0.0, f64::max);
        let iters = m.iterations.iter().copied().max().unwrap_or(0);
        worst = worst.max(grad);
        table.push(&[eps, m.mean, hom_sol.value, (m.mean - hom_sol.value).abs(), iters as f64, grad, t.elapsed().as_secs_f64()]);
        let path = out.join(format!("minimize_mean_u_eps_{}.csv", (1.0 / eps).round()));
        m.field.mean().write_csv(&path)?;
        files.push(path);
    }
    let path = out.join("minimize_u_hom.csv");
    hom_sol.u.write_csv(&path)?;
    files.push(path);
    let mut result = StudyResult::new("minimize", echo(env, cfg));
    result.assert("first-order condition", worst <= cfg.tol, format!("largest gradient norm {worst:e} (tol {:e})", cfg.tol));
    result.tables.push(table);
    result.timings.insert("homogenize".into(), hom_seconds);
    result.timings.insert("total".into(), total.elapsed().as_secs_f64());
    Ok((result, files))
}

/// An empty `eps` list integrates the homogenized flow alone.
pub fn flow(env: &Environment, cfg: &FlowConfig) -> Result<StudyResult> {
    if !cfg.eps.is_empty() {
        return stoch_unfold::flow::evolutionary_convergence(env, cfg);
    }
    let total = Instant::now();
    cfg.flow.validate(env)?;
    let domain = Domain::unit(env.dim(), cfg.n)?;
    let problem = FlowProblem::homogenized(env, &domain, &cfg.hom)?;
    let traj = integrate(&problem, &cfg.flow, &cfg.flow.initial.field(&domain))?;
    let mut result = StudyResult::new("flow", echo(env, cfg));
    let worst = traj.worst_inequality;
    result.assert("dissipation inequality at every step", worst <= 1e-10, format!("largest excess {worst:e}"));
    result.assert("energy non-increasing", traj.energies.windows(2).all(|w| w[1] <= w[0] + 1e-10), String::new());
    result.tables.push(traj.table("trajectory"));
    result.timings.insert("total".into(), total.elapsed().as_secs_f64());
    Ok(result)
}

pub fn korn(env: &Environment, cfg: &KornConfig, seed: u64) -> Result<StudyResult> {
    let total = Instant::now();
    let refined = if cfg.refine > 1 { env.refine(cfg.refine)? } else { env.clone() };
    let rep = korn_ratio(&refined, cfg.trials, cfg.p, seed)?;
    let bound = if env.dim() == 1 { 1.0 } else { 2.0 };
    let mut result = StudyResult::new("korn", echo(env, cfg));
    result.assert(
        "Korn ratio bound",
        rep.max_ratio <= bound + cfg.tol,
        format!("max ratio {} vs {bound} over {} fields ({} skipped)", rep.max_ratio, rep.trials, rep.skipped),
    );
    result.assert(
        "ratio below symbol supremum",
        rep.max_ratio <= rep.symbol_bound + cfg.tol,
        format!("symbol supremum {}", rep.symbol_bound),
    );
    if let Some(disc) = rep.fourier_discrepancy {
        result.assert("Fourier cross-check", disc <= cfg.fourier_tol, format!("discrepancy {disc:e}"));
    }
    let mut table = Table::new("korn", &["trials", "skipped", "max_ratio", "fourier_max_ratio", "symbol_bound"]);
    table.push(&[rep.trials as f64, rep.skipped as f64, rep.max_ratio, rep.fourier_max_ratio.unwrap_or(f64::NAN), rep.symbol_bound]);
    result.tables.push(table);
    result.timings.insert("total".into(), total.elapsed().as_secs_f64());
    Ok(result)
}
