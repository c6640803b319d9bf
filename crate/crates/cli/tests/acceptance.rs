//! Acceptance suite: one PASS/FAIL line per criterion, with wall time against its budget.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use stoch_unfold::cell::{assemble_ahom, cell_value, korn_ratio};
use stoch_unfold::flow::{integrate, FlowProblem, FlowSpec, InitialDatum};
use stoch_unfold::integrand::Integrand;
use stoch_unfold::study::StudyResult;
use stoch_unfold::unfold::{identity_residuals, IdentityResiduals};
use stoch_unfold::{rng, Domain, Environment, Phase, Quartic, Realization, SamplingPlan};
use stoch_unfold_cli::{execute, RunConfig, Subcommand};

type Outcome = Result<String, String>;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn study(cmd: Subcommand, config: &str, workers: usize, out: &Path) -> Result<StudyResult, String> {
    let cfg = RunConfig::load(&configs().join(config)).map_err(|e| e.to_string())?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| e.to_string())?;
    pool.install(|| execute(cmd, &cfg, out)).map(|o| o.result).map_err(|e| e.to_string())
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn failed_assertions(r: &StudyResult) -> Result<(), String> {
    let bad: Vec<String> = r.assertions.iter().filter(|a| !a.passed).map(|a| format!("{}: {}", a.name, a.detail)).collect();
    ensure(bad.is_empty(), bad.join("; "))
}

fn column(r: &StudyResult, table: &str, name: &str) -> Vec<f64> {
    r.table(table).and_then(|t| t.column(name)).unwrap_or_else(|| panic!("missing {table}.{name}")).to_vec()
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

/// Shift torus with a pseudo-random configuration over `phases` coefficients.
fn random_torus(d: usize, l: usize, coefficients: &[f64], seed: u64) -> Environment {
    let sites = l.pow(d as u32);
    let mut config: Vec<usize> = (0..sites).map(|i| (rng::derive(seed, i as u64) % coefficients.len() as u64) as usize).collect();
    for (k, c) in config.iter_mut().take(coefficients.len()).enumerate() {
        *c = k;
    }
    let phases = coefficients.iter().map(|&a| Phase::scalar(a)).collect();
    Environment::shift_torus(d, &vec![l; d], config, phases).unwrap()
}

fn identity_matrix() -> Result<Vec<(usize, usize, IdentityResiduals)>, String> {
    let mut out = Vec::new();
    for d in 1..=2 {
        for l in 2..=3 {
            let env = random_torus(d, l, &[1.0, 2.5, 4.0], 100 + (d * 10 + l) as u64);
            let ens = env.enumerate_or_sample(&SamplingPlan::Exact { count: l.pow(d as u32) }).map_err(|e| e.to_string())?;
            let n = if d == 1 { 48 } else { 12 };
            let domain = Domain::unit(d, n).map_err(|e| e.to_string())?;
            let res = identity_residuals(&env, &ens, &domain, 1.0 / 6.0, 50, 7).map_err(|e| e.to_string())?;
            ensure(res.len() == 50, "expected 50 fields")?;
            out.push((d, l, IdentityResiduals::worst(&res)));
        }
    }
    Ok(out)
}

fn ac1() -> Outcome {
    let mut worst: f64 = 0.0;
    for (d, l, r) in identity_matrix()? {
        ensure(r.unfolding() < 1e-12, format!("d = {d}, L = {l}: {r:?}"))?;
        worst = worst.max(r.unfolding());
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cli = study(Subcommand::UnfoldTest, "checkerboard.toml", 2, dir.path())?;
    failed_assertions(&cli)?;
    Ok(format!("d in {{1,2}}, L in {{2,3}}, 50 fields each; worst residual {worst:e}; bundled checkerboard passes"))
}

fn ac2() -> Outcome {
    let mut worst: f64 = 0.0;
    for (d, l, r) in identity_matrix()? {
        ensure(r.projection() < 1e-13, format!("d = {d}, L = {l}: {r:?}"))?;
        worst = worst.max(r.projection());
    }
    Ok(format!("idempotence, contraction, commutation, ergodic collapse; worst residual {worst:e}"))
}

fn ac3() -> Outcome {
    let values = [1.0, 4.0];
    let obs = |k: usize| values[k];
    let mut worst: f64 = 0.0;
    for d in 1..=2 {
        for l in 2usize..=3 {
            let config: Vec<usize> = (0..l.pow(d as u32)).map(|i| usize::from(i % 3 == 0)).collect();
            let mean = config.iter().map(|&c| values[c]).sum::<f64>() / config.len() as f64;
            let phases = values.iter().map(|&a| Phase::scalar(a)).collect();
            let env = Environment::shift_torus(d, &vec![l; d], config, phases).unwrap();
            let ens = env.enumerate_or_sample(&SamplingPlan::Exact { count: l.pow(d as u32) }).unwrap();
            for r in &ens.members {
                let avg = env.birkhoff_average(r, obs, 1.0, 1.0 / 6.0);
                worst = worst.max((avg - mean).abs());
            }
        }
    }
    ensure(worst <= 1e-14, format!("torus windows deviate by {worst:e}"))?;
    let mut inside = Vec::new();
    for (d, eps) in [(1usize, 1.0 / 500.0), (2, 1.0 / 20.0)] {
        let p = [0.3, 0.7];
        let env = Environment::iid(d, p.to_vec(), 99, values.iter().map(|&a| Phase::scalar(a)).collect()).unwrap();
        let mean: f64 = p.iter().zip(&values).map(|(p, v)| p * v).sum();
        let var: f64 = p.iter().zip(&values).map(|(p, v)| p * (v - mean).powi(2)).sum();
        let cells = (2.0f64 / eps).powi(d as i32);
        let se = (var / cells).sqrt();
        let hits = (0..100u64)
            .filter(|&s| {
                let r = Realization::with_stream(rng::derive(0xB1F, s));
                (env.birkhoff_average(&r, obs, 1.0, eps) - mean).abs() <= 3.0 * se
            })
            .count();
        ensure(hits >= 95, format!("d = {d}: only {hits}/100 seeds within 3 standard errors"))?;
        inside.push(format!("d={d}: {hits}/100"));
    }
    Ok(format!("torus max deviation {worst:e}; i.i.d. within 3 SE: {}", inside.join(", ")))
}

/// Two-cell oracle for `V_hom(F)` of `a |xi|^p / p` on alternating layers: equal flux `a g^{p-1}`.
fn two_cell_power_law(a: [f64; 2], p: f64, f: f64) -> f64 {
    let flux_gap = |g1: f64| a[0] * g1.powf(p - 1.0) - a[1] * (2.0 * f - g1).powf(p - 1.0);
    let (mut lo, mut hi) = (0.0, 2.0 * f);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if flux_gap(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let g1 = 0.5 * (lo + hi);
    let g2 = 2.0 * f - g1;
    0.5 * (a[0] * g1.powf(p) / p + a[1] * g2.powf(p) / p)
}

fn ac4() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let one_d = study(Subcommand::Cell, "two-phase-1d.toml", 2, dir.path())?;
    let harmonic = 2.0 / (1.0 / 1.0 + 1.0 / 4.0);
    let a1 = column(&one_d, "summary", "value")[0];
    ensure((a1 - harmonic).abs() <= 1e-8, format!("1D A_hom {a1} vs {harmonic}"))?;
    let board = study(Subcommand::Cell, "checkerboard.toml", 2, dir.path())?;
    let a2 = column(&board, "summary", "value")[0];
    let dykhne = (1.0f64 * 4.0).sqrt();
    ensure((a2 - dykhne).abs() <= 0.02 * dykhne, format!("checkerboard A_hom {a2} vs {dykhne}"))?;
    let env = Environment::shift_torus(1, &[2], vec![0, 1], vec![Phase::scalar(1.0), Phase::scalar(4.0)]).unwrap();
    let mut worst: f64 = 0.0;
    for f in [0.5, 1.0, 2.0] {
        let got = cell_value(&env, &Integrand::PowerLaw { p: 4.0 }, &[f], 2, 1e-12).map_err(|e| e.to_string())?.value;
        let want = two_cell_power_law([1.0, 4.0], 4.0, f);
        worst = worst.max((got - want).abs());
    }
    ensure(worst <= 1e-6, format!("p = 4 values off by {worst:e}"))?;
    Ok(format!("1D {a1:.12}; checkerboard {a2:.6} (extrapolated); p = 4 max error {worst:e}"))
}

fn ac5() -> Outcome {
    let mut cases: Vec<(String, Environment, Vec<f64>)> = vec![
        ("1D {1,4}".into(), Environment::shift_torus(1, &[2], vec![0, 1], vec![Phase::scalar(1.0), Phase::scalar(4.0)]).unwrap(), vec![1.0, 4.0]),
        (
            "checkerboard {1,4}".into(),
            Environment::shift_torus(2, &[2, 2], vec![0, 1, 1, 0], vec![Phase::scalar(1.0), Phase::scalar(4.0)]).unwrap(),
            vec![1.0, 4.0, 4.0, 1.0],
        ),
    ];
    for seed in 0..4u64 {
        let coefficients = [0.5, 1.0, 3.0, 8.0];
        let env = random_torus(2, 3, &coefficients, seed);
        let config = env.to_spec().config.expect("shift torus");
        cases.push((format!("random 3x3 torus #{seed}"), env, config.iter().map(|&c| coefficients[c]).collect()));
    }
    let mut checked = 0;
    for (name, env, site_values) in &cases {
        let n = site_values.len() as f64;
        let voigt = site_values.iter().sum::<f64>() / n;
        let reuss = n / site_values.iter().map(|a| 1.0 / a).sum::<f64>();
        for k in [1, 2, 4] {
            let h = assemble_ahom(env, k).map_err(|e| format!("{name}, k = {k}: {e}"))?;
            for ev in h.eigenvalues() {
                ensure(
                    ev >= reuss - 1e-10 && ev <= voigt + 1e-10,
                    format!("{name}, k = {k}: eigenvalue {ev} outside [{reuss}, {voigt}]"),
                )?;
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} assembled A_hom inside [harmonic, arithmetic] means"))
}

fn ac6() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cli = study(Subcommand::Korn, "checkerboard.toml", 2, dir.path())?;
    failed_assertions(&cli)?;
    let trials = column(&cli, "korn", "trials")[0];
    ensure(trials == 500.0, format!("{trials} trials"))?;
    let env = random_torus(2, 3, &[1.0, 2.0], 5).refine(2).map_err(|e| e.to_string())?;
    let rep = korn_ratio(&env, 500, 2.0, 11).map_err(|e| e.to_string())?;
    ensure(rep.max_ratio <= 2.0 + 1e-8, format!("ratio {}", rep.max_ratio))?;
    let disc = rep.fourier_discrepancy.unwrap();
    ensure(disc <= 1e-10, format!("Fourier discrepancy {disc:e}"))?;
    Ok(format!(
        "checkerboard max ratio {:.6}, 3x3 torus max ratio {:.6}, Fourier discrepancy {disc:e}",
        column(&cli, "korn", "max_ratio")[0],
        rep.max_ratio
    ))
}

/// Exact minimum of `1/2 int a(x/eps) u'^2 - int u` on (0,1) with zero boundary values,
/// averaged over both arrangements of alternating layers `{a0, a1}`.
fn layered_energy(a: [f64; 2], eps: f64) -> f64 {
    let cells = (1.0 / eps).round() as usize;
    let mut total = 0.0;
    for shift in 0..2 {
        let coef = |j: usize| a[(j + shift) % 2];
        // Simpson is exact for the quadratic integrands below.
        let simpson = |j: usize, g: &dyn Fn(f64) -> f64| {
            let (x0, x1) = (j as f64 * eps, (j + 1) as f64 * eps);
            (x1 - x0) / 6.0 * (g(x0) + 4.0 * g(0.5 * (x0 + x1)) + g(x1))
        };
        let inv: f64 = (0..cells).map(|j| simpson(j, &|_| 1.0) / coef(j)).sum();
        let first: f64 = (0..cells).map(|j| simpson(j, &|t| t) / coef(j)).sum();
        let c = first / inv;
        let mean_u: f64 = (0..cells).map(|j| simpson(j, &|t| (1.0 - t) * (c - t)) / coef(j)).sum();
        total += -0.5 * mean_u;
    }
    0.5 * total
}

fn ac7() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let r = study(Subcommand::ConvergenceStudy, "two-phase-1d.toml", 4, dir.path())?;
    let eps = column(&r, "sweep", "eps");
    ensure(eps.first() == Some(&0.25) && eps.last() == Some(&(1.0 / 64.0)), format!("sweep {eps:?}"))?;
    let gap = column(&r, "sweep", "gap");
    ensure(strictly_decreasing(&gap), format!("gap {gap:?}"))?;
    let shrink = gap[0] / gap[gap.len() - 1];
    ensure(shrink >= 4.0, format!("gap shrinks only {shrink}x"))?;
    let l2 = column(&r, "sweep", "mean_l2_error");
    ensure(strictly_decreasing(&l2), format!("mean l2 error {l2:?}"))?;
    let e_eps = *column(&r, "sweep", "energy_eps").last().unwrap();
    let oracle_eps = layered_energy([1.0, 4.0], 1.0 / 64.0);
    let e_hom = column(&r, "sweep", "energy_hom")[0];
    let oracle_hom = -1.0 / (24.0 * 1.6);
    let rel_eps = (e_eps - oracle_eps).abs() / oracle_eps.abs();
    let rel_hom = (e_hom - oracle_hom).abs() / oracle_hom.abs();
    ensure(rel_eps <= 0.01 && rel_hom <= 0.01, format!("quadrature oracle: eps {rel_eps:e}, hom {rel_hom:e}"))?;
    failed_assertions(&r)?;
    Ok(format!("gap shrinks {shrink:.0}x; relative error vs quadrature oracle {rel_eps:.1e} (eps = 1/64), {rel_hom:.1e} (hom)"))
}

fn ac8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let r = study(Subcommand::ConvergenceStudy, "two-phase-1d.toml", 4, dir.path())?;
    let e = column(&r, "sweep", "energy_eps");
    let rec = column(&r, "sweep", "recovery_energy");
    for (i, (a, b)) in e.iter().zip(&rec).enumerate() {
        ensure(a <= b, format!("row {i}: min E_eps {a} > recovery energy {b}"))?;
    }
    let gap = column(&r, "sweep", "recovery_gap");
    let ratios: Vec<f64> = gap.windows(2).map(|w| w[0] / w[1]).collect();
    ensure(ratios.iter().all(|&q| q >= 1.6), format!("recovery gap ratios {ratios:?}"))?;
    let last = *ratios.last().unwrap();
    ensure((1.8..=2.2).contains(&last), format!("final recovery gap ratio {last}"))?;
    Ok(format!("recovery gap ratios {}", ratios.iter().map(|q| format!("{q:.2}")).collect::<Vec<_>>().join(", ")))
}

fn ac9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let r = study(Subcommand::QuenchedStudy, "iid-1d.toml", 4, dir.path())?;
    let seeds = column(&r, "scatter", "seed");
    ensure(seeds.iter().fold(0.0f64, |a, &b| a.max(b)) == 31.0, "expected 32 seeds")?;
    let eps = column(&r, "sweep", "eps");
    ensure(*eps.last().unwrap() == 1.0 / 64.0, format!("sweep {eps:?}"))?;
    let std = column(&r, "sweep", "std_distance");
    ensure(strictly_decreasing(&std), format!("std of distances {std:?}"))?;
    let mean = *column(&r, "sweep", "mean_energy").last().unwrap();
    let hom = column(&r, "sweep", "energy_hom")[0];
    let harmonic = 2.0 / (1.0 / 1.0 + 1.0 / 4.0);
    ensure((hom + 1.0 / (24.0 * harmonic)).abs() <= 1e-3 * hom.abs(), format!("min E_hom {hom}"))?;
    let rel = (mean - hom).abs() / hom.abs();
    ensure(rel <= 0.02, format!("mean energy {mean} vs {hom}: relative error {rel:e}"))?;
    Ok(format!("std of distances {}; energy error {:.2}%", std.iter().map(|s| format!("{s:.2e}")).collect::<Vec<_>>().join(" > "), 100.0 * rel))
}

fn ac10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let r = study(Subcommand::Flow, "two-phase-1d.toml", 4, dir.path())?;
    failed_assertions(&r)?;
    let time = column(&r, "sweep", "time");
    let l2 = column(&r, "sweep", "l2_error");
    let gap = column(&r, "sweep", "energy_gap");
    for k in 0..3 {
        let pick = |v: &[f64]| v.iter().skip(k).step_by(3).copied().collect::<Vec<f64>>();
        ensure(strictly_decreasing(&pick(&l2)), format!("l2 at t = {}: {:?}", time[k], pick(&l2)))?;
        ensure(strictly_decreasing(&pick(&gap)), format!("energy gap at t = {}: {:?}", time[k], pick(&gap)))?;
    }

    let domain = Domain::unit(1, 256).unwrap();
    let problem = FlowProblem::uniform(Phase::scalar(1.0).with_reaction(Quartic::zero()), &domain);
    let horizon = 0.1;
    let decay = (-2.0 * std::f64::consts::PI.powi(2) * horizon).exp();
    let mut errors = Vec::new();
    let mut worst_inequality = f64::NEG_INFINITY;
    for tau in [0.01, 0.005, 0.0025] {
        let spec = FlowSpec { tau, horizon, initial: InitialDatum::Sine { amplitude: 1.0, mode: 1 }, tol: 1e-12, growth: 10.0 };
        let traj = integrate(&problem, &spec, &spec.initial.field(&domain)).map_err(|e| e.to_string())?;
        worst_inequality = worst_inequality.max(traj.worst_inequality);
        let last = traj.fields.last().unwrap();
        ensure((traj.times.last().unwrap() - horizon).abs() < 1e-12, "horizon not reached")?;
        let err = (0..domain.node_count())
            .map(|i| (last.values[0][i] - decay * (std::f64::consts::PI * domain.node_coord(i)[0]).sin()).abs())
            .fold(0.0, f64::max);
        errors.push(err);
    }
    ensure(worst_inequality <= 1e-10, format!("dissipation inequality excess {worst_inequality:e}"))?;
    let ratios: Vec<f64> = errors.windows(2).map(|w| w[0] / w[1]).collect();
    ensure(ratios.iter().all(|q| (1.8..=2.2).contains(q)), format!("tau-halving ratios {ratios:?}"))?;
    Ok(format!(
        "double-well sweep decreases at T/4, T/2, T; exp-decay errors {} (ratios {})",
        errors.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join(", "),
        ratios.iter().map(|q| format!("{q:.2}")).collect::<Vec<_>>().join(", ")
    ))
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "csv"))
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect();
    out.sort();
    out
}

fn ac11() -> Outcome {
    let runs = [
        (Subcommand::UnfoldTest, "checkerboard.toml"),
        (Subcommand::Cell, "checkerboard.toml"),
        (Subcommand::Korn, "checkerboard.toml"),
        (Subcommand::Minimize, "two-phase-1d.toml"),
        (Subcommand::ConvergenceStudy, "two-phase-1d.toml"),
        (Subcommand::Flow, "two-phase-1d.toml"),
        (Subcommand::Cell, "iid-1d.toml"),
        (Subcommand::QuenchedStudy, "iid-1d.toml"),
    ];
    let mut compared = 0;
    for (cmd, config) in runs {
        let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
        let results: Vec<StudyResult> = [1, 4, 4]
            .iter()
            .zip(&dirs)
            .map(|(&w, d)| study(cmd, config, w, d.path()))
            .collect::<Result<_, _>>()?;
        let json = results[0].deterministic_json();
        let files = csv_files(dirs[0].path());
        ensure(!files.is_empty(), format!("{} wrote no CSV", cmd.name()))?;
        for (r, d) in results.iter().zip(&dirs).skip(1) {
            ensure(r.deterministic_json() == json, format!("{} ({config}): JSON differs", cmd.name()))?;
            ensure(csv_files(d.path()) == files, format!("{} ({config}): CSV differs", cmd.name()))?;
        }
        compared += files.len();
    }
    Ok(format!("8 studies at 1 and 4 workers, twice at 4; {compared} CSV files and all JSON identical"))
}

fn main() {
    let criteria: [(&str, &str, f64, fn() -> Outcome); 11] = [
        ("AC-1", "operator identities", 10.0, ac1),
        ("AC-2", "invariant projection identities", 5.0, ac2),
        ("AC-3", "Birkhoff averages", 30.0, ac3),
        ("AC-4", "cell problems", 300.0, ac4),
        ("AC-5", "Voigt-Reuss sandwich", 300.0, ac5),
        ("AC-6", "stochastic Korn inequality", 60.0, ac6),
        ("AC-7", "static homogenization sweep", 120.0, ac7),
        ("AC-8", "recovery sequence consistency", 120.0, ac8),
        ("AC-9", "quenched concentration", 300.0, ac9),
        ("AC-10", "evolutionary convergence", 600.0, ac10),
        ("AC-11", "determinism across runs and workers", 60.0, ac11),
    ];
    let mut failures = 0;
    for (id, title, budget, check) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let seconds = start.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(detail) if seconds > budget => Err(format!("{detail}; over the {budget} s budget")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {id:<5} {title} [{seconds:.2} s / {budget} s] {detail}"),
            Err(why) => {
                failures += 1;
                println!("FAIL {id:<5} {title} [{seconds:.2} s / {budget} s] {why}");
            }
        }
    }
    println!("{} passed, {failures} failed", 11 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
