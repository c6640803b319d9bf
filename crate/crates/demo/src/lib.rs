//! WebAssembly bindings for `www/index.html`. Every export returns a JSON string.

use serde_json::json;
use stoch_unfold::cell::{corrector_quadratic, extrapolate};
use stoch_unfold::flow::{integrate, FlowProblem, FlowSpec, InitialDatum};
use stoch_unfold::integrand::Integrand;
use stoch_unfold::varmin::{convergence_study, ConvergenceConfig, EnergySpec, HomOptions};
use stoch_unfold::{Domain, Environment, Phase};
use wasm_bindgen::prelude::*;

fn layers(a: f64, b: f64) -> Result<Environment, String> {
    Environment::shift_torus(1, &[2], vec![0, 1], vec![Phase::scalar(a), Phase::scalar(b)]).map_err(|e| e.to_string())
}

/// `A_hom e_1 . e_1` of the two-phase checkerboard at refinements `1, 2, ..., 2^(levels-1)`.
pub fn checkerboard(a: f64, b: f64, levels: u32) -> Result<String, String> {
    let env = Environment::shift_torus(2, &[2, 2], vec![0, 1, 1, 0], vec![Phase::scalar(a), Phase::scalar(b)])
        .map_err(|e| e.to_string())?;
    let ks: Vec<usize> = (0..levels.clamp(1, 5)).map(|i| 1 << i).collect();
    let values = ks
        .iter()
        .map(|&k| corrector_quadratic(&env, &[1.0, 0.0], k).map(|c| c.value))
        .collect::<Result<Vec<f64>, _>>()
        .map_err(|e| e.to_string())?;
    Ok(json!({ "k": ks, "values": values, "extrapolated": extrapolate(&values), "geometric_mean": (a * b).sqrt() }).to_string())
}

/// Energy gap of `-(a(x/eps) u')' = 1` on layered media for `eps = 1/4, ..., 1/2^(levels+1)`.
pub fn sweep(a: f64, b: f64, levels: u32) -> Result<String, String> {
    let env = layers(a, b)?;
    let eps: Vec<f64> = (0..levels.clamp(1, 6)).map(|i| 0.25 / f64::from(1u32 << i)).collect();
    let cfg = ConvergenceConfig {
        spec: EnergySpec::new(Integrand::Quadratic).with_load(vec![1.0]),
        n: 256,
        eps,
        hom: HomOptions::default(),
        tol: 1e-11,
        samples: 1,
        seed: 0,
    };
    let r = convergence_study(&env, &cfg).map_err(|e| e.to_string())?;
    let t = r.table("sweep").ok_or("missing sweep")?;
    Ok(json!({
        "eps": t.column("eps"),
        "gap": t.column("gap"),
        "energy_eps": t.column("energy_eps"),
        "energy_hom": t.column("energy_hom"),
        "passed": r.passed(),
    })
    .to_string())
}

/// Homogenized Allen-Cahn energy along the implicit Euler trajectory.
pub fn flow(a: f64, b: f64, amplitude: f64, tau: f64, horizon: f64) -> Result<String, String> {
    let env = layers(a, b)?;
    let spec = FlowSpec { tau, horizon, initial: InitialDatum::Sine { amplitude, mode: 1 }, tol: 1e-10, growth: 10.0 };
    spec.validate(&env).map_err(|e| e.to_string())?;
    let domain = Domain::unit(1, 128).map_err(|e| e.to_string())?;
    let problem = FlowProblem::homogenized(&env, &domain, &HomOptions::default()).map_err(|e| e.to_string())?;
    let traj = integrate(&problem, &spec, &spec.initial.field(&domain)).map_err(|e| e.to_string())?;
    Ok(json!({ "time": traj.times, "energy": traj.energies, "worst_inequality": traj.worst_inequality }).to_string())
}

#[wasm_bindgen(js_name = checkerboard)]
pub fn checkerboard_js(a: f64, b: f64, levels: u32) -> Result<String, JsError> {
    checkerboard(a, b, levels).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = sweep)]
pub fn sweep_js(a: f64, b: f64, levels: u32) -> Result<String, JsError> {
    sweep(a, b, levels).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = flow)]
pub fn flow_js(a: f64, b: f64, amplitude: f64, tau: f64, horizon: f64) -> Result<String, JsError> {
    flow(a, b, amplitude, tau, horizon).map_err(|e| JsError::new(&e))
}
