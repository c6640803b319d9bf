use serde_json::Value;
use stoch_unfold_demo::{checkerboard, flow, sweep};

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn checkerboard_values_decrease_towards_the_geometric_mean() {
    let v = parse(checkerboard(1.0, 4.0, 4).unwrap());
    let values: Vec<f64> = v["values"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(values.len(), 4);
    assert!(values.windows(2).all(|w| w[1] <= w[0]));
    assert!((v["extrapolated"].as_f64().unwrap() - 2.0).abs() < 0.04);
}

#[test]
fn sweep_and_flow_report_their_curves() {
    let s = parse(sweep(1.0, 4.0, 3).unwrap());
    assert_eq!(s["gap"].as_array().unwrap().len(), 3);
    assert!(s["passed"].as_bool().unwrap());
    let f = parse(flow(1.0, 4.0, 1.5, 0.01, 0.1).unwrap());
    let e: Vec<f64> = f["energy"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(e.len(), 11);
    assert!(e.windows(2).all(|w| w[1] <= w[0] + 1e-10));
    assert!(flow(1.0, 4.0, 1.0, 5.0, 10.0).is_err());
}
