use graze_wasm::*;
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn outline_of_the_ball_is_the_unit_circle() {
    let v = parse(domain_outline("ball", 16));
    let (x, y) = (v["x"].as_array().unwrap(), v["y"].as_array().unwrap());
    assert_eq!(x.len(), 17);
    for (a, b) in x.iter().zip(y) {
        let r = a.as_f64().unwrap().hypot(b.as_f64().unwrap());
        assert!((r - 1.0).abs() < 1e-9);
    }
    assert!(parse(domain_outline("torus", 8))["error"].is_string());
}

#[test]
fn trace_reports_the_chord() {
    let v = parse(trace("ball", &[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0]));
    assert_eq!(v["kind"], "interior");
    assert!((v["t_b"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!((v["t_f"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(parse(trace("ball", &[2.0, 0.0, 0.0], &[1.0, 0.0, 0.0]))["error"].is_string());
    assert!(parse(trace("ball", &[0.0, 0.0], &[1.0, 0.0, 0.0]))["error"].is_string());
}

#[test]
fn trace_at_the_witness_is_a_concave_graze() {
    let v = parse(domain_outline("peanut", 8));
    let w = &v["witness"];
    let x: Vec<f64> = w[0].as_array().unwrap().iter().map(|a| a.as_f64().unwrap()).collect();
    let u: Vec<f64> = w[1].as_array().unwrap().iter().map(|a| a.as_f64().unwrap()).collect();
    assert_eq!(parse(trace("peanut", &x, &u))["kind"], "graze_singular");
}

#[test]
fn nu_grows_with_speed() {
    let v = parse(nu_curve(1.0, 6.0, 7));
    let nu: Vec<f64> = v["nu"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!(nu.windows(2).all(|w| w[1] > w[0]));
    assert!(parse(nu_curve(1.5, 6.0, 7))["error"].is_string());
}

#[test]
fn jump_decays_at_the_damping_rate() {
    let v = parse(jump_decay(1.0, 4));
    let t: Vec<f64> = v["t"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    let j: Vec<f64> = v["jump"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    let nu = v["nu_v0"].as_f64().unwrap();
    assert!(j[0] > 0.5 * v["amplitude"].as_f64().unwrap());
    let rate = -(j[3] / j[0]).ln() / (t[3] - t[0]);
    assert!((rate - nu).abs() < 0.02 * nu, "{rate} {nu}");
}
