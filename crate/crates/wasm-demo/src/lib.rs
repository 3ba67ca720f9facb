//! Browser bindings: trace a phase point, plot ν(|v|) and watch a jump
//! decay along a grazing trajectory. Every function returns a JSON string;
//! failures come back as `{"error": "..."}`.

use graze::collision_ops::{collision_frequency, KernelParams, VelocityQuadrature, WeightSet};
use graze::geometry::builtin_domain;
use graze::jump_lab::{
    formation_setup, measure_jump, FittedConstants, FormationSpec, GrazeProbes, JumpMode, JumpSettings, PhasePoint,
};
use graze::mild_solver::{CollisionMode, InflowDatum, KineticField, MildSolver};
use graze::phase_topology::{classify_phase_point, BoundaryCondition};
use graze::Vec3;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn respond(r: Result<Value, String>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

fn vec3(a: &[f64]) -> Result<Vec3, String> {
    match a {
        [x, y, z] => Ok(Vec3::new(*x, *y, *z)),
        _ => Err(format!("expected 3 components, got {}", a.len())),
    }
}

/// Boundary curve of the `x₃ = 0` section, as `{x: [...], y: [...]}`.
#[wasm_bindgen]
pub fn domain_outline(name: &str, points: usize) -> String {
    respond((|| {
        let dom = builtin_domain(name).map_err(|e| e.to_string())?;
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for k in 0..=points {
            let a = std::f64::consts::TAU * k as f64 / points as f64;
            let dir = Vec3::new(a.cos(), a.sin(), 0.0);
            let e = dom.backward_exit(&Vec3::zeros(), &(-dir)).map_err(|e| e.to_string())?;
            xs.push(e.x_b.x);
            ys.push(e.x_b.y);
        }
        Ok(json!({ "name": name, "diameter": dom.diameter, "x": xs, "y": ys, "witness": dom.witnesses.singular }))
    })())
}

/// Grazing class of `(x, v)` with the backward and forward wall hits.
#[wasm_bindgen]
pub fn trace(name: &str, x: &[f64], v: &[f64]) -> String {
    respond((|| {
        let dom = builtin_domain(name).map_err(|e| e.to_string())?;
        let (x, v) = (vec3(x)?, vec3(v)?);
        if dom.psi(&x) > dom.tol.boundary_tol {
            return Err("the point lies outside the domain".into());
        }
        let class = classify_phase_point(&dom, &x, &v).map_err(|e| e.to_string())?;
        let back = dom.backward_exit(&x, &v).map_err(|e| e.to_string())?;
        let fwd = dom.backward_exit(&x, &(-v)).map_err(|e| e.to_string())?;
        Ok(json!({
            "kind": class.kind.as_str(),
            "n_dot_v": class.n_dot_v,
            "t_b": back.t_b,
            "x_b": back.x_b,
            "tangential": back.tangential,
            "t_f": fwd.t_b,
            "x_f": fwd.x_b,
        }))
    })())
}

/// `ν(|v|)` on `count` speeds in `[0, v_max]` for hard-potential exponent
/// `gamma`.
#[wasm_bindgen]
pub fn nu_curve(gamma: f64, v_max: f64, count: usize) -> String {
    respond((|| {
        let d = KernelParams::default();
        let params = KernelParams::new(gamma, d.q0_const).map_err(|e| e.to_string())?;
        let quad = VelocityQuadrature::default();
        let speeds: Vec<f64> = (0..count).map(|i| v_max * i as f64 / (count.max(2) - 1) as f64).collect();
        let nu: Vec<f64> =
            speeds.iter().map(|s| collision_frequency(&params, &quad, &Vec3::new(*s, 0.0, 0.0))).collect();
        Ok(json!({ "speed": speeds, "nu": nu }))
    })())
}

/// Jump of the damped transport solution along the forward trajectory of
/// the peanut's concave graze, for a bump placed behind the witness. Shows
/// the jump forming at `t₀` and decaying like `e^{−ν(v₀)(t−t₀)}`.
#[wasm_bindgen]
pub fn jump_decay(speed: f64, samples: usize) -> String {
    respond((|| {
        let dom = builtin_domain("peanut").map_err(|e| e.to_string())?;
        let (p, w) = (KernelParams::default(), WeightSet::default());
        let consts = FittedConstants { c_nu: 1.6, c_k: 5.9, c_gamma: 0.47, c_w: 5.9, c_beta_tilde: 0.68, c_prime: 1.0 };
        let spec = FormationSpec { speed: Some(speed), ..Default::default() };
        let s = formation_setup(&dom, &p, &w, &spec, Some(&consts)).map_err(|e| e.to_string())?;
        let field = KineticField::new(dom, p, w, s.initial.clone(), BoundaryCondition::Inflow, InflowDatum::Zero)
            .map_err(|e| e.to_string())?;
        let mut cfg = spec.solver;
        cfg.collisions = CollisionMode::DampingOnly;
        let solver = MildSolver::new(field, cfg).map_err(|e| e.to_string())?;
        let (mut times, mut jumps) = (Vec::new(), Vec::new());
        for k in 0..samples.max(2) {
            let dt = 0.9 * s.t_rehit * k as f64 / (samples.max(2) - 1) as f64;
            let settings = JumpSettings {
                mode: JumpMode::SpaceVelocity,
                deltas: vec![0.1 * s.delta_prime, 0.03 * s.delta_prime],
                probes_per_delta: 8,
                seed: k as u64,
                structured: Some(GrazeProbes { x0: s.x0, v0: s.v0, dt }),
                noise_tol: 0.0,
            };
            let c = PhasePoint::new(s.t0 + dt, s.x0 + dt * s.v0, s.v0);
            let est = measure_jump(&solver, c, &settings).map_err(|e| e.to_string())?;
            times.push(s.t0 + dt);
            jumps.push(est.extrapolated_jump);
        }
        Ok(json!({
            "t0": s.t0, "nu_v0": s.nu_v0, "amplitude": s.amplitude, "t": times, "jump": jumps,
        }))
    })())
}
