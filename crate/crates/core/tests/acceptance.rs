//! One pass/fail line per acceptance criterion. Set `GRAZE_ACCEPTANCE` to a
//! comma-separated list of keys (geometry, cycles, operators, smoothing,
//! formation, propagation, continuity, exit_times) to run a subset.
//!
//! Runs without the libtest harness so the report is always printed:
//! `cargo test -p graze-core --test acceptance`.

use graze::collision_ops::*;
use graze::geometry::{builtin_domain, builtin_domains, ExitGradients, ImplicitDomain};
use graze::jump_lab::*;
use graze::mild_solver::*;
use graze::phase_topology::{random_interior_point, random_unit, BoundaryCondition, GrazingKind};
use graze::trajectories::{bounce_cycle, HalfSpaceRule, TrajError, C_MU};
use graze::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::time::{Duration, Instant};

const ALL_BC: [BoundaryCondition; 3] =
    [BoundaryCondition::Inflow, BoundaryCondition::Diffuse, BoundaryCondition::Bounceback];

struct Outcome {
    pass: bool,
    detail: String,
}

fn selected(key: &str) -> bool {
    match std::env::var("GRAZE_ACCEPTANCE") {
        Ok(list) => list.split(',').any(|k| k.trim() == key),
        Err(_) => true,
    }
}

fn criterion(results: &mut Vec<bool>, key: &str, title: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
    if !selected(key) {
        return;
    }
    let start = Instant::now();
    let out = f();
    let elapsed = start.elapsed();
    let pass = out.pass && elapsed < budget;
    println!(
        "{} {title}: {} [{:.1} s, budget {} s]",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    results.push(pass);
}

fn mins(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

// ---------------------------------------------------------------- geometry

fn nontangential_sample(dom: &ImplicitDomain, rng: &mut ChaCha8Rng) -> (Vec3, Vec3) {
    loop {
        let x = random_interior_point(dom, rng);
        let v = rng.gen_range(0.5..2.0) * random_unit(rng);
        let Ok(rec) = dom.backward_exit(&x, &v) else { continue };
        if !rec.tangential && rec.normal_dot_v < -0.05 * v.norm() {
            return (x, v);
        }
    }
}

fn central_differences(dom: &ImplicitDomain, x: &Vec3, v: &Vec3, h: f64) -> [f64; 4] {
    let a: ExitGradients = dom.exit_time_gradients(x, v).unwrap();
    let mut err = [0.0f64; 4];
    let mut num = ExitGradients {
        dtb_dx: Vec3::zeros(),
        dtb_dv: Vec3::zeros(),
        dxb_dx: Default::default(),
        dxb_dv: Default::default(),
    };
    for i in 0..3 {
        let mut e = Vec3::zeros();
        e[i] = h;
        let (p, m) = (dom.backward_exit(&(x + e), v).unwrap(), dom.backward_exit(&(x - e), v).unwrap());
        num.dtb_dx[i] = (p.t_b - m.t_b) / (2.0 * h);
        num.dxb_dx.set_column(i, &((p.x_b - m.x_b) / (2.0 * h)));
        let (p, m) = (dom.backward_exit(x, &(v + e)).unwrap(), dom.backward_exit(x, &(v - e)).unwrap());
        num.dtb_dv[i] = (p.t_b - m.t_b) / (2.0 * h);
        num.dxb_dv.set_column(i, &((p.x_b - m.x_b) / (2.0 * h)));
    }
    let rel = |d: f64, s: f64| d / s.max(1e-8);
    err[0] = rel((a.dtb_dx - num.dtb_dx).norm(), a.dtb_dx.norm());
    err[1] = rel((a.dtb_dv - num.dtb_dv).norm(), a.dtb_dv.norm());
    err[2] = rel((a.dxb_dx - num.dxb_dx).norm(), a.dxb_dx.norm());
    err[3] = rel((a.dxb_dv - num.dxb_dv).norm(), a.dxb_dv.norm());
    err
}

fn geometry_suite() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for dom in builtin_domains() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let (x, v) = nontangential_sample(&dom, &mut rng);
            worst = central_differences(&dom, &x, &v, 1e-6).into_iter().fold(worst, f64::max);
            n += 1;
        }
    }
    Outcome { pass: worst < 1e-4, detail: format!("max rel err {worst:.2e} over {n} samples (< 1e-4)") }
}

// ------------------------------------------------------------------ cycles

fn cycle_suite() -> Outcome {
    let mut exact_velocity = true;
    let (mut worst_alt, mut worst_period): (f64, f64) = (0.0, 0.0);
    for name in ["ball", "peanut"] {
        let dom = builtin_domain(name).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut done = 0;
        while done < 100 {
            let x = random_interior_point(&dom, &mut rng);
            let v = rng.gen_range(0.5..2.0) * random_unit(&mut rng);
            let t = rng.gen_range(1.0..12.0);
            let c = match bounce_cycle(&dom, t, &x, &v, 64) {
                Ok(c) => c,
                Err(TrajError::GrazingCycle { .. }) => continue,
                Err(e) => return Outcome { pass: false, detail: format!("{name}: {e}") },
            };
            let e = &c.entries;
            for (k, entry) in e.iter().enumerate() {
                exact_velocity &= entry.v == if k % 2 == 0 { v } else { -v };
            }
            for k in 1..e.len().saturating_sub(2) {
                worst_alt = worst_alt.max((e[k + 2].x - e[k].x).norm());
            }
            for k in 1..e.len() - 1 {
                worst_period = worst_period.max((e[k].t - e[k + 1].t - c.period_d).abs());
            }
            done += 1;
        }
    }
    let ball = builtin_domain("ball").unwrap();
    let c = bounce_cycle(&ball, 10.0, &Vec3::zeros(), &Vec3::x(), 64).unwrap();
    let chord = c.entries[1].t == 9.0 && c.entries[1].x == Vec3::new(-1.0, 0.0, 0.0) && c.period_d == 2.0;
    Outcome {
        pass: exact_velocity && worst_alt < 1e-8 && worst_period < 1e-8 && chord,
        detail: format!(
            "velocity alternation exact: {exact_velocity}, position alternation {worst_alt:.1e}, period {worst_period:.1e} \
             (< 1e-8) on 200 queries; unit-ball chord t1 = 9, x1 = (-1, 0, 0), period 2: {chord}"
        ),
    }
}

// --------------------------------------------------------------- operators

/// Smooth, rapidly decaying test function `(1 + a·u) e^{−|u − c|²/s²}`.
#[derive(Clone, Copy)]
struct Smooth {
    a: Vec3,
    c: Vec3,
    s: f64,
}

impl Smooth {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let r =
            |rng: &mut ChaCha8Rng, s: f64| Vec3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s));
        Smooth { a: r(rng, 0.3), c: r(rng, 0.5), s: rng.gen_range(0.8..1.4) }
    }

    fn eval(&self, u: &Vec3) -> f64 {
        (1.0 + self.a.dot(u)) * (-(u - self.c).norm_squared() / (self.s * self.s)).exp()
    }
}

fn operator_suite() -> Outcome {
    let p = KernelParams::default();
    let q = VelocityQuadrature::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);

    // gain term at equilibrium
    let mut eq_err: f64 = 0.0;
    for k in 0..5 {
        let v = (0.5 * k as f64) * random_unit(&mut rng);
        let gain = q_plus_direct(&p, &q, mu, mu, &v);
        let nu_mu = collision_frequency(&p, &q, &v) * mu(&v);
        eq_err = eq_err.max((gain - nu_mu).abs() / nu_mu);
    }

    // Carleman form against the direct form
    let rule = CarlemanRule::default();
    let mut carleman_err: f64 = 0.0;
    for _ in 0..10 {
        let (phi, psi) = (Smooth::random(&mut rng), Smooth::random(&mut rng));
        let vs: Vec<Vec3> = (0..5).map(|_| rng.gen_range(0.0..1.5) * random_unit(&mut rng)).collect();
        let direct: Vec<f64> = vs.iter().map(|v| q_plus_direct(&p, &q, |u| phi.eval(u), |u| psi.eval(u), v)).collect();
        let floor = 1e-3 * direct.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        for (v, d) in vs.iter().zip(&direct) {
            let c = q_plus_carleman(&p, &rule, |u| psi.eval(u), |u| phi.eval(u), v).unwrap();
            carleman_err = carleman_err.max((c - d).abs() / d.abs().max(floor));
        }
    }

    // c_μ from the wall flux ∫_{n·v>0} μ (n·v) dv of a fine half-space rule
    let n = Vec3::new(0.3, -0.4, 0.5).normalize();
    let rule_hs = HalfSpaceRule::new(&n, 32768);
    let flux = rule_hs.integrate(|_| 1.0) / C_MU;
    let c_mu = 1.0 / flux;
    let c_mu_err = (c_mu - 1.0 / (2.0 * PI)).abs();

    // change of variables on 100 random configurations
    let mut cov_err: f64 = 0.0;
    let mut shrink = true;
    for _ in 0..100 {
        let r =
            |rng: &mut ChaCha8Rng, s: f64| Vec3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s));
        let v = r(&mut rng, 3.0);
        let vp = r(&mut rng, 3.0);
        let vbar = v + r(&mut rng, 0.5);
        let vpp = cov_shift(&v, &vbar, &vp);
        // the planes E_{vv'} and E_{v̄v''} are parallel
        let n1 = (vp - v).normalize();
        let n2 = (vpp - vbar).normalize();
        cov_err = cov_err.max(n1.cross(&n2).norm());
        // a point of E_{vv'} is carried to E_{v̄v''}
        let (e1, e2, _) = hyperplane_frame(&v, &vp).unwrap();
        let v1 = v + rng.gen_range(-4.0..4.0) * e1 + rng.gen_range(-4.0..4.0) * e2;
        let v1pp = cov_plane(&v, &vp, &vbar, &v1).unwrap();
        cov_err = cov_err.max((v1pp - vbar).dot(&n2).abs());
        shrink &= (v1pp - v1).norm() <= (vbar - v).norm() + 1e-11;
    }
    Outcome {
        pass: eq_err < 1e-3 && carleman_err < 2e-2 && c_mu_err < 1e-6 && cov_err < 1e-11 && shrink,
        detail: format!(
            "Q+(mu,mu) vs nu*mu {eq_err:.1e} (< 1e-3); Carleman vs direct {carleman_err:.1e} (< 2e-2, 10 pairs x 5 v); \
             |c_mu - 1/(2pi)| {c_mu_err:.1e} (< 1e-6); plane identities {cov_err:.1e} (< 1e-11), |v1''-v1'| <= |vbar-v|: {shrink}"
        ),
    }
}

// --------------------------------------------------------------- smoothing

/// Max adjacent jump of `Q₊(F, F)` on a fine line crossing the plane
/// `{u₁ = c}` where `F` jumps, relative to the sup on the line.
fn gain_line_jump(q: &VelocityQuadrature, plane: f64, f: &(impl Fn(&Vec3) -> f64 + Sync)) -> f64 {
    let p = KernelParams::default();
    let line: Vec<f64> = (0..=100).map(|i| plane - 0.005 + 1e-4 * i as f64).collect();
    let vals: Vec<f64> = line.iter().map(|s| q_plus_direct(&p, q, f, f, &Vec3::new(*s, 0.3, -0.2))).collect();
    let sup = vals.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    vals.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max) / sup
}

fn smoothing_check() -> Outcome {
    let plane = 0.2;
    let f = move |u: &Vec3| (-0.5 * u.norm_squared()).exp() * if u.x > plane { 1.5 } else { 1.0 };
    // the input jumps by a third of its local value across the plane
    let input_jump = {
        let (a, b) = (f(&Vec3::new(plane - 1e-9, 0.3, -0.2)), f(&Vec3::new(plane + 1e-9, 0.3, -0.2)));
        (b - a).abs() / a.max(b)
    };
    let rule = |n_r, n_p, n_a, o_p, o_a| VelocityQuadrature {
        scheme: QuadScheme::Tensor { n_r, n_polar: n_p, n_azimuth: n_a },
        omega_polar: o_p,
        omega_azimuth: o_a,
        cutoff_n: 8.0,
    };
    let coarse = gain_line_jump(&rule(16, 6, 12, 6, 12), plane, &f);
    let default = gain_line_jump(&VelocityQuadrature::default(), plane, &f);
    let fine = gain_line_jump(&rule(48, 16, 32, 16, 32), plane, &f);
    let ratio = default / input_jump;
    Outcome {
        pass: ratio < 0.05 && default < coarse && fine < default,
        detail: format!(
            "output/input jump {ratio:.2e} at default rule (< 5e-2); max adjacent jump coarse {coarse:.2e} > default \
             {default:.2e} > fine {fine:.2e}"
        ),
    }
}

// --------------------------------------------------------------- formation

fn fitted(dom: &ImplicitDomain) -> FittedConstants {
    fit_constants(dom, &KernelParams::default(), &WeightSet::default(), &SolverConfig::coarse(), 40, 3).unwrap()
}

fn formation_check(dom: &ImplicitDomain, consts: &FittedConstants, bc: BoundaryCondition) -> Outcome {
    let spec = FormationSpec { bc, ..Default::default() };
    match formation_experiment(dom, &KernelParams::default(), &WeightSet::default(), &spec, Some(consts)) {
        Ok(r) => {
            let amp = r.setup.amplitude;
            Outcome {
                pass: r.pass && r.trajectory_in_d && r.control_in_c,
                detail: format!(
                    "{}: jump/sup|h0| {:.4} (>= {} - noise), noise {:.1e} (<= 0.1), control {:.1e} (< 0.05), \
                     t0 {:.4}, |v0| {}, delta' {:.2e}",
                    bc.as_str(),
                    r.jump.extrapolated_jump / amp,
                    r.setup.required_factor,
                    r.noise_budget / amp,
                    r.control.extrapolated_jump / amp,
                    r.setup.t0,
                    r.setup.v0.norm(),
                    r.setup.delta_prime
                ),
            }
        }
        Err(e) => Outcome { pass: false, detail: format!("{}: {e}", bc.as_str()) },
    }
}

// ------------------------------------------------------------- propagation

fn propagation_check(dom: &ImplicitDomain, consts: &FittedConstants) -> Outcome {
    let (p, w) = (KernelParams::default(), WeightSet::default());
    let form = match formation_experiment(dom, &p, &w, &FormationSpec::default(), Some(consts)) {
        Ok(r) if r.pass => r,
        Ok(_) => return Outcome { pass: false, detail: "formation did not pass".into() },
        Err(e) => return Outcome { pass: false, detail: e.to_string() },
    };
    let mut parts = Vec::new();
    let mut pass = true;
    for collisionless in [true, false] {
        let spec = PropagationSpec { collisionless, ..Default::default() };
        match propagation_experiment(dom, &p, &w, &form, &spec) {
            Ok(r) => {
                let decreasing = r.jumps.windows(2).all(|j| j[1] < j[0]);
                let ok = r.pass && decreasing && r.jumps.len() == 7;
                pass &= ok;
                parts.push(if collisionless {
                    format!(
                        "damping only: rate {:.5} vs nu(v0) {:.5} (rel {:.1e} < 2e-2)",
                        r.fitted_rate,
                        r.nu_v0,
                        (r.fitted_rate - r.nu_v0).abs() / r.nu_v0
                    )
                } else {
                    format!(
                        "full: rate {:.4} in band [{:.4}, {:.4}], all {} jumps > 0: {}, under envelope e^(-{:.3}(t-t0)): {}",
                        r.fitted_rate,
                        r.rate_band[0],
                        r.rate_band[1],
                        r.jumps.len() - 1,
                        r.positive,
                        r.envelope_rate,
                        r.envelope_ok
                    )
                });
            }
            Err(e) => {
                pass = false;
                parts.push(e.to_string());
            }
        }
    }
    Outcome { pass, detail: parts.join("; ") }
}

// -------------------------------------------------------------- continuity

fn continuity_check() -> Outcome {
    let (p, w) = (KernelParams::default(), WeightSet::default());
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, before_exit_only) in [("ball", false), ("peanut", true)] {
        let dom = builtin_domain(name).unwrap();
        for bc in ALL_BC {
            let profile = SpatialProfile::Gaussian { center: Vec3::new(0.1, 0.0, 0.0), width: 0.5 };
            let init = InitialData::Equilibrium { amplitude: 1e-2, profile: profile.clone() };
            let inflow = if bc == BoundaryCondition::Inflow {
                InflowDatum::Maxwellian { amplitude: 1e-2, profile }
            } else {
                InflowDatum::Zero
            };
            let field = KineticField::new(dom.clone(), p, w, init.clone(), bc, inflow).unwrap();
            let solver = MildSolver::new(field, SolverConfig::coarse()).unwrap();
            let centers = continuity_centers(&dom, bc, 20, 1.0, (0.3, 2.0), before_exit_only, 9).unwrap();
            match continuity_scan(&solver, bc, &centers, init.sup_norm(&w), &ContinuitySpec::default()) {
                Ok(r) => {
                    pass &= r.pass;
                    let min_r2 = r.entries.iter().filter_map(|e| e.r2).fold(1.0, f64::min);
                    parts.push(format!(
                        "{name}/{}: slope >= {:.3}, R2 >= {min_r2:.3}, final <= {:.1e}",
                        bc.as_str(),
                        r.min_slope.unwrap_or(f64::NAN),
                        r.max_final_rel
                    ));
                }
                Err(e) => {
                    pass = false;
                    parts.push(format!("{name}/{}: {e}", bc.as_str()));
                }
            }
        }
    }
    Outcome { pass, detail: format!("20 points each, {} (slope >= 0.8, R2 > 0.9, final < 1e-3)", parts.join("; ")) }
}

// -------------------------------------------------------------- exit times

fn exit_time_check() -> Outcome {
    let dom = builtin_domain("peanut").unwrap();
    let (x0, v0) = dom.witnesses.singular.unwrap();
    let s = exit_time_probes(&dom, &x0, &v0, 0.2, 1e-2, 12).unwrap();
    let eps0 = 1.0;
    let min_gap = s.gaps.iter().cloned().fold(f64::INFINITY, f64::min);
    let (z, v) = dom.witnesses.inflection_in.unwrap();
    let i = exit_time_probes(&dom, &z, &v, 0.2, 1e-2, 20).unwrap();
    let decreasing = i.gaps.windows(2).all(|g| g[1] < g[0]);
    let last = *i.gaps.last().unwrap();
    Outcome {
        pass: s.kind == GrazingKind::GrazeSingular
            && min_gap >= eps0
            && i.kind == GrazingKind::GrazeInflectionIn
            && decreasing
            && last < 1e-2 * i.gaps[0].max(1.0),
        detail: format!(
            "concave graze: min gap {min_gap:.4} over 12 probes (>= eps0 = {eps0}); inward inflection: gap {:.3e} -> {last:.3e}, \
             decreasing: {decreasing}",
            i.gaps[0]
        ),
    }
}

fn main() {
    let mut results = Vec::new();
    criterion(&mut results, "geometry", "geometry suite", Duration::from_secs(30), geometry_suite);
    criterion(&mut results, "cycles", "bounce-cycle suite", Duration::from_secs(10), cycle_suite);
    criterion(&mut results, "operators", "collision-operator suite", mins(10), operator_suite);
    criterion(&mut results, "smoothing", "Q+ smoothing", mins(2), smoothing_check);
    let peanut = builtin_domain("peanut").unwrap();
    let consts = if selected("formation") || selected("propagation") { Some(fitted(&peanut)) } else { None };
    if let Some(c) = &consts {
        for bc in ALL_BC {
            criterion(&mut results, "formation", "formation", mins(30), || formation_check(&peanut, c, bc));
        }
        criterion(&mut results, "propagation", "propagation", mins(45), || propagation_check(&peanut, c));
    }
    criterion(&mut results, "continuity", "continuity", mins(30), continuity_check);
    criterion(&mut results, "exit_times", "exit-time discontinuity", mins(1), exit_time_check);
    let failed = results.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
