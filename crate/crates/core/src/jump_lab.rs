//! Jump functionals of phase-space fields and the formation, propagation
//! and continuity experiments built on them.
//!
//! The jump at a point is the limit over shrinking balls of the largest
//! difference between two admissible probe values, so for a finite probe
//! set it is `max h − min h`. Probes on the grazing set are refused.

use crate::collision_ops::{
    collision_frequency, fit_operator_constants, sqrt_mu, KernelOperator, KernelParams, WeightSet,
};
use crate::geometry::{GeomError, ImplicitDomain, Vec3};
use crate::mild_solver::{
    fit_c_prime, random_queries, Bump, CollisionMode, InflowDatum, InitialData, KineticField, MildSolver, Query,
    SolverConfig, SolverError,
};
use crate::phase_topology::{
    classify_phase_point, fibonacci_sphere, in_grazing_set, membership, random_interior_point, random_unit,
    BoundaryCondition, GrazingKind, SetMembership, TopoError,
};
use crate::trajectories::{fit_c_beta, w_tilde_flux};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum JumpError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Topology(#[from] TopoError),
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error("{refused} of {total} probes refused")]
    InsufficientProbes { refused: usize, total: usize },
    #[error("invalid witness: {0}")]
    WitnessInvalid(String),
    #[error("fitted constants are required")]
    ConstantsMissing,
    #[error("sample time {t} is past the wall re-hit at {limit}")]
    TrajectoryExitsEarly { t: f64, limit: f64 },
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
}

/// Anything that can be evaluated on phase space.
pub trait PhaseField: Sync {
    fn domain(&self) -> &ImplicitDomain;
    fn value(&self, t: f64, x: &Vec3, v: &Vec3) -> Result<f64, SolverError>;
}

impl PhaseField for MildSolver {
    fn domain(&self) -> &ImplicitDomain {
        MildSolver::domain(self)
    }

    fn value(&self, t: f64, x: &Vec3, v: &Vec3) -> Result<f64, SolverError> {
        self.eval(t, x, v)
    }
}

/// A field given by a closure.
pub struct FnField<F> {
    pub domain: ImplicitDomain,
    pub f: F,
}

impl<F: Fn(f64, &Vec3, &Vec3) -> f64 + Sync> PhaseField for FnField<F> {
    fn domain(&self) -> &ImplicitDomain {
        &self.domain
    }

    fn value(&self, t: f64, x: &Vec3, v: &Vec3) -> Result<f64, SolverError> {
        Ok((self.f)(t, x, v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub t: f64,
    pub x: Vec3,
    pub v: Vec3,
}

impl PhasePoint {
    pub fn new(t: f64, x: Vec3, v: Vec3) -> Self {
        PhasePoint { t, x, v }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpMode {
    SpaceVelocity,
    TimeSpaceVelocity,
}

/// Probe pairs straddling the forward trajectory of a concave grazing pair
/// `(x0, v0)`, taken `dt` after the graze: interior points offset along the
/// inward normal keep the long backward ray, boundary points just ahead of
/// `x0` with velocity tilted inward are incoming and see the wall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrazeProbes {
    pub x0: Vec3,
    pub v0: Vec3,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpSettings {
    pub mode: JumpMode,
    /// Decreasing probe radii.
    pub deltas: Vec<f64>,
    pub probes_per_delta: usize,
    pub seed: u64,
    pub structured: Option<GrazeProbes>,
    /// Absolute probe noise used by the monotonicity check.
    pub noise_tol: f64,
}

impl JumpSettings {
    pub fn isotropic(mode: JumpMode, deltas: Vec<f64>, probes_per_delta: usize, seed: u64) -> Self {
        JumpSettings { mode, deltas, probes_per_delta, seed, structured: None, noise_tol: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub point: PhasePoint,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpEstimate {
    pub center: PhasePoint,
    pub mode: JumpMode,
    pub delta_sequence: Vec<f64>,
    pub sup_gaps: Vec<f64>,
    /// Average of the last two gaps.
    pub extrapolated_jump: f64,
    /// Half the spread of the last two gaps.
    pub uncertainty: f64,
    pub probe_count: usize,
    pub refused: usize,
    pub monotone: bool,
    /// Probes with the largest and smallest value at the smallest radius.
    pub extremes: (Probe, Probe),
}

fn inward_normal(dom: &ImplicitDomain, x: &Vec3) -> Result<Vec3, GeomError> {
    Ok(-dom.outward_normal(x)?)
}

fn graze_probes(dom: &ImplicitDomain, t: f64, g: &GrazeProbes, delta: f64, count: usize) -> Vec<PhasePoint> {
    let speed = g.v0.norm();
    let vhat = g.v0 / speed;
    let r = delta / (2.0 * (1.0 + g.dt));
    let n_in = count / 2;
    let n_bd = count - n_in;
    let mut out = Vec::with_capacity(count);
    if let Ok(inward) = inward_normal(dom, &g.x0) {
        for k in 0..n_in {
            let a = r * (k + 1) as f64 / n_in as f64;
            let x = g.x0 + a * inward;
            out.push(PhasePoint::new(t, x + g.dt * g.v0, g.v0));
        }
    }
    for k in 0..n_bd {
        let b = r * (k + 1) as f64 / n_bd as f64;
        let Ok(xb) = dom.project_to_boundary(&(g.x0 + b * vhat)) else { continue };
        let Ok(inward) = inward_normal(dom, &xb) else { continue };
        let v = speed * (vhat + (b / speed) * inward).normalize();
        out.push(PhasePoint::new(t, xb + g.dt * v, v));
    }
    out
}

/// Offset in the unit ball of `(t, x, v)` space; probes at radius δ use
/// `center + δ·offset`, so the same pattern is reused across radii.
struct UnitOffset {
    dx: Vec3,
    dv: Vec3,
    dt: f64,
}

fn unit_offset(rng: &mut ChaCha8Rng) -> UnitOffset {
    UnitOffset {
        dx: rng.gen::<f64>().cbrt() * random_unit(rng),
        dv: rng.gen::<f64>().cbrt() * random_unit(rng),
        dt: rng.gen_range(-1.0..1.0),
    }
}

fn isotropic_probe(
    dom: &ImplicitDomain,
    c: &PhasePoint,
    mode: JumpMode,
    delta: f64,
    first: &UnitOffset,
    rng: &mut ChaCha8Rng,
) -> Option<PhasePoint> {
    let mut redraw;
    let mut u = first;
    for _ in 0..64 {
        let x = c.x + delta * u.dx;
        if dom.psi(&x) <= dom.tol.boundary_tol {
            let t = match mode {
                JumpMode::SpaceVelocity => c.t,
                JumpMode::TimeSpaceVelocity => (c.t + delta * u.dt).abs(),
            };
            return Some(PhasePoint::new(t, x, c.v + delta * u.dv));
        }
        redraw = unit_offset(rng);
        u = &redraw;
    }
    None
}

fn evaluate(field: &dyn PhaseField, p: &PhasePoint) -> Option<f64> {
    match in_grazing_set(field.domain(), &p.x, &p.v) {
        Ok(false) => field.value(p.t, &p.x, &p.v).ok(),
        _ => None,
    }
}

/// Jump estimate at `center`: for each radius, half the probes from the
/// structured family (when given) and half isotropic in the ball. The
/// isotropic pattern is drawn once and scaled with the radius, so for a
/// smooth field the gaps shrink in proportion to δ.
pub fn measure_jump(
    field: &dyn PhaseField,
    center: PhasePoint,
    settings: &JumpSettings,
) -> Result<JumpEstimate, JumpError> {
    let deltas = &settings.deltas;
    if deltas.is_empty() || deltas.windows(2).any(|w| w[1] >= w[0]) || deltas.iter().any(|d| !(*d > 0.0)) {
        return Err(JumpError::InvalidSettings("deltas must be positive and decreasing".into()));
    }
    if settings.probes_per_delta < 2 {
        return Err(JumpError::InvalidSettings("need at least two probes per radius".into()));
    }
    let dom = field.domain();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let n_struct = if settings.structured.is_some() { settings.probes_per_delta / 2 } else { 0 };
    let offsets: Vec<UnitOffset> = (n_struct..settings.probes_per_delta).map(|_| unit_offset(&mut rng)).collect();
    let mut plan: Vec<(usize, Option<PhasePoint>)> = Vec::new();
    for (i, &delta) in deltas.iter().enumerate() {
        if let Some(g) = &settings.structured {
            let ps = graze_probes(dom, center.t, g, delta, n_struct);
            for k in 0..n_struct {
                plan.push((i, ps.get(k).copied()));
            }
        }
        for u in &offsets {
            plan.push((i, isotropic_probe(dom, &center, settings.mode, delta, u, &mut rng)));
        }
    }
    let values: Vec<Option<f64>> = plan.par_iter().map(|(_, p)| p.as_ref().and_then(|p| evaluate(field, p))).collect();

    let total = plan.len();
    let refused = values.iter().filter(|v| v.is_none()).count();
    if 2 * refused > total {
        return Err(JumpError::InsufficientProbes { refused, total });
    }
    let mut sup_gaps = Vec::with_capacity(deltas.len());
    let mut extremes = None;
    for i in 0..deltas.len() {
        let probes: Vec<Probe> = plan
            .iter()
            .zip(&values)
            .filter(|((j, _), _)| *j == i)
            .filter_map(|((_, p), h)| Some(Probe { point: (*p)?, h: (*h)? }))
            .collect();
        if probes.len() < 2 {
            return Err(JumpError::InsufficientProbes { refused, total });
        }
        let hi = *probes.iter().max_by(|a, b| a.h.total_cmp(&b.h)).unwrap();
        let lo = *probes.iter().min_by(|a, b| a.h.total_cmp(&b.h)).unwrap();
        sup_gaps.push(hi.h - lo.h);
        extremes = Some((hi, lo));
    }
    let n = sup_gaps.len();
    let (extrapolated_jump, uncertainty) = if n >= 2 {
        (0.5 * (sup_gaps[n - 2] + sup_gaps[n - 1]), 0.5 * (sup_gaps[n - 2] - sup_gaps[n - 1]).abs())
    } else {
        (sup_gaps[0], 0.0)
    };
    let monotone = sup_gaps.windows(2).all(|w| w[1] <= w[0] + 2.0 * settings.noise_tol);
    Ok(JumpEstimate {
        center,
        mode: settings.mode,
        delta_sequence: deltas.clone(),
        sup_gaps,
        extrapolated_jump,
        uncertainty,
        probe_count: total - refused,
        refused,
        monotone,
        extremes: extremes.unwrap(),
    })
}

/// Fitted bounds used to pick the formation time, including the uniform
/// bound `C′` of the solution by its data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedConstants {
    pub c_nu: f64,
    pub c_k: f64,
    pub c_gamma: f64,
    pub c_w: f64,
    pub c_beta_tilde: f64,
    pub c_prime: f64,
}

impl FittedConstants {
    /// The operator constants under their report names.
    pub fn table(&self) -> BTreeMap<&'static str, f64> {
        BTreeMap::from([
            ("C_nu", self.c_nu),
            ("C_k", self.c_k),
            ("C_Gamma", self.c_gamma),
            ("C_w", self.c_w),
            ("C_beta_tilde", self.c_beta_tilde),
        ])
    }
}

pub const FIT_V_MAX: f64 = 8.0;
pub const FIT_SPEED_SAMPLES: usize = 17;
pub const FIT_RHOS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
pub const FIT_T_MAX: f64 = 0.5;

/// Operator constants over `|v| ≤ 8`, `C̃_β` over ρ ∈ {½, 1, 2, 4, ρ}, and
/// `C′` as the largest ratio `sup|h| / sup|h₀|` over the three wall laws
/// for a small bump, never below 1 since `h(0) = h₀`.
pub fn fit_constants(
    domain: &ImplicitDomain,
    params: &KernelParams,
    weights: &WeightSet,
    config: &SolverConfig,
    queries: usize,
    seed: u64,
) -> Result<FittedConstants, JumpError> {
    let kop = KernelOperator::new(*params, *weights, config.vel_quad.kernel);
    let op = fit_operator_constants(params, weights, &config.vel_quad.nu, &kop, FIT_V_MAX, FIT_SPEED_SAMPLES);
    let c_beta_tilde = fit_c_beta(weights.beta, &[FIT_RHOS[0], FIT_RHOS[1], FIT_RHOS[2], FIT_RHOS[3], weights.rho]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xc = if domain.psi(&Vec3::zeros()) < 0.0 { Vec3::zeros() } else { random_interior_point(domain, &mut rng) };
    let radius = 0.9 * clearance(domain, &xc, 0.3);
    let vc = Vec3::new(0.6, 0.2, 0.0);
    let init = InitialData::Bumps { bumps: vec![Bump { x_center: xc, v_center: vc, radius, amplitude: 1e-2 }] };
    let mut qs: Vec<Query> = random_queries(domain, queries / 2, FIT_T_MAX, (0.2, 2.0), seed);
    for _ in 0..queries - queries / 2 {
        let t = rng.gen_range(0.0..FIT_T_MAX);
        let v = vc + 0.5 * radius * random_unit(&mut rng);
        let x = xc + t * v + 0.5 * radius * random_unit(&mut rng);
        if domain.psi(&x) < 0.0 && matches!(in_grazing_set(domain, &x, &v), Ok(false)) {
            qs.push((t, x, v));
        }
    }
    let mut c_prime: f64 = 1.0;
    for bc in [BoundaryCondition::Inflow, BoundaryCondition::Diffuse, BoundaryCondition::Bounceback] {
        let field = KineticField::new(domain.clone(), *params, *weights, init.clone(), bc, InflowDatum::Zero)?;
        let solver = MildSolver::new(field, *config)?;
        c_prime = c_prime.max(fit_c_prime(&solver, &qs)?);
    }
    Ok(FittedConstants { c_nu: op.c_nu, c_k: op.c_k, c_gamma: op.c_gamma, c_w: op.c_w, c_beta_tilde, c_prime })
}

/// Largest `r ≤ r_max` with the sphere of radius `r` (and `r/2`) around `c`
/// strictly inside the domain, by bisection on sampled directions.
pub fn clearance(dom: &ImplicitDomain, c: &Vec3, r_max: f64) -> f64 {
    let dirs = fibonacci_sphere(256);
    let tol = dom.tol.boundary_tol;
    let inside = |r: f64| dirs.iter().all(|d| dom.psi(&(c + r * d)) < -tol && dom.psi(&(c + 0.5 * r * d)) < -tol);
    if dom.psi(c) >= -tol {
        return 0.0;
    }
    if inside(r_max) {
        return r_max;
    }
    let (mut lo, mut hi) = (0.0, r_max);
    for _ in 0..50 {
        let m = 0.5 * (lo + hi);
        if inside(m) {
            lo = m;
        } else {
            hi = m;
        }
    }
    lo
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormationSpec {
    pub bc: BoundaryCondition,
    /// Radius of the boundary chart around the witness.
    pub graph_radius: f64,
    /// `sup|h₀|`.
    pub amplitude: f64,
    /// `|v₀|`; for diffuse walls it is chosen from the constants when unset.
    pub speed: Option<f64>,
    /// Probe radii relative to the bump radius δ′.
    pub deltas_rel: Vec<f64>,
    pub probes_per_delta: usize,
    pub seed: u64,
    /// Factor applied to `C_k` and `C_Γ` in the time selection.
    pub safety: f64,
    pub solver: SolverConfig,
}

impl Default for FormationSpec {
    fn default() -> Self {
        FormationSpec {
            bc: BoundaryCondition::Inflow,
            graph_radius: 0.25,
            amplitude: 1e-2,
            speed: None,
            deltas_rel: vec![1e-1, 3e-2, 1e-2, 3e-3],
            probes_per_delta: 8,
            seed: 7,
            safety: 2.0,
            solver: SolverConfig::default(),
        }
    }
}

/// Bump data and time chosen for a formation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormationSetup {
    pub bc: BoundaryCondition,
    pub x0: Vec3,
    pub v0: Vec3,
    pub nu_v0: f64,
    pub t0: f64,
    /// `t_b(x₀, −v₀)`, the time until the forward ray re-hits the wall.
    pub t_rehit: f64,
    pub delta_prime: f64,
    pub initial: InitialData,
    /// Value of the lower-bound expression at `t₀`, in units of `sup|h₀|`.
    pub bound_value: f64,
    /// Required jump in units of `sup|h₀|`.
    pub required_factor: f64,
    pub amplitude: f64,
}

fn witness(dom: &ImplicitDomain) -> Result<(Vec3, Vec3), JumpError> {
    let (x0, v0) = dom
        .witnesses
        .singular
        .ok_or_else(|| JumpError::WitnessInvalid(format!("{} has no concave grazing witness", dom.name)))?;
    let kind = classify_phase_point(dom, &x0, &v0)?.kind;
    if kind != GrazingKind::GrazeSingular {
        return Err(JumpError::WitnessInvalid(format!("witness classifies as {}", kind.as_str())));
    }
    let conc = dom.directional_concavity(&x0, &v0)?;
    if conc >= 0.0 {
        return Err(JumpError::WitnessInvalid(format!("concavity {conc} is not negative")));
    }
    Ok((x0, v0))
}

/// `(1 + ρ²|v|²)^β e^{−|v|²/4}`, the inverse of w̃ without the Gaussian
/// normalization.
fn inv_w_tilde_bare(weights: &WeightSet, speed: f64) -> f64 {
    (1.0 + weights.rho * weights.rho * speed * speed).powf(weights.beta) * (-0.25 * speed * speed).exp()
}

/// Chooses `|v₀|`, `t₀` and the bump radius δ′ for the witness of `dom`.
pub fn formation_setup(
    dom: &ImplicitDomain,
    params: &KernelParams,
    weights: &WeightSet,
    spec: &FormationSpec,
    consts: Option<&FittedConstants>,
) -> Result<FormationSetup, JumpError> {
    let c = consts.ok_or(JumpError::ConstantsMissing)?;
    let (x0, v_unit) = witness(dom)?;
    let v_unit = v_unit.normalize();
    let cp = c.c_prime;
    let ck = spec.safety * c.c_k;
    let cg = spec.safety * c.c_gamma;
    let speed = match (spec.speed, spec.bc) {
        (Some(s), _) => s,
        (None, BoundaryCondition::Diffuse) => {
            let mut s = 1.0;
            while inv_w_tilde_bare(weights, s) > 1.0 / (10.0 * cp) {
                s += 0.25;
            }
            s
        }
        (None, _) => 1.0,
    };
    let v0 = speed * v_unit;
    let nu = collision_frequency(params, &spec.solver.vel_quad.nu, &v0);
    let t_rehit = dom.backward_exit(&x0, &(-v0))?.t_b;
    let wall_term = if spec.bc == BoundaryCondition::Diffuse {
        cp * weights.w(&v0) * sqrt_mu(&v0) * w_tilde_flux(weights)
    } else {
        0.0
    };
    let bound = |t: f64| (-nu * t).exp() - t * ck * cp - (1.0 - (-nu * t).exp()) * cg * cp * cp - wall_term;
    let delta = spec.graph_radius;
    let cap = (0.5 * delta).min(0.5 * t_rehit);
    let t0 = match spec.bc {
        BoundaryCondition::Diffuse => {
            let mut t = cap.min(delta / speed).min(1.0 / (10.0 * nu)).min(1.0 / (10.0 * ck * cp));
            let a = 10.0 * cg * cp * cp;
            if a > 1.0 {
                t = t.min((a / (a - 1.0)).ln() / nu);
            }
            t
        }
        _ => {
            if bound(cap) >= 0.5 {
                cap
            } else {
                let (mut lo, mut hi) = (0.0, cap);
                for _ in 0..60 {
                    let m = 0.5 * (lo + hi);
                    if bound(m) >= 0.5 {
                        lo = m;
                    } else {
                        hi = m;
                    }
                }
                lo
            }
        }
    };
    let plus = x0 - t0 * v0;
    let minus = x0 + t0 * v0;
    let reach = t0 * speed;
    let mut room = clearance(dom, &plus, reach);
    if spec.bc == BoundaryCondition::Bounceback {
        room = room.min(clearance(dom, &minus, reach));
    }
    let delta_prime = 0.9 * room;
    if !(delta_prime > 1e-9 * dom.diameter) {
        return Err(JumpError::WitnessInvalid("no room for the bump next to the witness".into()));
    }
    let amp = spec.amplitude;
    let mut bumps = vec![Bump { x_center: plus, v_center: v0, radius: delta_prime, amplitude: amp }];
    if spec.bc == BoundaryCondition::Bounceback {
        bumps.push(Bump { x_center: minus, v_center: -v0, radius: delta_prime, amplitude: -amp });
    }
    Ok(FormationSetup {
        bc: spec.bc,
        x0,
        v0,
        nu_v0: nu,
        t0,
        t_rehit,
        delta_prime,
        initial: InitialData::Bumps { bumps },
        bound_value: bound(t0),
        required_factor: if spec.bc == BoundaryCondition::Bounceback { 1.0 } else { 0.5 },
        amplitude: amp,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormationReport {
    pub setup: FormationSetup,
    pub constants: FittedConstants,
    pub jump: JumpEstimate,
    /// Spread of the last two gaps plus the depth-truncation gap at the
    /// extreme probes.
    pub noise_budget: f64,
    pub control: JumpEstimate,
    pub control_in_c: bool,
    /// Membership reports `in_D` along the forward trajectory.
    pub trajectory_in_d: bool,
    pub pass: bool,
}

pub fn formation_solver(
    dom: &ImplicitDomain,
    params: &KernelParams,
    weights: &WeightSet,
    setup: &FormationSetup,
    config: SolverConfig,
) -> Result<MildSolver, JumpError> {
    let field = KineticField::new(dom.clone(), *params, *weights, setup.initial.clone(), setup.bc, InflowDatum::Zero)?;
    Ok(MildSolver::new(field, config)?)
}

fn depth_gap(solver: &MildSolver, probes: &[Probe]) -> Result<f64, JumpError> {
    let m = solver.config.expansion_depth;
    if m == 0 {
        return Ok(0.0);
    }
    let mut gap: f64 = 0.0;
    for p in probes {
        let q = &p.point;
        let a = solver.eval_at_depth(m, q.t, &q.x, &q.v)?.0;
        let b = solver.eval_at_depth(m - 1, q.t, &q.x, &q.v)?.0;
        gap = gap.max((a - b).abs());
    }
    Ok(gap)
}

pub fn formation_experiment(
    dom: &ImplicitDomain,
    params: &KernelParams,
    weights: &WeightSet,
    spec: &FormationSpec,
    consts: Option<&FittedConstants>,
) -> Result<FormationReport, JumpError> {
    let setup = formation_setup(dom, params, weights, spec, consts)?;
    let solver = formation_solver(dom, params, weights, &setup, spec.solver)?;
    let amp = setup.amplitude;
    let deltas: Vec<f64> = spec.deltas_rel.iter().map(|r| r * setup.delta_prime).collect();
    let settings = JumpSettings {
        mode: JumpMode::SpaceVelocity,
        deltas: deltas.clone(),
        probes_per_delta: spec.probes_per_delta,
        seed: spec.seed,
        structured: Some(GrazeProbes { x0: setup.x0, v0: setup.v0, dt: 0.0 }),
        noise_tol: 1e-3 * amp,
    };
    let center = PhasePoint::new(setup.t0, setup.x0, setup.v0);
    let jump = measure_jump(&solver, center, &settings)?;
    let noise_budget = jump.uncertainty + depth_gap(&solver, &[jump.extremes.0, jump.extremes.1])?;

    let xc = setup.x0 + 0.25 * setup.delta_prime * inward_normal(dom, &setup.x0)?;
    let mem = membership(dom, setup.t0, &xc, &setup.v0, setup.bc)?;
    let control_in_c = if setup.bc == BoundaryCondition::Bounceback { mem.in_c_bb } else { mem.in_c };
    let control_settings = JumpSettings { structured: None, seed: spec.seed ^ 0xc0, ..settings };
    let control = measure_jump(&solver, PhasePoint::new(setup.t0, xc, setup.v0), &control_settings)?;

    let mut trajectory_in_d = true;
    for k in 1..=3 {
        let dt = setup.t_rehit * k as f64 / 4.0;
        let m = membership(dom, setup.t0 + dt, &(setup.x0 + dt * setup.v0), &setup.v0, setup.bc)?;
        trajectory_in_d &= m.in_d;
    }
    let pass = jump.extrapolated_jump >= setup.required_factor * amp - noise_budget
        && noise_budget <= 0.1 * amp
        && control.extrapolated_jump < 0.05 * amp;
    Ok(FormationReport {
        setup,
        constants: *consts.ok_or(JumpError::ConstantsMissing)?,
        jump,
        noise_budget,
        control,
        control_in_c,
        trajectory_in_d,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationSpec {
    pub samples: usize,
    /// Damping only: ν stays on, K and Γ are switched off.
    pub collisionless: bool,
    /// Last sample time as a fraction of the re-hit time.
    pub span: f64,
    pub deltas_rel: Vec<f64>,
    pub probes_per_delta: usize,
    pub seed: u64,
    pub solver: SolverConfig,
}

impl Default for PropagationSpec {
    fn default() -> Self {
        PropagationSpec {
            samples: 6,
            collisionless: false,
            span: 0.9,
            deltas_rel: vec![1e-1, 3e-2, 1e-2, 3e-3],
            probes_per_delta: 8,
            seed: 11,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationReport {
    pub bc: BoundaryCondition,
    pub collisionless: bool,
    pub t0: f64,
    /// Sample times, starting with `t₀`.
    pub times: Vec<f64>,
    pub jumps: Vec<f64>,
    pub uncertainties: Vec<f64>,
    pub nu_v0: f64,
    pub fitted_rate: f64,
    /// `[1/C_ν − C_w C′ sup|h₀|, C_ν + C_w C′ sup|h₀|]·(1 + |v₀|)^γ`.
    pub rate_band: [f64; 2],
    pub envelope_rate: f64,
    pub positive: bool,
    pub envelope_ok: bool,
    pub rate_ok: bool,
    pub pass: bool,
}

/// Least-squares slope and `R²` of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

pub fn propagation_experiment(
    dom: &ImplicitDomain,
    params: &KernelParams,
    weights: &WeightSet,
    formation: &FormationReport,
    spec: &PropagationSpec,
) -> Result<PropagationReport, JumpError> {
    let s = &formation.setup;
    let c = &formation.constants;
    let mut config = spec.solver;
    if spec.collisionless {
        config.collisions = CollisionMode::DampingOnly;
    }
    let solver = formation_solver(dom, params, weights, s, config)?;
    let mut times = vec![s.t0];
    for k in 1..=spec.samples {
        times.push(s.t0 + spec.span * s.t_rehit * k as f64 / spec.samples as f64);
    }
    if let Some(&t) = times.iter().find(|&&t| t - s.t0 >= s.t_rehit) {
        return Err(JumpError::TrajectoryExitsEarly { t, limit: s.t0 + s.t_rehit });
    }
    let deltas: Vec<f64> = spec.deltas_rel.iter().map(|r| r * s.delta_prime).collect();
    let mut jumps = Vec::new();
    let mut uncertainties = Vec::new();
    for (k, &t) in times.iter().enumerate() {
        let dt = t - s.t0;
        let settings = JumpSettings {
            mode: if k == 0 { JumpMode::SpaceVelocity } else { JumpMode::TimeSpaceVelocity },
            deltas: deltas.clone(),
            probes_per_delta: spec.probes_per_delta,
            seed: spec.seed + k as u64,
            structured: Some(GrazeProbes { x0: s.x0, v0: s.v0, dt }),
            noise_tol: 1e-3 * s.amplitude,
        };
        let est = measure_jump(&solver, PhasePoint::new(t, s.x0 + dt * s.v0, s.v0), &settings)?;
        jumps.push(est.extrapolated_jump);
        uncertainties.push(est.uncertainty);
    }
    let positive = jumps.iter().zip(&uncertainties).all(|(j, u)| *j > 0.0 && *j > *u);
    let (fitted_rate, _) = if positive {
        let dts: Vec<f64> = times.iter().map(|t| t - s.t0).collect();
        let logs: Vec<f64> = jumps.iter().map(|j| j.ln()).collect();
        let (slope, r2) = linear_fit(&dts, &logs);
        (-slope, r2)
    } else {
        (f64::NAN, 0.0)
    };
    let scale = (1.0 + s.v0.norm()).powf(params.gamma_exp);
    let corr = c.c_w * c.c_prime * s.amplitude;
    let rate_band = [(1.0 / c.c_nu - corr) * scale, (c.c_nu + corr) * scale];
    let envelope_rate = rate_band[0].max(0.0);
    let envelope_ok = envelope_rate > 0.0
        && times
            .iter()
            .zip(&jumps)
            .zip(&uncertainties)
            .all(|((t, j), u)| *j <= jumps[0] * (-envelope_rate * (t - s.t0)).exp() + u + uncertainties[0]);
    let rate_ok = if spec.collisionless {
        (fitted_rate - s.nu_v0).abs() <= 0.02 * s.nu_v0
    } else {
        fitted_rate >= rate_band[0] && fitted_rate <= rate_band[1]
    };
    Ok(PropagationReport {
        bc: s.bc,
        collisionless: spec.collisionless,
        t0: s.t0,
        times,
        jumps,
        uncertainties,
        nu_v0: s.nu_v0,
        fitted_rate,
        rate_band,
        envelope_rate,
        positive,
        envelope_ok,
        rate_ok,
        pass: positive && envelope_ok && rate_ok,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuitySpec {
    pub deltas: Vec<f64>,
    pub probes_per_delta: usize,
    pub seed: u64,
    /// Final gap budget relative to `sup|h₀|`.
    pub budget_rel: f64,
    pub min_slope: f64,
    pub min_r2: f64,
}

impl Default for ContinuitySpec {
    fn default() -> Self {
        ContinuitySpec {
            deltas: vec![1e-2, 1e-3, 1e-4],
            probes_per_delta: 6,
            seed: 5,
            budget_rel: 1e-3,
            min_slope: 0.8,
            min_r2: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityEntry {
    pub membership: SetMembership,
    pub estimate: JumpEstimate,
    /// Log–log slope of the gaps against δ; unset when fewer than two gaps
    /// are positive.
    pub slope: Option<f64>,
    pub r2: Option<f64>,
    pub final_rel: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityReport {
    pub bc: BoundaryCondition,
    pub sup_h0: f64,
    pub entries: Vec<ContinuityEntry>,
    pub max_final_rel: f64,
    pub min_slope: Option<f64>,
    pub pass: bool,
}

/// Random centers in the continuity set of the wall law (`𝔠`, or `𝔠_bb`
/// for bounce-back), optionally restricted to `t < t_b(x, v)`.
pub fn continuity_centers(
    dom: &ImplicitDomain,
    bc: BoundaryCondition,
    count: usize,
    t_max: f64,
    speeds: (f64, f64),
    before_exit_only: bool,
    seed: u64,
) -> Result<Vec<(PhasePoint, SetMembership)>, JumpError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count {
        tries += 1;
        if tries > 1000 * count.max(1) {
            return Err(JumpError::InvalidSettings("could not find continuity points".into()));
        }
        let x = random_interior_point(dom, &mut rng);
        let v = rng.gen_range(speeds.0..speeds.1) * random_unit(&mut rng);
        let t = rng.gen_range(0.0..t_max);
        let Ok(rec) = dom.backward_exit(&x, &v) else { continue };
        if rec.tangential || (before_exit_only && t >= rec.t_b) {
            continue;
        }
        if !matches!(in_grazing_set(dom, &x, &v), Ok(false)) {
            continue;
        }
        let Ok(m) = membership(dom, t, &x, &v, bc) else { continue };
        let in_c = if bc == BoundaryCondition::Bounceback { m.in_c_bb } else { m.in_c };
        if in_c && m.reason != crate::phase_topology::MembershipReason::TimeTie {
            out.push((PhasePoint::new(t, x, v), m));
        }
    }
    Ok(out)
}

pub fn continuity_scan(
    field: &dyn PhaseField,
    bc: BoundaryCondition,
    centers: &[(PhasePoint, SetMembership)],
    sup_h0: f64,
    spec: &ContinuitySpec,
) -> Result<ContinuityReport, JumpError> {
    let mut entries = Vec::with_capacity(centers.len());
    for (i, (c, m)) in centers.iter().enumerate() {
        let settings = JumpSettings {
            mode: JumpMode::SpaceVelocity,
            deltas: spec.deltas.clone(),
            probes_per_delta: spec.probes_per_delta,
            seed: spec.seed + i as u64,
            structured: None,
            noise_tol: 1e-6 * sup_h0,
        };
        let est = measure_jump(field, *c, &settings)?;
        let pts: Vec<(f64, f64)> = est
            .delta_sequence
            .iter()
            .zip(&est.sup_gaps)
            .filter(|(_, g)| **g > 0.0)
            .map(|(d, g)| (d.ln(), g.ln()))
            .collect();
        let (slope, r2) = if pts.len() >= 2 {
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            let (s, r) = linear_fit(&x, &y);
            (Some(s), Some(r))
        } else {
            (None, None)
        };
        let final_rel = est.sup_gaps.last().copied().unwrap_or(0.0) / sup_h0;
        let scaling = match (slope, r2) {
            (Some(s), Some(r)) => s >= spec.min_slope && r > spec.min_r2,
            _ => true,
        };
        let pass = final_rel < spec.budget_rel && scaling;
        entries.push(ContinuityEntry { membership: *m, estimate: est, slope, r2, final_rel, pass });
    }
    let max_final_rel = entries.iter().map(|e| e.final_rel).fold(0.0, f64::max);
    let min_slope = entries.iter().filter_map(|e| e.slope).reduce(f64::min);
    let pass = entries.iter().all(|e| e.pass);
    Ok(ContinuityReport { bc, sup_h0, entries, max_final_rel, min_slope, pass })
}

/// Exit times along `x_n = z + s v + (scale/2ⁿ) n_in(z)`, `n = 0..count`,
/// for a grazing pair `(z, v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitTimeProbes {
    pub kind: GrazingKind,
    pub base: f64,
    pub offsets: Vec<f64>,
    pub exit_times: Vec<f64>,
    pub gaps: Vec<f64>,
}

pub fn exit_time_probes(
    dom: &ImplicitDomain,
    z: &Vec3,
    v: &Vec3,
    s: f64,
    scale: f64,
    count: usize,
) -> Result<ExitTimeProbes, JumpError> {
    let kind = classify_phase_point(dom, z, v)?.kind;
    let inward = inward_normal(dom, z)?;
    let x = z + s * v;
    let base = dom.backward_exit(&x, v)?.t_b;
    let mut offsets = Vec::with_capacity(count);
    let mut exit_times = Vec::with_capacity(count);
    for n in 0..count {
        let d = scale / 2f64.powi(n as i32);
        offsets.push(d);
        exit_times.push(dom.backward_exit(&(x + d * inward), v)?.t_b);
    }
    let gaps = exit_times.iter().map(|t| (t - base).abs()).collect();
    Ok(ExitTimeProbes { kind, base, offsets, exit_times, gaps })
}
