//! Mild (Duhamel) evaluation of the weighted perturbation `h = w (F − μ)/√μ`
//! under in-flow, diffuse or bounce-back walls.
//!
//! The field at depth `m` is damped transport of the data along the backward
//! path plus the time integral of `K_w h⁽ᵐ⁻¹⁾ + wΓ₊` along it, with the loss
//! part `wΓ₋(h, h) = ν_h h` folded into the damping rate. Inner values are
//! obtained by recursion, so nothing is stored on a phase-space grid.

use crate::collision_ops::{
    apply_gamma, collision_frequency, GammaPart, KernelOperator, KernelParams, KernelRule, KernelStencil, QuadScheme,
    VelocityQuadrature, WeightSet,
};
use crate::geometry::{GeomError, ImplicitDomain, Vec3};
use crate::phase_topology::{
    in_grazing_set, random_boundary_point, random_interior_point, random_unit, BoundaryCondition, TopoError,
};
use crate::quadrature::gauss_legendre_on;
use crate::trajectories::HalfSpaceRule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cell::{OnceCell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::{Arc, Mutex, OnceLock};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error(transparent)]
    Topology(#[from] TopoError),
    #[error("query lies on the grazing set")]
    OnGrazingSet,
    #[error("backward segment {segment} ends tangentially")]
    GrazingPath { segment: usize },
    #[error("negative time {0}")]
    NegativeTime(f64),
    #[error("data violate the {bc} compatibility condition (gap {gap:e})")]
    Incompatible { bc: String, gap: f64 },
    #[error("backward path needs more than {0} reflections")]
    TooManyReflections(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// `a(x)` in data of the form `a(x) w(v)√μ(v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpatialProfile {
    Constant,
    Gaussian { center: Vec3, width: f64 },
}

impl SpatialProfile {
    pub fn value(&self, x: &Vec3) -> f64 {
        match self {
            SpatialProfile::Constant => 1.0,
            SpatialProfile::Gaussian { center, width } => (-(x - center).norm_squared() / (width * width)).exp(),
        }
    }
}

/// C∞ cutoff: 1 on `[0, ½]`, 0 on `[1, ∞)`.
pub fn plateau_cutoff(r: f64) -> f64 {
    if r <= 0.5 {
        return 1.0;
    }
    if r >= 1.0 {
        return 0.0;
    }
    let t = 2.0 * (1.0 - r);
    let f = |s: f64| if s <= 0.0 { 0.0 } else { (-1.0 / s).exp() };
    f(t) / (f(t) + f(1.0 - t))
}

/// Tensor bump `amplitude · χ(|x − x_c|/δ′) · χ(|v − v_c|/δ′)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub x_center: Vec3,
    pub v_center: Vec3,
    pub radius: f64,
    pub amplitude: f64,
}

impl Bump {
    pub fn value(&self, x: &Vec3, v: &Vec3) -> f64 {
        let rv = (v - self.v_center).norm() / self.radius;
        if rv >= 1.0 {
            return 0.0;
        }
        let rx = (x - self.x_center).norm() / self.radius;
        if rx >= 1.0 {
            return 0.0;
        }
        self.amplitude * plateau_cutoff(rx) * plateau_cutoff(rv)
    }

    fn vanishes_at(&self, x: &Vec3, v: &Vec3) -> bool {
        (v - self.v_center).norm() >= self.radius || (x - self.x_center).norm() >= self.radius
    }
}

/// `sup_v w(v)√μ(v)`.
pub fn sup_w_sqrt_mu(weights: &WeightSet) -> f64 {
    (0..=4000)
        .map(|i| {
            let r = 0.01 * i as f64;
            (1.0 + weights.rho * weights.rho * r * r).powf(weights.beta) * (-0.25 * r * r).exp()
        })
        .fold(0.0, f64::max)
}

/// Initial datum `h₀(x, v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialData {
    Zero,
    /// Sum of bumps with disjoint supports.
    Bumps {
        bumps: Vec<Bump>,
    },
    /// `amplitude · a(x) · w(v)√μ(v)`, a density perturbation of μ.
    Equilibrium {
        amplitude: f64,
        profile: SpatialProfile,
    },
}

impl InitialData {
    pub fn value(&self, weights: &WeightSet, x: &Vec3, v: &Vec3) -> f64 {
        match self {
            InitialData::Zero => 0.0,
            InitialData::Bumps { bumps } => bumps.iter().map(|b| b.value(x, v)).sum(),
            InitialData::Equilibrium { amplitude, profile } => amplitude * profile.value(x) / weights.w_tilde(v),
        }
    }

    pub fn sup_norm(&self, weights: &WeightSet) -> f64 {
        match self {
            InitialData::Zero => 0.0,
            InitialData::Bumps { bumps } => bumps.iter().map(|b| b.amplitude.abs()).fold(0.0, f64::max),
            InitialData::Equilibrium { amplitude, .. } => amplitude.abs() * sup_w_sqrt_mu(weights),
        }
    }

    /// Cheap certificate that `h₀(x, v) = 0`.
    pub fn vanishes_at(&self, x: &Vec3, v: &Vec3) -> bool {
        match self {
            InitialData::Zero => true,
            InitialData::Bumps { bumps } => bumps.iter().all(|b| b.vanishes_at(x, v)),
            InitialData::Equilibrium { amplitude, .. } => *amplitude == 0.0,
        }
    }

    /// Velocity balls outside which `h₀` vanishes for every `x`; `None` when
    /// the velocity support is unbounded.
    pub fn velocity_support(&self) -> Option<Vec<(Vec3, f64)>> {
        match self {
            InitialData::Zero => Some(vec![]),
            InitialData::Bumps { bumps } => Some(bumps.iter().map(|b| (b.v_center, b.radius)).collect()),
            InitialData::Equilibrium { amplitude, .. } => {
                if *amplitude == 0.0 {
                    Some(vec![])
                } else {
                    None
                }
            }
        }
    }
}

/// In-flow datum `g(t, x, v)`; the wall value of `h` is `w(v) g`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InflowDatum {
    Zero,
    Sine {
        amplitude: f64,
    },
    /// `amplitude · a(x) √μ(v)`, matching `InitialData::Equilibrium`.
    Maxwellian {
        amplitude: f64,
        profile: SpatialProfile,
    },
}

impl InflowDatum {
    pub fn value(&self, t: f64, x: &Vec3, v: &Vec3) -> f64 {
        match self {
            InflowDatum::Zero => 0.0,
            InflowDatum::Sine { amplitude } => amplitude * t.sin(),
            InflowDatum::Maxwellian { amplitude, profile } => {
                amplitude * profile.value(x) * (-0.25 * v.norm_squared()).exp()
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, InflowDatum::Zero)
    }
}

/// Data, boundary law and operators of one linearized problem.
#[derive(Debug, Clone)]
pub struct KineticField {
    pub domain: ImplicitDomain,
    pub params: KernelParams,
    pub weights: WeightSet,
    pub initial: InitialData,
    pub bc: BoundaryCondition,
    pub inflow: InflowDatum,
}

const COMPAT_SAMPLES: usize = 64;
const COMPAT_WALL_NODES: usize = 2048;

impl KineticField {
    /// Builds the field and checks the `t = 0` compatibility condition of the
    /// boundary law on a fixed sample of incoming boundary pairs.
    pub fn new(
        domain: ImplicitDomain,
        params: KernelParams,
        weights: WeightSet,
        initial: InitialData,
        bc: BoundaryCondition,
        inflow: InflowDatum,
    ) -> Result<Self, SolverError> {
        let field = KineticField { domain, params, weights, initial, bc, inflow };
        let gap = field.compatibility_gap(COMPAT_SAMPLES, 0x5eed)?;
        let scale = field.initial.sup_norm(&field.weights).max(1e-300);
        if gap > 1e-6 * scale {
            return Err(SolverError::Incompatible { bc: field.bc.as_str().into(), gap });
        }
        Ok(field)
    }

    pub fn h0(&self, x: &Vec3, v: &Vec3) -> f64 {
        self.initial.value(&self.weights, x, v)
    }

    /// Largest violation of the boundary law by `h₀` over random
    /// `(x, v) ∈ γ−`.
    pub fn compatibility_gap(&self, samples: usize, seed: u64) -> Result<f64, SolverError> {
        let dom = &self.domain;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gap: f64 = 0.0;
        for _ in 0..samples {
            let x = random_boundary_point(dom, &mut rng);
            let n = dom.normal_at(&x)?;
            let mut v = rng.gen_range(0.3..3.0) * random_unit(&mut rng);
            if n.dot(&v) > 0.0 {
                v = -v;
            }
            let lhs = self.h0(&x, &v);
            let rhs = match self.bc {
                BoundaryCondition::Inflow => self.weights.w(&v) * self.inflow.value(0.0, &x, &v),
                BoundaryCondition::Bounceback => self.h0(&x, &(-v)),
                BoundaryCondition::Diffuse => {
                    let rule = HalfSpaceRule::diffuse(&n, COMPAT_WALL_NODES, &self.weights);
                    rule.integrate(|u| self.h0(&x, u)) / self.weights.w_tilde(&v)
                }
            };
            gap = gap.max((lhs - rhs).abs());
        }
        Ok(gap)
    }

    /// Velocity support of the transport-only (depth 0) field.
    fn transport_velocity_support(&self) -> Option<Vec<(Vec3, f64)>> {
        let base = self.initial.velocity_support()?;
        if base.is_empty() && self.inflow.is_zero() {
            return Some(base);
        }
        match self.bc {
            BoundaryCondition::Inflow if self.inflow.is_zero() => Some(merge_balls(base)),
            BoundaryCondition::Bounceback => {
                let mut all = base.clone();
                all.extend(base.iter().map(|(c, r)| (-c, *r)));
                Some(merge_balls(all))
            }
            _ => None,
        }
    }
}

/// Drops duplicate balls; overlapping distinct balls are replaced by one
/// covering ball.
fn merge_balls(balls: Vec<(Vec3, f64)>) -> Vec<(Vec3, f64)> {
    let mut out: Vec<(Vec3, f64)> = Vec::new();
    for (c, r) in balls {
        if out.iter().any(|(d, s)| (c - d).norm() <= 1e-12 && (r - s).abs() <= 1e-12) {
            continue;
        }
        out.push((c, r));
    }
    let overlap = out.iter().enumerate().any(|(i, a)| out[i + 1..].iter().any(|b| (a.0 - b.0).norm() < a.1 + b.1));
    if overlap {
        let center = out.iter().map(|b| b.0).sum::<Vec3>() / out.len() as f64;
        let radius = out.iter().map(|b| (b.0 - center).norm() + b.1).fold(0.0, f64::max);
        return vec![(center, radius)];
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionMode {
    /// `ν`, `K_w` and (if enabled) the Γ terms.
    Full,
    /// Damping by `ν(v)` only.
    DampingOnly,
    /// Free transport.
    Free,
}

/// Node counts used inside the solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverQuadrature {
    /// Shells around `v` for `K_w` when the inner field has unbounded
    /// velocity support.
    pub kernel: KernelRule,
    /// Shells restricted to the velocity support of the transport field.
    pub support: KernelRule,
    /// Direct rule for `Γ₊`.
    pub gamma: VelocityQuadrature,
    /// Diffuse wall rule at the query's own wall and at inner walls.
    pub wall_nodes: usize,
    pub wall_nodes_inner: usize,
    /// Rule for the `ν(|v|)` table.
    pub nu: VelocityQuadrature,
}

impl Default for SolverQuadrature {
    fn default() -> Self {
        SolverQuadrature {
            kernel: KernelRule { n_r: 6, n_polar: 3, n_azimuth: 6, radius: 9.0, rho_nodes: 40 },
            support: KernelRule { n_r: 6, n_polar: 4, n_azimuth: 8, radius: 1.0, rho_nodes: 40 },
            gamma: VelocityQuadrature {
                scheme: QuadScheme::Tensor { n_r: 4, n_polar: 3, n_azimuth: 4 },
                omega_polar: 3,
                omega_azimuth: 4,
                cutoff_n: 8.0,
            },
            wall_nodes: 256,
            wall_nodes_inner: 16,
            nu: VelocityQuadrature::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub expansion_depth: usize,
    pub time_nodes: usize,
    pub vel_quad: SolverQuadrature,
    pub diffuse_bounce_cap: usize,
    pub nonlinear: bool,
    pub cauchy_tol: f64,
    pub collisions: CollisionMode,
    /// Bounce-back paths longer than this many reflections are refused.
    pub max_reflections: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            expansion_depth: 2,
            time_nodes: 8,
            vel_quad: SolverQuadrature::default(),
            diffuse_bounce_cap: 2,
            nonlinear: true,
            cauchy_tol: 1e-4,
            collisions: CollisionMode::Full,
            max_reflections: 256,
        }
    }
}

impl SolverConfig {
    /// Reduced rules for sweeps over many queries: 4 time nodes, 4×2×4
    /// shells for `K_w` on general fields and 4×3×4 on supported ones.
    pub fn coarse() -> Self {
        let mut c = SolverConfig::default();
        c.time_nodes = 4;
        c.vel_quad.kernel = KernelRule { n_r: 4, n_polar: 2, n_azimuth: 4, radius: 8.0, rho_nodes: 40 };
        c.vel_quad.support = KernelRule { n_r: 4, n_polar: 3, n_azimuth: 4, radius: 1.0, rho_nodes: 40 };
        c
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if self.time_nodes == 0 {
            return Err(SolverError::InvalidConfig("time_nodes must be positive".into()));
        }
        if self.diffuse_bounce_cap == 0 {
            return Err(SolverError::InvalidConfig("diffuse_bounce_cap must be at least 1".into()));
        }
        if self.vel_quad.wall_nodes < 8 || self.vel_quad.wall_nodes_inner < 8 {
            return Err(SolverError::InvalidConfig("wall rules need at least 8 nodes".into()));
        }
        Ok(())
    }
}

/// `ν(|v|)` on a uniform speed grid with cubic interpolation.
#[derive(Debug)]
struct NuTable {
    step: f64,
    values: Vec<f64>,
}

const NU_STEP: f64 = 0.0625;
const NU_MAX_SPEED: f64 = 40.0;

impl NuTable {
    fn build(params: &KernelParams, quad: &VelocityQuadrature) -> Self {
        let n = (NU_MAX_SPEED / NU_STEP) as usize + 3;
        let values =
            (0..n).map(|i| collision_frequency(params, quad, &Vec3::new(i as f64 * NU_STEP, 0.0, 0.0))).collect();
        NuTable { step: NU_STEP, values }
    }

    fn get(&self, speed: f64) -> Option<f64> {
        let x = speed / self.step;
        let i = x.floor() as usize;
        if i + 2 >= self.values.len() {
            return None;
        }
        let t = x - i as f64;
        // ν is even in the speed, so reflect at the origin
        let p0 = if i == 0 { self.values[1] } else { self.values[i - 1] };
        let (p1, p2, p3) = (self.values[i], self.values[i + 1], self.values[i + 2]);
        Some(p1 + 0.5 * t * (p2 - p0 + t * (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3 + t * (3.0 * (p1 - p2) + p3 - p0))))
    }
}

fn nu_table(params: &KernelParams, quad: &VelocityQuadrature) -> Arc<NuTable> {
    static CACHE: OnceLock<Mutex<HashMap<String, Arc<NuTable>>>> = OnceLock::new();
    let key = format!("{params:?}{quad:?}");
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(t) = cache.lock().unwrap().get(&key) {
        return t.clone();
    }
    let table = Arc::new(NuTable::build(params, quad));
    cache.lock().unwrap().insert(key, table.clone());
    table
}

/// Per-query bookkeeping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalDiagnostics {
    pub inner_evals: u64,
    /// Inner evaluations that failed in the geometry and were counted as 0.
    pub dropped: u64,
    /// Diffuse wall visits cut off by the bounce cap.
    pub truncated_walls: u64,
    pub stencils: u64,
    pub reflections: u64,
}

struct Segment {
    t_hi: f64,
    t_lo: f64,
    x_hi: Vec3,
    v: Vec3,
}

enum Origin {
    Initial { y: Vec3, u: Vec3 },
    Wall { s: f64, x: Vec3, u: Vec3 },
}

struct StencilEntry {
    nodes: Vec<(Vec3, f64)>,
    weights: OnceCell<KernelStencil>,
}

#[derive(Default)]
struct Ctx {
    stencils: HashMap<(bool, [u64; 3]), Rc<StencilEntry>>,
    diag: EvalDiagnostics,
}

fn vkey(v: &Vec3) -> [u64; 3] {
    [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()]
}

/// Solver for one field and configuration. Evaluation is a pure function
/// of the query.
pub struct MildSolver {
    pub field: KineticField,
    pub config: SolverConfig,
    general: KernelOperator,
    support: KernelOperator,
    transport_support: Option<Vec<(Vec3, f64)>>,
    nu: Arc<NuTable>,
}

impl MildSolver {
    pub fn new(field: KineticField, config: SolverConfig) -> Result<Self, SolverError> {
        config.validate()?;
        let general = KernelOperator::new(field.params, field.weights, config.vel_quad.kernel);
        let support = KernelOperator::new(field.params, field.weights, config.vel_quad.support);
        let nu = nu_table(&field.params, &config.vel_quad.nu);
        let transport_support = field.transport_velocity_support();
        Ok(MildSolver { field, config, general, support, transport_support, nu })
    }

    pub fn domain(&self) -> &ImplicitDomain {
        &self.field.domain
    }

    /// `ν(v)`, the collision frequency.
    pub fn nu(&self, v: &Vec3) -> f64 {
        let s = v.norm();
        self.nu.get(s).unwrap_or_else(|| collision_frequency(&self.field.params, &self.config.vel_quad.nu, v))
    }

    pub fn eval(&self, t: f64, x: &Vec3, v: &Vec3) -> Result<f64, SolverError> {
        self.eval_at_depth(self.config.expansion_depth, t, x, v).map(|r| r.0)
    }

    /// `h⁽ᵐ⁾(t, x, v)` with diagnostics. Queries on the grazing set are refused.
    pub fn eval_at_depth(
        &self,
        depth: usize,
        t: f64,
        x: &Vec3,
        v: &Vec3,
    ) -> Result<(f64, EvalDiagnostics), SolverError> {
        if !(t >= 0.0) {
            return Err(SolverError::NegativeTime(t));
        }
        if in_grazing_set(&self.field.domain, x, v)? {
            return Err(SolverError::OnGrazingSet);
        }
        let mut ctx = Ctx::default();
        let h = self.eval_rec(depth, t, x, v, self.config.diffuse_bounce_cap, true, &mut ctx)?;
        Ok((h, ctx.diag))
    }

    fn path(
        &self,
        t: f64,
        x: &Vec3,
        v: &Vec3,
        strict: bool,
        ctx: &mut Ctx,
    ) -> Result<(Vec<Segment>, Origin), SolverError> {
        let dom = &self.field.domain;
        match self.field.bc {
            BoundaryCondition::Inflow | BoundaryCondition::Diffuse => match dom.backward_exit_within(x, v, t)? {
                None => {
                    Ok((vec![Segment { t_hi: t, t_lo: 0.0, x_hi: *x, v: *v }], Origin::Initial { y: x - t * v, u: *v }))
                }
                Some(rec) => {
                    if strict && rec.tangential {
                        return Err(SolverError::GrazingPath { segment: 0 });
                    }
                    let s = (t - rec.t_b).max(0.0);
                    Ok((vec![Segment { t_hi: t, t_lo: s, x_hi: *x, v: *v }], Origin::Wall { s, x: rec.x_b, u: *v }))
                }
            },
            BoundaryCondition::Bounceback => {
                let mut segs = Vec::new();
                let (mut tk, mut xk, mut vk) = (t, *x, *v);
                for k in 0..=self.config.max_reflections {
                    match dom.backward_exit_within(&xk, &vk, tk)? {
                        None => {
                            segs.push(Segment { t_hi: tk, t_lo: 0.0, x_hi: xk, v: vk });
                            return Ok((segs, Origin::Initial { y: xk - tk * vk, u: vk }));
                        }
                        Some(rec) => {
                            if strict && rec.tangential {
                                return Err(SolverError::GrazingPath { segment: k });
                            }
                            let lo = (tk - rec.t_b).max(0.0);
                            segs.push(Segment { t_hi: tk, t_lo: lo, x_hi: xk, v: vk });
                            ctx.diag.reflections += 1;
                            tk = lo;
                            xk = rec.x_b;
                            vk = -vk;
                        }
                    }
                }
                Err(SolverError::TooManyReflections(self.config.max_reflections))
            }
        }
    }

    /// Cheap zero certificate for the transport-only field.
    fn transport_vanishes(&self, t: f64, x: &Vec3, v: &Vec3, visits: usize) -> bool {
        let init = &self.field.initial;
        if self.transport_support.as_ref().is_some_and(|b| b.is_empty()) {
            return true;
        }
        match self.field.bc {
            BoundaryCondition::Inflow => self.field.inflow.is_zero() && init.vanishes_at(&(x - t * v), v),
            BoundaryCondition::Diffuse => visits == 0 && init.vanishes_at(&(x - t * v), v),
            BoundaryCondition::Bounceback => match &self.transport_support {
                Some(balls) => balls.iter().all(|(c, r)| (v - c).norm() >= *r),
                None => false,
            },
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn eval_rec(
        &self,
        m: usize,
        t: f64,
        x: &Vec3,
        v: &Vec3,
        visits: usize,
        strict: bool,
        ctx: &mut Ctx,
    ) -> Result<f64, SolverError> {
        let mode = self.config.collisions;
        let transport_only = m == 0 || mode != CollisionMode::Full;
        if !strict && transport_only && self.transport_vanishes(t, x, v, visits) {
            return Ok(0.0);
        }
        let (segs, origin) = self.path(t, x, v, strict, ctx)?;
        let lam0 = if mode == CollisionMode::Free { 0.0 } else { self.nu(v) };
        let s0 = match origin {
            Origin::Initial { .. } => 0.0,
            Origin::Wall { s, .. } => s,
        };
        let h_origin = self.origin_value(m, &origin, visits, strict, ctx)?;
        if transport_only {
            return Ok(h_origin * (-lam0 * (t - s0)).exp());
        }

        let inner = m - 1;
        let supported = self.transport_support.is_some();
        // (τ, quadrature weight, source, ν_h)
        let mut nodes: Vec<(f64, f64, f64, f64)> = Vec::new();
        for seg in &segs {
            if seg.t_hi - seg.t_lo <= 0.0 {
                continue;
            }
            for (tau, wt) in gauss_legendre_on(self.config.time_nodes, seg.t_lo, seg.t_hi) {
                let y = seg.x_hi - (seg.t_hi - tau) * seg.v;
                // With a known transport support, K h⁽ᵐ⁻¹⁾ = K h⁽⁰⁾ + K(h⁽ᵐ⁻¹⁾ − h⁽⁰⁾):
                // the narrow first part on the support stencil, the smooth
                // remainder on the general one.
                let (k, nuh) = if !supported {
                    self.k_term(false, inner, false, tau, &y, &seg.v, visits, ctx)
                } else if inner == 0 {
                    self.k_term(true, 0, false, tau, &y, &seg.v, visits, ctx)
                } else {
                    let a = self.k_term(true, 0, false, tau, &y, &seg.v, visits, ctx);
                    let b = self.k_term(false, inner, true, tau, &y, &seg.v, visits, ctx);
                    (a.0 + b.0, a.1 + b.1)
                };
                let gp =
                    if self.config.nonlinear && strict { self.gamma_plus(tau, &y, &seg.v, visits, ctx) } else { 0.0 };
                nodes.push((tau, wt, k + gp, if self.config.nonlinear { nuh } else { 0.0 }));
            }
        }
        nodes.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let loss = LossIntegral::new(&nodes, t);
        let mut h = h_origin * (-lam0 * (t - s0) - loss.from(s0)).exp();
        for &(tau, wt, src, _) in &nodes {
            if src != 0.0 {
                h += wt * src * (-lam0 * (t - tau) - loss.from(tau)).exp();
            }
        }
        Ok(h)
    }

    /// `(K_w h, ν_h)` at `(τ, y, v)` for the inner field at `depth`, minus
    /// the transport field when `remainder` is set.
    #[allow(clippy::too_many_arguments)]
    fn k_term(
        &self,
        use_support: bool,
        depth: usize,
        remainder: bool,
        tau: f64,
        y: &Vec3,
        v: &Vec3,
        visits: usize,
        ctx: &mut Ctx,
    ) -> (f64, f64) {
        let entry = self.stencil_entry(use_support, v, ctx);
        let mut vals = Vec::with_capacity(entry.nodes.len());
        let mut any = false;
        for (u, _) in &entry.nodes {
            ctx.diag.inner_evals += 1;
            let mut h = self.eval_rec(depth, tau, y, u, visits.min(1), false, ctx);
            if remainder {
                h = h.and_then(|a| Ok(a - self.eval_rec(0, tau, y, u, visits.min(1), false, ctx)?));
            }
            let h = h.unwrap_or_else(|_| {
                ctx.diag.dropped += 1;
                0.0
            });
            any |= h != 0.0;
            vals.push(h);
        }
        if !any {
            return (0.0, 0.0);
        }
        let st = entry.weights.get_or_init(|| {
            ctx.diag.stencils += 1;
            let op = if use_support { &self.support } else { &self.general };
            op.stencil_at(v, &entry.nodes)
        });
        st.apply(&vals)
    }

    fn stencil_entry(&self, use_support: bool, v: &Vec3, ctx: &mut Ctx) -> Rc<StencilEntry> {
        let key = (use_support, vkey(v));
        if let Some(e) = ctx.stencils.get(&key) {
            return e.clone();
        }
        let nodes = if use_support {
            let mut all = Vec::new();
            for (c, r) in self.transport_support.as_deref().unwrap_or(&[]) {
                all.extend(self.support.ball_nodes(v, c, *r));
            }
            all
        } else {
            self.general.general_nodes(v)
        };
        let e = Rc::new(StencilEntry { nodes, weights: OnceCell::new() });
        ctx.stencils.insert(key, e.clone());
        e
    }

    /// `wΓ₊(h⁽⁰⁾, h⁽⁰⁾)` at `(τ, y, v)`, built from the transport field.
    fn gamma_plus(&self, tau: f64, y: &Vec3, v: &Vec3, visits: usize, ctx: &mut Ctx) -> f64 {
        if let Some(balls) = &self.transport_support {
            // post-collision pairs in B(c1,r1)×B(c2,r2) only reach v within
            // (|c1 − c2| + r1 + r2)/2 + (r1 + r2)/2 of the midpoint
            let reachable = balls.iter().any(|a| {
                balls.iter().any(|b| {
                    let mid = 0.5 * (a.0 + b.0);
                    (v - mid).norm() <= 0.5 * (a.0 - b.0).norm() + a.1 + b.1
                })
            });
            if !reachable {
                return 0.0;
            }
        }
        let cell = RefCell::new(ctx);
        let h = |u: &Vec3| {
            let mut c = cell.borrow_mut();
            self.eval_rec(0, tau, y, u, visits.min(1), false, &mut c).unwrap_or(0.0)
        };
        apply_gamma(&self.field.params, &self.field.weights, &self.config.vel_quad.gamma, h, h, v, GammaPart::Plus)
    }

    fn origin_value(
        &self,
        m: usize,
        origin: &Origin,
        visits: usize,
        strict: bool,
        ctx: &mut Ctx,
    ) -> Result<f64, SolverError> {
        let f = &self.field;
        match origin {
            Origin::Initial { y, u } => Ok(f.h0(y, u)),
            Origin::Wall { s, x, u } => match f.bc {
                BoundaryCondition::Inflow => Ok(f.weights.w(u) * f.inflow.value(*s, x, u)),
                BoundaryCondition::Diffuse => {
                    if visits == 0 {
                        ctx.diag.truncated_walls += 1;
                        return Ok(0.0);
                    }
                    let n = f.domain.normal_at(x)?;
                    let count =
                        if strict { self.config.vel_quad.wall_nodes } else { self.config.vel_quad.wall_nodes_inner };
                    let rule = HalfSpaceRule::diffuse(&n, count, &f.weights);
                    let depth = m.saturating_sub(1);
                    let mut acc = 0.0;
                    for (uj, wj) in &rule.nodes {
                        ctx.diag.inner_evals += 1;
                        match self.eval_rec(depth, *s, x, uj, visits - 1, false, ctx) {
                            Ok(h) => acc += wj * h,
                            Err(_) => ctx.diag.dropped += 1,
                        }
                    }
                    Ok(acc / f.weights.w_tilde(u))
                }
                // bounce-back paths always end on the initial plane
                BoundaryCondition::Bounceback => Ok(0.0),
            },
        }
    }
}

/// `∫_τ^t ν_h` from node values, piecewise linear between nodes and constant
/// beyond the end nodes.
struct LossIntegral {
    taus: Vec<f64>,
    vals: Vec<f64>,
    t: f64,
}

impl LossIntegral {
    fn new(nodes: &[(f64, f64, f64, f64)], t: f64) -> Self {
        LossIntegral { taus: nodes.iter().map(|n| n.0).collect(), vals: nodes.iter().map(|n| n.3).collect(), t }
    }

    fn value_at(&self, s: f64) -> f64 {
        let n = self.taus.len();
        if n == 0 {
            return 0.0;
        }
        if s <= self.taus[0] {
            return self.vals[0];
        }
        if s >= self.taus[n - 1] {
            return self.vals[n - 1];
        }
        let i = self.taus.partition_point(|&x| x <= s) - 1;
        let (a, b) = (self.taus[i], self.taus[i + 1]);
        let f = if b > a { (s - a) / (b - a) } else { 0.0 };
        self.vals[i] + f * (self.vals[i + 1] - self.vals[i])
    }

    fn from(&self, s: f64) -> f64 {
        if self.vals.iter().all(|&v| v == 0.0) || s >= self.t {
            return 0.0;
        }
        // breakpoints in (s, t): nodes, plus the ends
        let mut pts = vec![s];
        pts.extend(self.taus.iter().copied().filter(|&x| x > s && x < self.t));
        pts.push(self.t);
        pts.windows(2).map(|w| 0.5 * (w[1] - w[0]) * (self.value_at(w[0]) + self.value_at(w[1]))).sum()
    }
}

/// Collisionless in-flow formula: `h₀(x − tv, v)` before the wall is
/// reached, `w(v) g(t − t_b, x_b, v)` after.
pub fn eval_free_transport(field: &KineticField, t: f64, x: &Vec3, v: &Vec3) -> Result<f64, SolverError> {
    if field.bc != BoundaryCondition::Inflow {
        return Err(SolverError::InvalidConfig("free transport formula needs the in-flow law".into()));
    }
    if !(t >= 0.0) {
        return Err(SolverError::NegativeTime(t));
    }
    match field.domain.backward_exit_within(x, v, t)? {
        None => Ok(field.h0(&(x - t * v), v)),
        Some(rec) => {
            if rec.tangential {
                return Err(GeomError::GrazingExit { normal_dot_v: rec.normal_dot_v }.into());
            }
            Ok(field.weights.w(v) * field.inflow.value(t - rec.t_b, &rec.x_b, v))
        }
    }
}

/// Phase-space query `(t, x, v)`.
pub type Query = (f64, Vec3, Vec3);

/// Random queries with `t ∈ [0, t_max]`, `|v| ∈ speeds`, off the grazing set.
pub fn random_queries(dom: &ImplicitDomain, count: usize, t_max: f64, speeds: (f64, f64), seed: u64) -> Vec<Query> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let x = random_interior_point(dom, &mut rng);
        let v = rng.gen_range(speeds.0..speeds.1) * random_unit(&mut rng);
        let t = rng.gen_range(0.0..=t_max);
        if matches!(in_grazing_set(dom, &x, &v), Ok(false)) {
            out.push((t, x, v));
        }
    }
    out
}

/// `sup |h⁽ᵐ⁾ − h⁽ᵐ⁻¹⁾|` over the queries at the configured depth `m ≥ 1`.
pub fn picard_residual(solver: &MildSolver, queries: &[Query]) -> Result<f64, SolverError> {
    let m = solver.config.expansion_depth;
    if m == 0 {
        return Err(SolverError::InvalidConfig("residual needs expansion_depth ≥ 1".into()));
    }
    let mut sup: f64 = 0.0;
    for (t, x, v) in queries {
        let a = solver.eval_at_depth(m, *t, x, v)?.0;
        let b = solver.eval_at_depth(m - 1, *t, x, v)?.0;
        sup = sup.max((a - b).abs());
    }
    Ok(sup)
}

/// `C′ = sup |h| / sup |h₀|` over the queries.
pub fn fit_c_prime(solver: &MildSolver, queries: &[Query]) -> Result<f64, SolverError> {
    let h0 = solver.field.initial.sup_norm(&solver.field.weights);
    if h0 == 0.0 {
        return Ok(0.0);
    }
    let mut sup: f64 = 0.0;
    for (t, x, v) in queries {
        sup = sup.max(solver.eval(*t, x, v)?.abs());
    }
    Ok(sup / h0)
}
