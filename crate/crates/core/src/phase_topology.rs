//! Boundary taxonomy of phase points and membership in the grazing,
//! discontinuity and continuity sets.

use crate::geometry::{GeomError, ImplicitDomain, Mat3, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopoError {
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error("cannot classify ({0})")]
    Unclassifiable(String),
    #[error("boundary is not strictly concave along the requested direction (vᵀ∇²ψv = {0})")]
    NotConcave(f64),
    #[error("no grazing velocity in the bracket")]
    NoTangentialVelocity,
    #[error("velocity below v_floor")]
    ZeroVelocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrazingKind {
    Interior,
    Outgoing,
    Incoming,
    GrazeSingular,
    GrazeInflectionOut,
    GrazeInflectionIn,
    GrazeConvex,
}

impl GrazingKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            GrazingKind::Interior => "interior",
            GrazingKind::Outgoing => "outgoing",
            GrazingKind::Incoming => "incoming",
            GrazingKind::GrazeSingular => "graze_singular",
            GrazingKind::GrazeInflectionOut => "graze_inflection_out",
            GrazingKind::GrazeInflectionIn => "graze_inflection_in",
            GrazingKind::GrazeConvex => "graze_convex",
        }
    }

    /// Members of `γ− ∪ γ0^{I−}`, the boundary sources of continuity.
    pub fn is_incoming_like(&self) -> bool {
        matches!(self, GrazingKind::Incoming | GrazingKind::GrazeInflectionIn)
    }
}

/// Classification of `(x, v)` with the two exit times it was derived from.
/// `t_b_fwd = t_b(x, v)`, `t_b_bwd = t_b(x, −v)`; both are NaN when the
/// classification did not need them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrazingClass {
    pub kind: GrazingKind,
    pub t_b_fwd: f64,
    pub t_b_bwd: f64,
    pub n_dot_v: f64,
}

pub fn class_tol(dom: &ImplicitDomain, v: &Vec3) -> f64 {
    1e-6 * dom.diameter / v.norm()
}

/// First decided sample of `ψ(x + τ dir)` for geometric τ decides whether
/// the ray enters the exterior; undecided samples are skipped.
fn enters_exterior(dom: &ImplicitDomain, x: &Vec3, dir: &Vec3) -> Option<bool> {
    let tol = dom.tol.boundary_tol;
    let speed = dir.norm();
    for k in 0..=10 {
        let tau = 1e-8 * 10f64.powf(0.5 * k as f64) * dom.diameter / speed;
        let f = dom.psi(&(x + tau * dir));
        if f > tol {
            return Some(true);
        }
        if f < -tol {
            return Some(false);
        }
    }
    None
}

fn exit_time(dom: &ImplicitDomain, x: &Vec3, v: &Vec3) -> Result<f64, TopoError> {
    match dom.backward_exit(x, v) {
        Ok(r) => Ok(r.t_b),
        Err(GeomError::TangencyUnresolved { s }) => {
            Err(TopoError::Unclassifiable(format!("tangency unresolved at s = {s}")))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn classify_phase_point(dom: &ImplicitDomain, x: &Vec3, v: &Vec3) -> Result<GrazingClass, TopoError> {
    let speed = v.norm();
    if speed < dom.tol.v_floor {
        return Err(TopoError::ZeroVelocity);
    }
    let psi = dom.psi(x);
    if psi > dom.tol.boundary_tol {
        return Err(GeomError::OutsideDomain { psi }.into());
    }
    if psi < -dom.tol.boundary_tol {
        return Ok(GrazingClass {
            kind: GrazingKind::Interior,
            t_b_fwd: exit_time(dom, x, v)?,
            t_b_bwd: exit_time(dom, x, &(-v))?,
            n_dot_v: f64::NAN,
        });
    }
    let n = dom.normal_at(x)?;
    let ndv = n.dot(v);
    let band = dom.tol.tangency_tol * speed;
    if ndv > band {
        return Ok(GrazingClass { kind: GrazingKind::Outgoing, t_b_fwd: f64::NAN, t_b_bwd: f64::NAN, n_dot_v: ndv });
    }
    if ndv < -band {
        return Ok(GrazingClass { kind: GrazingKind::Incoming, t_b_fwd: f64::NAN, t_b_bwd: f64::NAN, n_dot_v: ndv });
    }
    let t1 = exit_time(dom, x, v)?;
    let t2 = exit_time(dom, x, &(-v))?;
    let ct = class_tol(dom, v);
    let kind = match (t1 > ct, t2 > ct) {
        (true, true) => GrazingKind::GrazeSingular,
        (false, false) => GrazingKind::GrazeConvex,
        (true, false) => match enters_exterior(dom, x, v) {
            Some(true) => GrazingKind::GrazeInflectionOut,
            _ => return Err(TopoError::Unclassifiable("forward probe never leaves".into())),
        },
        (false, true) => match enters_exterior(dom, x, &(-v)) {
            Some(true) => GrazingKind::GrazeInflectionIn,
            _ => return Err(TopoError::Unclassifiable("backward probe never leaves".into())),
        },
    };
    Ok(GrazingClass { kind, t_b_fwd: t1, t_b_bwd: t2, n_dot_v: ndv })
}

/// `(x, v) ∈ 𝔊`: the backward exit is tangential, `|n(x_b)·v| ≤ tol·|v|`.
pub fn in_grazing_set(dom: &ImplicitDomain, x: &Vec3, v: &Vec3) -> Result<bool, TopoError> {
    in_grazing_set_with(dom, x, v, dom.tol.tangency_tol)
}

pub fn in_grazing_set_with(dom: &ImplicitDomain, x: &Vec3, v: &Vec3, tangency_tol: f64) -> Result<bool, TopoError> {
    let rec = dom.backward_exit(x, v)?;
    Ok(rec.normal_dot_v.abs() <= tangency_tol * v.norm())
}

/// Quasi-uniform unit vectors on the sphere (Fibonacci lattice).
pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Estimate of `m₂(𝔊_x ∩ S²)`: the fraction of sphere samples whose backward
/// exit is tangential within `tangency_tol`, times 4π. Rays on a flat piece of
/// boundary count as grazing.
pub fn grazing_section_measure(dom: &ImplicitDomain, x: &Vec3, sphere_samples: usize, tangency_tol: f64) -> f64 {
    let dirs = fibonacci_sphere(sphere_samples);
    let hits = dirs
        .iter()
        .filter(|u| match in_grazing_set_with(dom, x, u, tangency_tol) {
            Ok(b) => b,
            Err(TopoError::Geometry(GeomError::TangencyUnresolved { .. })) => true,
            Err(_) => false,
        })
        .count();
    4.0 * PI * hits as f64 / sphere_samples as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryCondition {
    Inflow,
    Diffuse,
    Bounceback,
}

impl BoundaryCondition {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundaryCondition::Inflow => "inflow",
            BoundaryCondition::Diffuse => "diffuse",
            BoundaryCondition::Bounceback => "bounceback",
        }
    }
}

/// Which clause of the set definitions decided the membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MembershipReason {
    InitialPlane,
    GrazingBoundary,
    IncomingBoundary,
    BeforeExit,
    FromSingularGraze,
    FromIncoming,
    ReflectedSingularGraze,
    BeforeFirstReturn,
    BothEndsIncoming,
    TimeTie,
    Unmatched,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetMembership {
    pub in_d: bool,
    pub in_c: bool,
    pub in_d_bb: bool,
    pub in_c_bb: bool,
    pub reason: MembershipReason,
}

pub fn membership(
    dom: &ImplicitDomain,
    t: f64,
    x: &Vec3,
    v: &Vec3,
    bc: BoundaryCondition,
) -> Result<SetMembership, TopoError> {
    use MembershipReason::*;
    if t <= 0.0 {
        return Ok(SetMembership { in_d: false, in_c: true, in_d_bb: false, in_c_bb: true, reason: InitialPlane });
    }
    let ct = class_tol(dom, v);
    let on_boundary = dom.on_boundary(x);
    let mut interior_like = !on_boundary;
    if on_boundary {
        let cls = classify_phase_point(dom, x, v)?;
        match cls.kind {
            GrazingKind::GrazeSingular | GrazingKind::GrazeConvex | GrazingKind::GrazeInflectionOut => {
                return Ok(SetMembership {
                    in_d: true,
                    in_c: false,
                    in_d_bb: true,
                    in_c_bb: false,
                    reason: GrazingBoundary,
                })
            }
            GrazingKind::Incoming | GrazingKind::GrazeInflectionIn => {
                return Ok(SetMembership {
                    in_d: false,
                    in_c: true,
                    in_d_bb: false,
                    in_c_bb: true,
                    reason: IncomingBoundary,
                })
            }
            GrazingKind::Outgoing => interior_like = false,
            GrazingKind::Interior => interior_like = true,
        }
    }

    let fwd = dom.backward_exit(x, v)?;
    let tb = fwd.t_b;
    let before = t < tb;
    let from_kind = if before { None } else { Some(classify_phase_point(dom, &fwd.x_b, v)?.kind) };
    let src_singular = from_kind == Some(GrazingKind::GrazeSingular);
    // the clause (x_b, v) ∈ γ− ∪ γ0^{I−} is needed even when t < t_b for 𝔠_bb
    let src_incoming = match from_kind {
        Some(k) => k.is_incoming_like(),
        None => classify_phase_point(dom, &fwd.x_b, v)?.kind.is_incoming_like(),
    };
    let in_d = !before && src_singular;
    let in_c = before || src_incoming;

    let bwd = dom.backward_exit(x, &(-v))?;
    let rev_kind = classify_phase_point(dom, &bwd.x_b, &(-v))?.kind;
    let t_return = 2.0 * tb + bwd.t_b;
    let in_d_bb = in_d || (interior_like && t >= t_return && rev_kind == GrazingKind::GrazeSingular);
    let in_c_bb = before || (src_incoming && t < t_return) || (rev_kind.is_incoming_like() && src_incoming);

    let tie = (t - tb).abs() <= ct || (bc == BoundaryCondition::Bounceback && (t - t_return).abs() <= ct);
    let reason = if tie {
        TimeTie
    } else if bc == BoundaryCondition::Bounceback {
        if in_d {
            FromSingularGraze
        } else if in_d_bb {
            ReflectedSingularGraze
        } else if before {
            BeforeExit
        } else if src_incoming && t < t_return {
            BeforeFirstReturn
        } else if in_c_bb {
            BothEndsIncoming
        } else {
            Unmatched
        }
    } else if in_d {
        FromSingularGraze
    } else if before {
        BeforeExit
    } else if in_c {
        FromIncoming
    } else {
        Unmatched
    };
    Ok(SetMembership { in_d, in_c, in_d_bb, in_c_bb, reason })
}

/// Orthonormal tangent frame `(e1, e2)` at a boundary point with outward
/// normal `n`; `e1` is built from the coordinate axis least aligned with `n`.
pub fn tangent_frame(n: &Vec3) -> (Vec3, Vec3) {
    let mut k = 0;
    for i in 1..3 {
        if n[i].abs() < n[k].abs() {
            k = i;
        }
    }
    let mut axis = Vec3::zeros();
    axis[k] = 1.0;
    let e1 = (axis - axis.dot(n) * n).normalize();
    let e2 = n.cross(&e1);
    (e1, e2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TangentialVelocity {
    pub u: Vec3,
    /// Distance from `x` to the touch point along the unit direction of `u`.
    pub s: f64,
    /// Distance from `x` to the boundary.
    pub depth: f64,
}

/// Velocity `u` of the given speed whose forward ray from `x` grazes the
/// boundary, `n(x_b(x, −u))·u = 0`, with tangential part along `planar_dir`
/// in the tangent frame of the nearest boundary point.
pub fn tangential_velocity(
    dom: &ImplicitDomain,
    x: &Vec3,
    planar_dir: [f64; 2],
    speed: f64,
) -> Result<TangentialVelocity, TopoError> {
    let p = dom.project_to_boundary(x)?;
    let n = dom.normal_at(&p)?;
    let (e1, e2) = tangent_frame(&n);
    let tau = (planar_dir[0] * e1 + planar_dir[1] * e2).normalize();
    let conc = dom.directional_concavity(&p, &tau)?;
    if conc >= 0.0 {
        return Err(TopoError::NotConcave(conc));
    }
    let depth = (x - p).norm();
    if depth <= 1e-14 * dom.diameter {
        return Ok(TangentialVelocity { u: speed * tau, s: 0.0, depth });
    }
    let kappa = -conc / dom.grad(&p).norm();
    let s_star = (2.0 * depth / kappa).sqrt();
    let m_star = -(2.0 * depth * kappa).sqrt();
    let reach = (12.0 * s_star).min(0.3 * dom.diameter);
    let inward = -n;
    let dir = |m: f64| (tau + m * inward).normalize();
    // largest ψ along the forward segment and where it is attained
    let peak = |m: f64| -> (f64, f64) {
        let d = dir(m);
        let k = 256;
        let (mut best_s, mut best) = (0.0, f64::NEG_INFINITY);
        for i in 1..=k {
            let s = reach * i as f64 / k as f64;
            let f = dom.psi(&(x + s * d));
            if f > best {
                best = f;
                best_s = s;
            }
        }
        let h = reach / k as f64;
        let (mut a, mut b) = ((best_s - h).max(0.0), (best_s + h).min(reach));
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..80 {
            let c = b - g * (b - a);
            let e = a + g * (b - a);
            if dom.psi(&(x + c * d)) > dom.psi(&(x + e * d)) {
                b = e;
            } else {
                a = c;
            }
        }
        let s = 0.5 * (a + b);
        (dom.psi(&(x + s * d)).max(best), s)
    };
    let (mut lo, mut hi) = (10.0 * m_star, 0.1 * m_star);
    if peak(lo).0 <= 0.0 || peak(hi).0 >= 0.0 {
        return Err(TopoError::NoTangentialVelocity);
    }
    for _ in 0..100 {
        let m = 0.5 * (lo + hi);
        if m <= lo || m >= hi {
            break;
        }
        if peak(m).0 > 0.0 {
            lo = m;
        } else {
            hi = m;
        }
    }
    let (_, s) = peak(hi);
    Ok(TangentialVelocity { u: speed * dir(hi), s, depth })
}

/// Sampled check for straight segments in the boundary. At each sampled
/// boundary point the tangent direction of least normal curvature is
/// followed over a window of half-width `delta`; a segment is reported when
/// the curvature stays below `flat_tol` across the whole window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentDiagnostic {
    pub samples: usize,
    pub flat_samples: usize,
    pub contains_segment: bool,
}

pub fn line_segment_diagnostic(dom: &ImplicitDomain, samples: usize, delta: f64, seed: u64) -> SegmentDiagnostic {
    let flat_tol = 1e-8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = 0.5 * (dom.bbox_min + dom.bbox_max);
    let mut flat = 0;
    let mut used = 0;
    for _ in 0..samples {
        let d = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let dir = match d.try_normalize(1e-12) {
            Some(d) => d,
            None => continue,
        };
        let start = center + 0.5 * dom.diameter * dir;
        let p = match dom.project_to_boundary(&start) {
            Ok(p) => p,
            Err(_) => continue,
        };
        used += 1;
        let curvature = |q: &Vec3, t: &Vec3| -> Option<f64> {
            let n = dom.normal_at(q).ok()?;
            let t = (t - t.dot(&n) * n).try_normalize(1e-12)?;
            Some(t.dot(&(dom.hessian(q) * t)) / dom.grad(q).norm())
        };
        let n = match dom.normal_at(&p) {
            Ok(n) => n,
            Err(_) => continue,
        };
        let (e1, e2) = tangent_frame(&n);
        let h: Mat3 = dom.hessian(&p) / dom.grad(&p).norm();
        let a = e1.dot(&(h * e1));
        let b = e1.dot(&(h * e2));
        let c = e2.dot(&(h * e2));
        // principal directions of the 2×2 shape operator
        let theta = 0.5 * (2.0 * b).atan2(a - c);
        let cands = [theta, theta + 0.5 * PI];
        let t_min = cands
            .iter()
            .map(|&th| th.cos() * e1 + th.sin() * e2)
            .min_by(|u, w| {
                let ku = u.dot(&(h * u)).abs();
                let kw = w.dot(&(h * w)).abs();
                ku.partial_cmp(&kw).unwrap()
            })
            .unwrap();
        let mut all_flat = true;
        for k in -5..=5 {
            let s = delta * k as f64 / 5.0;
            let q = match dom.project_to_boundary(&(p + s * t_min)) {
                Ok(q) => q,
                Err(_) => {
                    all_flat = false;
                    break;
                }
            };
            match curvature(&q, &t_min) {
                Some(kv) if kv.abs() < flat_tol => {}
                _ => {
                    all_flat = false;
                    break;
                }
            }
        }
        if all_flat {
            flat += 1;
        }
    }
    SegmentDiagnostic { samples: used, flat_samples: flat, contains_segment: flat > 0 }
}

/// Random point of the closed domain by rejection from the bounding box.
pub fn random_interior_point(dom: &ImplicitDomain, rng: &mut impl Rng) -> Vec3 {
    loop {
        let x = Vec3::new(
            rng.gen_range(dom.bbox_min[0]..dom.bbox_max[0]),
            rng.gen_range(dom.bbox_min[1]..dom.bbox_max[1]),
            rng.gen_range(dom.bbox_min[2]..dom.bbox_max[2]),
        );
        if dom.psi(&x) < -1e-6 * dom.diameter {
            return x;
        }
    }
}

/// Random boundary point: a random direction from the box center, projected.
pub fn random_boundary_point(dom: &ImplicitDomain, rng: &mut impl Rng) -> Vec3 {
    loop {
        let x = random_interior_point(dom, rng);
        let d = random_unit(rng);
        // walk out along d until the ray leaves, then project
        if let Ok(rec) = dom.backward_exit(&x, &d) {
            if let Ok(p) = dom.project_to_boundary(&rec.x_b) {
                return p;
            }
        }
    }
}

pub fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let d = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = d.norm();
        if n > 1e-3 && n <= 1.0 {
            return d / n;
        }
    }
}
