//! Smooth bounded domains given as level sets `Ω = {ψ < 0}`, with outward
//! normals, backward exit times and their derivatives.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeomError {
    #[error("gradient of the level function vanishes at {0:?}")]
    DegenerateGradient([f64; 3]),
    #[error("velocity below v_floor; the particle never leaves")]
    NoExit,
    #[error("ray is tangent to a flat piece of the boundary near s = {s}; refine march_step")]
    TangencyUnresolved { s: f64 },
    #[error("backward exit is grazing (v·n = {normal_dot_v})")]
    GrazingExit { normal_dot_v: f64 },
    #[error("point is not on the boundary (psi = {psi})")]
    NotOnBoundary { psi: f64 },
    #[error("velocity is not tangent to the boundary (v·n = {normal_dot_v})")]
    NotTangent { normal_dot_v: f64 },
    #[error("point lies outside the closed domain (psi = {psi})")]
    OutsideDomain { psi: f64 },
    #[error("unknown domain `{0}`")]
    DomainUnknown(String),
}

/// The analytic level functions shipped with the crate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// `|x|² − R²`.
    Ball { radius: f64 },
    /// Cassini surface of revolution about the x₁ axis,
    /// `(|x|² + a²)² − 4a²x₁² − b4`. For `a² < √b4 < 2a²` it has a neck.
    Peanut { a: f64, b4: f64 },
    /// `x₂² + x₃² − R² + ((|x₁| − L)₊ / R)⁴ R²`: a round bar whose side wall is
    /// a cylinder of length `2L`, closed by quartic caps. The side wall is
    /// ruled by straight segments.
    SlabCap { half_length: f64, radius: f64 },
}

impl Shape {
    pub fn value(&self, x: &Vec3) -> f64 {
        match *self {
            Shape::Ball { radius } => x.norm_squared() - radius * radius,
            Shape::Peanut { a, b4 } => {
                let q = x.norm_squared() + a * a;
                q * q - 4.0 * a * a * x[0] * x[0] - b4
            }
            Shape::SlabCap { half_length, radius } => {
                let e = (x[0].abs() - half_length).max(0.0) / radius;
                x[1] * x[1] + x[2] * x[2] - radius * radius + radius * radius * e.powi(4)
            }
        }
    }

    pub fn gradient(&self, x: &Vec3) -> Vec3 {
        match *self {
            Shape::Ball { .. } => 2.0 * x,
            Shape::Peanut { a, .. } => {
                let q = x.norm_squared() + a * a;
                let mut g = 4.0 * q * x;
                g[0] -= 8.0 * a * a * x[0];
                g
            }
            Shape::SlabCap { half_length, radius } => {
                let e = (x[0].abs() - half_length).max(0.0) / radius;
                let g0 = 4.0 * radius * e.powi(3) * x[0].signum();
                Vec3::new(g0, 2.0 * x[1], 2.0 * x[2])
            }
        }
    }

    pub fn hessian(&self, x: &Vec3) -> Mat3 {
        match *self {
            Shape::Ball { .. } => 2.0 * Mat3::identity(),
            Shape::Peanut { a, .. } => {
                let q = x.norm_squared() + a * a;
                let mut h = 4.0 * q * Mat3::identity() + 8.0 * x * x.transpose();
                h[(0, 0)] -= 8.0 * a * a;
                h
            }
            Shape::SlabCap { half_length, radius } => {
                let e = (x[0].abs() - half_length).max(0.0) / radius;
                let mut h = Mat3::zeros();
                h[(0, 0)] = 12.0 * e * e;
                h[(1, 1)] = 2.0;
                h[(2, 2)] = 2.0;
                h
            }
        }
    }

    fn bounding_box(&self) -> (Vec3, Vec3) {
        let (lo, hi) = match *self {
            Shape::Ball { radius } => (Vec3::repeat(-radius), Vec3::repeat(radius)),
            Shape::Peanut { a, b4 } => {
                let b2 = b4.sqrt();
                let x1 = (a * a + b2).sqrt();
                // widest cross-section: maximise r²(x₁) = √(b4 + 4a²x₁²) − x₁² − a²
                let u = ((4.0 * a.powi(4) - b4) / (4.0 * a * a)).max(0.0);
                let r2 = (b4 + 4.0 * a * a * u).sqrt() - u - a * a;
                let r = r2.max(b2 - a * a).max(0.0).sqrt();
                (Vec3::new(-x1, -r, -r), Vec3::new(x1, r, r))
            }
            Shape::SlabCap { half_length, radius } => {
                let l = half_length + radius;
                (Vec3::new(-l, -radius, -radius), Vec3::new(l, radius, radius))
            }
        };
        let pad = 1e-3 * (hi - lo).norm();
        (lo - Vec3::repeat(pad), hi + Vec3::repeat(pad))
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            Shape::Ball { radius } => vec![radius],
            Shape::Peanut { a, b4 } => vec![a, b4],
            Shape::SlabCap { half_length, radius } => vec![half_length, radius],
        }
    }
}

/// Numerical tolerances used by the root finder and the classifiers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub boundary_tol: f64,
    pub tangency_tol: f64,
    pub nontangency_floor: f64,
    pub v_floor: f64,
    pub grad_floor: f64,
    pub march_step: f64,
}

impl Tolerances {
    pub fn for_diameter(diameter: f64) -> Self {
        Tolerances {
            boundary_tol: 1e-12 * diameter,
            tangency_tol: 1e-7,
            nontangency_floor: 1e-6,
            v_floor: 1e-12,
            grad_floor: 1e-10,
            march_step: diameter / 1024.0,
        }
    }
}

/// Reference phase points stored with a catalog entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Witnesses {
    /// A concave grazing pair `(x0, v0)` with both rays staying inside.
    pub singular: Option<(Vec3, Vec3)>,
    /// A boundary pair `(z, v)` where the backward ray leaves at once and the
    /// forward ray stays inside (an inflection of the boundary profile).
    pub inflection_in: Option<(Vec3, Vec3)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitDomain {
    pub name: String,
    pub shape: Shape,
    pub bbox_min: Vec3,
    pub bbox_max: Vec3,
    pub diameter: f64,
    pub tol: Tolerances,
    pub witnesses: Witnesses,
}

/// Serializable handle for a domain: a catalog name plus its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainRecord {
    pub name: String,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitRecord {
    pub t_b: f64,
    pub x_b: Vec3,
    pub normal_dot_v: f64,
    pub tangential: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExitGradients {
    pub dtb_dx: Vec3,
    pub dtb_dv: Vec3,
    pub dxb_dx: Mat3,
    pub dxb_dv: Mat3,
}

impl ImplicitDomain {
    pub fn new(name: impl Into<String>, shape: Shape) -> Self {
        let (bbox_min, bbox_max) = shape.bounding_box();
        let diameter = (bbox_max - bbox_min).norm();
        ImplicitDomain {
            name: name.into(),
            shape,
            bbox_min,
            bbox_max,
            diameter,
            tol: Tolerances::for_diameter(diameter),
            witnesses: Witnesses { singular: None, inflection_in: None },
        }
    }

    pub fn record(&self) -> DomainRecord {
        DomainRecord { name: self.name.clone(), params: self.shape.params() }
    }

    #[inline]
    pub fn psi(&self, x: &Vec3) -> f64 {
        self.shape.value(x)
    }

    #[inline]
    pub fn grad(&self, x: &Vec3) -> Vec3 {
        self.shape.gradient(x)
    }

    #[inline]
    pub fn hessian(&self, x: &Vec3) -> Mat3 {
        self.shape.hessian(x)
    }

    pub fn contains_closed(&self, x: &Vec3) -> bool {
        self.psi(x) <= self.tol.boundary_tol
    }

    pub fn on_boundary(&self, x: &Vec3) -> bool {
        self.psi(x).abs() <= self.tol.boundary_tol
    }

    /// `∇ψ/|∇ψ|` at any point where the gradient is non-degenerate.
    pub fn normal_at(&self, x: &Vec3) -> Result<Vec3, GeomError> {
        let g = self.grad(x);
        let n = g.norm();
        if n < self.tol.grad_floor {
            return Err(GeomError::DegenerateGradient([x[0], x[1], x[2]]));
        }
        Ok(g / n)
    }

    pub fn outward_normal(&self, x: &Vec3) -> Result<Vec3, GeomError> {
        let psi = self.psi(x);
        if psi.abs() > self.tol.boundary_tol {
            return Err(GeomError::NotOnBoundary { psi });
        }
        self.normal_at(x)
    }

    /// Closest-point style projection onto `{ψ = 0}` by Newton steps along
    /// the gradient.
    pub fn project_to_boundary(&self, x: &Vec3) -> Result<Vec3, GeomError> {
        let mut p = *x;
        for _ in 0..100 {
            let f = self.psi(&p);
            if f.abs() <= 0.25 * self.tol.boundary_tol {
                return Ok(p);
            }
            let g = self.grad(&p);
            let g2 = g.norm_squared();
            if g2.sqrt() < self.tol.grad_floor {
                return Err(GeomError::DegenerateGradient([p[0], p[1], p[2]]));
            }
            p -= (f / g2) * g;
        }
        if self.on_boundary(&p) {
            Ok(p)
        } else {
            Err(GeomError::NotOnBoundary { psi: self.psi(&p) })
        }
    }

    /// `vᵀ∇²ψ(x0)v`, the second derivative of `s ↦ ψ(x0 + s v)` at 0.
    /// Negative values mean the boundary curves away from Ω along `v`.
    pub fn directional_concavity(&self, x0: &Vec3, v0: &Vec3) -> Result<f64, GeomError> {
        let n = self.outward_normal(x0)?;
        let ndv = n.dot(v0);
        if ndv.abs() > self.tol.tangency_tol * v0.norm() {
            return Err(GeomError::NotTangent { normal_dot_v: ndv });
        }
        Ok(v0.dot(&(self.hessian(x0) * v0)))
    }

    /// Normal curvature of the boundary along the unit direction of `v0`,
    /// i.e. the concavity above divided by `|∇ψ||v0|²`.
    pub fn normal_curvature(&self, x0: &Vec3, v0: &Vec3) -> Result<f64, GeomError> {
        let c = self.directional_concavity(x0, v0)?;
        Ok(c / (self.grad(x0).norm() * v0.norm_squared()))
    }

    /// Time for the ray `x − s v` to leave the bounding box.
    fn box_exit_time(&self, x: &Vec3, v: &Vec3) -> f64 {
        let mut s = f64::INFINITY;
        for i in 0..3 {
            if v[i] > 0.0 {
                s = s.min((x[i] - self.bbox_min[i]) / v[i]);
            } else if v[i] < 0.0 {
                s = s.min((x[i] - self.bbox_max[i]) / v[i]);
            }
        }
        s.max(0.0)
    }

    pub fn backward_exit(&self, x: &Vec3, v: &Vec3) -> Result<ExitRecord, GeomError> {
        match self.backward_exit_within(x, v, f64::INFINITY)? {
            Some(rec) => Ok(rec),
            None => Err(GeomError::NoExit),
        }
    }

    /// Backward exit restricted to `s ≤ s_cap`. Returns `None` when the ray
    /// stays inside on `(0, s_cap]`.
    pub fn backward_exit_within(&self, x: &Vec3, v: &Vec3, s_cap: f64) -> Result<Option<ExitRecord>, GeomError> {
        let speed = v.norm();
        if speed < self.tol.v_floor {
            return Err(GeomError::NoExit);
        }
        let tol = self.tol.boundary_tol;
        let f0 = self.psi(x);
        if f0 > tol {
            return Err(GeomError::OutsideDomain { psi: f0 });
        }
        let ray = Ray { dom: self, x: *x, v: *v };
        let ds = self.tol.march_step / speed;
        let s_end = s_cap.min(self.box_exit_time(x, v) + ds);

        let mut s_prev = 0.0;
        if f0 >= -tol {
            match ray.initial_side(speed)? {
                Side::Outside => return Ok(Some(self.record_at(x, v, 0.0, *x))),
                Side::Inside(s_start) => s_prev = s_start,
            }
        }
        if s_prev >= s_end {
            return Ok(None);
        }
        let mut d_prev = ray.df(s_prev);
        loop {
            let s = (s_prev + ds).min(s_end);
            let f = ray.f(s);
            let d = ray.df(s);
            if f >= 0.0 {
                let root = ray.refine_root(s_prev, s);
                return Ok(Some(self.record_at(x, v, root, x - root * v)));
            }
            if d_prev > 0.0 && d <= 0.0 {
                // f rises then falls: a hidden double crossing or a touch
                let sm = ray.refine_max(s_prev, s);
                let fm = ray.f(sm);
                if fm > tol {
                    let root = ray.refine_root(s_prev, sm);
                    return Ok(Some(self.record_at(x, v, root, x - root * v)));
                }
                if fm >= -tol {
                    let h = 0.25 * ds;
                    if ray.f(sm - h).abs() <= tol && ray.f(sm + h).abs() <= tol {
                        return Err(GeomError::TangencyUnresolved { s: sm });
                    }
                    let xb = x - sm * v;
                    let n = self.normal_at(&xb)?;
                    return Ok(Some(ExitRecord { t_b: sm, x_b: xb, normal_dot_v: n.dot(v), tangential: true }));
                }
            }
            if s >= s_end {
                return Ok(None);
            }
            s_prev = s;
            d_prev = d;
        }
    }

    fn record_at(&self, _x: &Vec3, v: &Vec3, t_b: f64, x_b: Vec3) -> ExitRecord {
        let normal_dot_v = match self.normal_at(&x_b) {
            Ok(n) => n.dot(v),
            Err(_) => 0.0,
        };
        ExitRecord { t_b, x_b, normal_dot_v, tangential: normal_dot_v.abs() <= self.tol.tangency_tol * v.norm() }
    }

    pub fn exit_time_gradients(&self, x: &Vec3, v: &Vec3) -> Result<ExitGradients, GeomError> {
        let rec = self.backward_exit(x, v)?;
        Self::gradients_from(&rec, &self.normal_at(&rec.x_b)?, v, self.tol.nontangency_floor)
    }

    fn gradients_from(rec: &ExitRecord, n: &Vec3, v: &Vec3, floor: f64) -> Result<ExitGradients, GeomError> {
        let vn = v.dot(n);
        if vn >= -floor * v.norm() {
            return Err(GeomError::GrazingExit { normal_dot_v: vn });
        }
        // differentiate ψ(x − t_b v) = 0 and x_b = x − t_b v
        let dtb_dx = n / vn;
        let dtb_dv = -rec.t_b * n / vn;
        let dxb_dx = Mat3::identity() - v * dtb_dx.transpose();
        let dxb_dv = -rec.t_b * Mat3::identity() - v * dtb_dv.transpose();
        Ok(ExitGradients { dtb_dx, dtb_dv, dxb_dx, dxb_dv })
    }
}

enum Side {
    Outside,
    /// Inside; the march may start at this parameter.
    Inside(f64),
}

struct Ray<'a> {
    dom: &'a ImplicitDomain,
    x: Vec3,
    v: Vec3,
}

impl Ray<'_> {
    #[inline]
    fn f(&self, s: f64) -> f64 {
        self.dom.psi(&(self.x - s * self.v))
    }

    #[inline]
    fn df(&self, s: f64) -> f64 {
        -self.v.dot(&self.dom.grad(&(self.x - s * self.v)))
    }

    fn f2(&self, s: f64) -> f64 {
        self.v.dot(&(self.dom.hessian(&(self.x - s * self.v)) * self.v))
    }

    /// Decide which side a ray starting on the boundary moves into.
    fn initial_side(&self, speed: f64) -> Result<Side, GeomError> {
        let tol = self.dom.tol.boundary_tol;
        let gnorm = self.dom.grad(&self.x).norm();
        let slope = self.df(0.0);
        let flat = self.dom.tol.tangency_tol * speed * gnorm;
        let decided = if slope > flat {
            Some(false)
        } else if slope < -flat {
            Some(true)
        } else {
            let c = self.f2(0.0);
            let curv_floor = 1e-6 * speed * speed * gnorm / self.dom.diameter;
            if c > curv_floor {
                Some(false)
            } else if c < -curv_floor {
                Some(true)
            } else {
                None
            }
        };
        let inside = match decided {
            Some(b) => b,
            None => {
                let mut out = None;
                for k in 0..=10 {
                    let s = 1e-8 * 10f64.powf(0.5 * k as f64) * self.dom.diameter / speed;
                    let f = self.f(s);
                    if f > tol {
                        out = Some(false);
                        break;
                    }
                    if f < -tol {
                        out = Some(true);
                        break;
                    }
                }
                match out {
                    Some(b) => b,
                    None => return Err(GeomError::TangencyUnresolved { s: 0.0 }),
                }
            }
        };
        if !inside {
            return Ok(Side::Outside);
        }
        // smallest probe that is strictly inside
        let ds = self.dom.tol.march_step / speed;
        let mut s = 1e-10 * self.dom.diameter / speed;
        while s < ds {
            if self.f(s) < -tol {
                return Ok(Side::Inside(s));
            }
            s *= 2.0;
        }
        Ok(Side::Inside(ds))
    }

    /// Root of `f` in `[a, b]` with `f(a) < 0 ≤ f(b)`.
    fn refine_root(&self, mut a: f64, mut b: f64) -> f64 {
        let tol = self.dom.tol.boundary_tol;
        for _ in 0..60 {
            let m = 0.5 * (a + b);
            if m <= a || m >= b {
                break;
            }
            if self.f(m) < 0.0 {
                a = m;
            } else {
                b = m;
            }
        }
        // Newton polish kept inside the bracket; prefer the outer end
        let mut s = b;
        for _ in 0..8 {
            let f = self.f(s);
            if f.abs() < tol {
                break;
            }
            let d = self.df(s);
            if d == 0.0 {
                break;
            }
            let next = s - f / d;
            if next < a || next > b {
                break;
            }
            s = next;
        }
        s
    }

    /// Location of the maximum of `f` in `[a, b]` with `f'(a) > 0 ≥ f'(b)`.
    fn refine_max(&self, mut a: f64, mut b: f64) -> f64 {
        for _ in 0..80 {
            let m = 0.5 * (a + b);
            if m <= a || m >= b {
                break;
            }
            if self.df(m) > 0.0 {
                a = m;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    }
}

/// Peanut profile radius `r(x₁)` on the boundary, or `None` past the tips.
pub fn peanut_profile(a: f64, b4: f64, x1: f64) -> Option<f64> {
    let r2 = (b4 + 4.0 * a * a * x1 * x1).sqrt() - x1 * x1 - a * a;
    (r2 >= 0.0).then(|| r2.sqrt())
}

fn peanut_witnesses(dom: &ImplicitDomain, a: f64, b4: f64) -> Witnesses {
    let r0 = peanut_profile(a, b4, 0.0).expect("peanut must have a neck");
    let x0 = Vec3::new(0.0, r0, 0.0);
    let v0 = Vec3::new(1.0, 0.0, 0.0);
    // Inflection of the meridian profile between the neck and the widest
    // section: the tangent concavity changes sign there.
    let point = |x1: f64| Vec3::new(x1, peanut_profile(a, b4, x1).unwrap(), 0.0);
    let tangent = |p: &Vec3| {
        let g = dom.grad(p);
        let t = Vec3::new(g[1], -g[0], 0.0);
        t / t.norm()
    };
    let sign_at = |x1: f64| {
        let p = point(x1);
        let t = tangent(&p);
        t.dot(&(dom.hessian(&p) * t))
    };
    let widest = (((4.0 * a.powi(4) - b4) / (4.0 * a * a)).max(0.0)).sqrt();
    let (mut lo, mut hi) = (0.0, widest);
    let inflection_in = if sign_at(lo) < 0.0 && sign_at(hi) > 0.0 {
        for _ in 0..200 {
            let m = 0.5 * (lo + hi);
            if sign_at(m) < 0.0 {
                lo = m;
            } else {
                hi = m;
            }
        }
        let z = dom.project_to_boundary(&point(0.5 * (lo + hi))).ok();
        z.map(|z| {
            // tangent pointing from the lobe towards the neck
            let mut t = tangent(&z);
            if t[0] > 0.0 {
                t = -t;
            }
            (z, t)
        })
    } else {
        None
    };
    Witnesses { singular: Some((x0, v0)), inflection_in }
}

pub const CATALOG_NAMES: [&str; 3] = ["ball", "peanut", "slab_cap"];

/// Builds a catalog domain from its name and parameter list.
pub fn domain_from_record(rec: &DomainRecord) -> Result<ImplicitDomain, GeomError> {
    let p = &rec.params;
    let get = |i: usize, d: f64| p.get(i).copied().unwrap_or(d);
    let dom = match rec.name.as_str() {
        "ball" => ImplicitDomain::new("ball", Shape::Ball { radius: get(0, 1.0) }),
        "peanut" => {
            let (a, b4) = (get(0, 1.0), get(1, 1.5));
            let mut d = ImplicitDomain::new("peanut", Shape::Peanut { a, b4 });
            d.witnesses = peanut_witnesses(&d, a, b4);
            d
        }
        "slab_cap" => {
            ImplicitDomain::new("slab_cap", Shape::SlabCap { half_length: get(0, 0.75), radius: get(1, 0.5) })
        }
        other => return Err(GeomError::DomainUnknown(other.to_string())),
    };
    Ok(dom)
}

pub fn builtin_domain(name: &str) -> Result<ImplicitDomain, GeomError> {
    domain_from_record(&DomainRecord { name: name.to_string(), params: vec![] })
}

pub fn builtin_domains() -> Vec<ImplicitDomain> {
    CATALOG_NAMES.iter().map(|n| builtin_domain(n).unwrap()).collect()
}
