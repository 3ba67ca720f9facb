//! Hard-potential cutoff collision operator: kernel, collision frequency,
//! gain/loss terms (direct and Carleman), the linearized operators `K_w`,
//! `Γ±`, and the velocity changes of variables used near the hyperplanes
//! `E_{vv′}`.

use crate::geometry::Vec3;
use crate::quadrature::{bessel_i0e, gauss_legendre_on, sphere_rule, ShellRule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OpError {
    #[error("quadrature under-resolved: {coarse} vs refined {fine}")]
    QuadratureUnderresolved { coarse: f64, fine: f64 },
    #[error("v′ coincides with v")]
    SingularVPrime,
    #[error("degenerate direction |v′ − v| = {0}")]
    DegenerateDirection(f64),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// `B(v − u, ω) = |v − u|^γ q0` with constant angular part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelParams {
    pub gamma_exp: f64,
    pub q0_const: f64,
}

impl Default for KernelParams {
    /// Hard spheres with `q0` normalizing μ to a unit-mass Gaussian, so that
    /// ν(0) = √(8/π).
    fn default() -> Self {
        KernelParams { gamma_exp: 1.0, q0_const: 1.0 / (4.0 * PI * (2.0 * PI).powf(1.5)) }
    }
}

impl KernelParams {
    pub fn new(gamma_exp: f64, q0_const: f64) -> Result<Self, OpError> {
        if !(gamma_exp > 0.0 && gamma_exp <= 1.0) {
            return Err(OpError::InvalidParams(format!("gamma_exp = {gamma_exp} not in (0, 1]")));
        }
        if !(q0_const > 0.0 && q0_const.is_finite()) {
            return Err(OpError::InvalidParams(format!("q0_const = {q0_const}")));
        }
        Ok(KernelParams { gamma_exp, q0_const })
    }

    /// `∫_{S²} q0 dω`.
    pub fn angular_mass(&self) -> f64 {
        4.0 * PI * self.q0_const
    }
}

pub fn mu(v: &Vec3) -> f64 {
    (-0.5 * v.norm_squared()).exp()
}

pub fn sqrt_mu(v: &Vec3) -> f64 {
    (-0.25 * v.norm_squared()).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightSet {
    pub rho: f64,
    pub beta: f64,
}

impl Default for WeightSet {
    fn default() -> Self {
        WeightSet { rho: 1.0, beta: 2.0 }
    }
}

impl WeightSet {
    pub fn new(rho: f64, beta: f64) -> Result<Self, OpError> {
        if !(rho > 0.0) || !(beta >= 2.0) {
            return Err(OpError::InvalidParams(format!("rho = {rho}, beta = {beta}")));
        }
        Ok(WeightSet { rho, beta })
    }

    fn base(&self, v: &Vec3) -> f64 {
        1.0 + self.rho * self.rho * v.norm_squared()
    }

    /// `w(v) = (1 + ρ²|v|²)^β`
    pub fn w(&self, v: &Vec3) -> f64 {
        self.base(v).powf(self.beta)
    }

    /// `w̄(v) = e^{−|v|²/4} (1 + ρ²|v|²)^{−β}`
    pub fn w_bar(&self, v: &Vec3) -> f64 {
        sqrt_mu(v) / self.w(v)
    }

    /// `w̃(v) = e^{|v|²/4} (1 + ρ²|v|²)^{−β} = 1/(w√μ)`
    pub fn w_tilde(&self, v: &Vec3) -> f64 {
        (0.25 * v.norm_squared()).exp() / self.w(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuadScheme {
    /// Spherical product rule: Gauss–Legendre radius × (cos θ, φ) grid.
    Tensor {
        n_r: usize,
        n_polar: usize,
        n_azimuth: usize,
    },
    MonteCarlo {
        seed: u64,
        samples: usize,
    },
}

/// Discretization of `∫_{R³} du` and `∫_{S²} dω`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VelocityQuadrature {
    pub scheme: QuadScheme,
    pub omega_polar: usize,
    pub omega_azimuth: usize,
    pub cutoff_n: f64,
}

impl Default for VelocityQuadrature {
    fn default() -> Self {
        VelocityQuadrature {
            scheme: QuadScheme::Tensor { n_r: 32, n_polar: 12, n_azimuth: 24 },
            omega_polar: 12,
            omega_azimuth: 24,
            cutoff_n: 8.0,
        }
    }
}

impl VelocityQuadrature {
    pub fn node_count(&self) -> usize {
        match self.scheme {
            QuadScheme::Tensor { n_r, n_polar, n_azimuth } => n_r * n_polar * n_azimuth,
            QuadScheme::MonteCarlo { samples, .. } => samples,
        }
    }

    pub fn refined(&self) -> Self {
        let mut q = *self;
        q.scheme = match self.scheme {
            QuadScheme::Tensor { n_r, n_polar, n_azimuth } => {
                QuadScheme::Tensor { n_r: 2 * n_r, n_polar: n_polar + 4, n_azimuth: n_azimuth + 8 }
            }
            QuadScheme::MonteCarlo { seed, samples } => QuadScheme::MonteCarlo { seed, samples: 2 * samples },
        };
        q.omega_polar += 4;
        q.omega_azimuth += 8;
        q
    }

    /// Nodes `(u, weight, |u − v|)` covering the mass of an integrand that
    /// decays on the scale `spread·cutoff_n` around the origin. The ball is
    /// centered at `v` (so that `|u − v|^γ` is smooth in the radius) unless
    /// `v` is far out, where the origin carries the mass.
    pub fn ball_nodes(&self, v: &Vec3, spread: f64) -> Vec<(Vec3, f64, f64)> {
        let reach = spread * self.cutoff_n;
        let (center, radius) =
            if v.norm() <= 0.5 * self.cutoff_n { (*v, v.norm() + reach) } else { (Vec3::zeros(), reach) };
        match self.scheme {
            QuadScheme::Tensor { n_r, n_polar, n_azimuth } => ShellRule::new(n_r, n_polar, n_azimuth, radius)
                .iter()
                .map(|(r, d, w)| {
                    let u = center + r * d;
                    (u, w, (u - v).norm())
                })
                .collect(),
            QuadScheme::MonteCarlo { seed, samples } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let vol = 4.0 / 3.0 * PI * radius.powi(3);
                let w = vol / samples as f64;
                (0..samples)
                    .map(|_| {
                        let u = loop {
                            let p =
                                Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                            if p.norm_squared() <= 1.0 {
                                break center + radius * p;
                            }
                        };
                        (u, w, (u - v).norm())
                    })
                    .collect()
            }
        }
    }

    pub fn omega_nodes(&self) -> Vec<(Vec3, f64)> {
        sphere_rule(self.omega_polar, self.omega_azimuth)
    }
}

/// Evaluate `f` on `quad` and on its refinement; fail when they differ by
/// more than `rtol` relative to `max(|refined|, floor)`.
pub fn checked(
    quad: &VelocityQuadrature,
    rtol: f64,
    floor: f64,
    f: impl Fn(&VelocityQuadrature) -> f64,
) -> Result<f64, OpError> {
    let coarse = f(quad);
    let fine = f(&quad.refined());
    if (coarse - fine).abs() > rtol * fine.abs().max(floor) {
        return Err(OpError::QuadratureUnderresolved { coarse, fine });
    }
    Ok(fine)
}

pub fn kernel_b(params: &KernelParams, rel_v: &Vec3, _omega: &Vec3) -> f64 {
    params.q0_const * rel_v.norm().powf(params.gamma_exp)
}

/// Post-collisional pair `(v′, u′)`.
pub fn collide(v: &Vec3, u: &Vec3, omega: &Vec3) -> (Vec3, Vec3) {
    let s = (v - u).dot(omega);
    (v - s * omega, u + s * omega)
}

/// `ν(v) = ∫∫ B(v − u, ω) μ(u) dω du`.
pub fn collision_frequency(params: &KernelParams, quad: &VelocityQuadrature, v: &Vec3) -> f64 {
    let g = params.gamma_exp;
    params.angular_mass() * quad.ball_nodes(v, 1.0).iter().map(|(u, w, r)| w * r.powf(g) * mu(u)).sum::<f64>()
}

/// `ν_w(v) = ∫∫ B(v − u, ω) e^{−|u|²/4} w⁻¹(u) dω du`.
pub fn nu_weighted(params: &KernelParams, weights: &WeightSet, quad: &VelocityQuadrature, v: &Vec3) -> f64 {
    let g = params.gamma_exp;
    params.angular_mass()
        * quad.ball_nodes(v, 1.5).iter().map(|(u, w, r)| w * r.powf(g) * sqrt_mu(u) / weights.w(u)).sum::<f64>()
}

/// Gain term `Q₊(F1, F2)(v) = ∫∫ B(v − u, ω) F1(u′) F2(v′) dω du`.
pub fn q_plus_direct(
    params: &KernelParams,
    quad: &VelocityQuadrature,
    f1: impl Fn(&Vec3) -> f64,
    f2: impl Fn(&Vec3) -> f64,
    v: &Vec3,
) -> f64 {
    let omegas = quad.omega_nodes();
    let g = params.gamma_exp;
    let mut total = 0.0;
    for (u, wu, r) in quad.ball_nodes(v, std::f64::consts::SQRT_2) {
        let b = params.q0_const * r.powf(g);
        if b == 0.0 {
            continue;
        }
        let mut inner = 0.0;
        for (om, wo) in &omegas {
            let (vp, up) = collide(v, &u, om);
            inner += wo * f1(&up) * f2(&vp);
        }
        total += wu * b * inner;
    }
    total
}

/// Loss term `Q₋(F1, F2)(v) = F2(v) ∫∫ B(v − u, ω) F1(u) dω du`.
pub fn q_minus_direct(
    params: &KernelParams,
    quad: &VelocityQuadrature,
    f1: impl Fn(&Vec3) -> f64,
    f2: impl Fn(&Vec3) -> f64,
    v: &Vec3,
) -> f64 {
    let f2v = f2(v);
    if f2v == 0.0 {
        return 0.0;
    }
    f2v * loss_frequency(params, quad, f1, v)
}

/// `∫∫ B(v − u, ω) F(u) dω du`.
pub fn loss_frequency(params: &KernelParams, quad: &VelocityQuadrature, f: impl Fn(&Vec3) -> f64, v: &Vec3) -> f64 {
    let g = params.gamma_exp;
    params.angular_mass()
        * quad.ball_nodes(v, std::f64::consts::SQRT_2).iter().map(|(u, w, r)| w * r.powf(g) * f(u)).sum::<f64>()
}

/// Node counts for the Carleman form: outer shells around `v` and a planar
/// tensor rule on `E_{vv′}` centered at the foot of the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarlemanRule {
    pub n_r: usize,
    pub n_polar: usize,
    pub n_azimuth: usize,
    pub plane_n: usize,
    pub cutoff_n: f64,
}

impl Default for CarlemanRule {
    fn default() -> Self {
        CarlemanRule { n_r: 32, n_polar: 12, n_azimuth: 24, plane_n: 48, cutoff_n: 8.0 }
    }
}

/// Carleman form of the gain term with `ψ` at `v′` and `φ` on the plane:
/// `2∫ ψ(v′)|v − v′|⁻² ∫_{E_{vv′}} φ(v₁′) B(2v − v′ − v₁′) dv₁′ dv′`,
/// which equals `Q₊(φ, ψ)(v)`. Outer nodes with `ψ(v′) = 0` are skipped.
pub fn q_plus_carleman(
    params: &KernelParams,
    rule: &CarlemanRule,
    psi: impl Fn(&Vec3) -> f64,
    phi: impl Fn(&Vec3) -> f64,
    v: &Vec3,
) -> Result<f64, OpError> {
    let outer = ShellRule::new(rule.n_r, rule.n_polar, rule.n_azimuth, v.norm() + rule.cutoff_n);
    let plane = gauss_legendre_on(rule.plane_n, -rule.cutoff_n, rule.cutoff_n);
    let mut total = 0.0;
    for &(r, wr) in &outer.radial {
        if r < 1e-12 {
            return Err(OpError::SingularVPrime);
        }
        for &(d, wd) in &outer.sphere {
            let vp = v + r * d;
            let p = psi(&vp);
            if p == 0.0 {
                continue;
            }
            let inner = plane_integral(params, &plane, &phi, v, &vp)?;
            // the r² of the shell volume cancels |v − v′|⁻²
            total += wr * wd * 2.0 * p * params.q0_const * inner;
        }
    }
    Ok(total)
}

/// `∫_{E_{vv′}} φ(v₁′) |2v − v′ − v₁′|^γ dv₁′` on a tensor rule `plane` (offsets
/// from the foot of the origin on the plane), without the `q0` factor.
pub fn plane_integral(
    params: &KernelParams,
    plane: &[(f64, f64)],
    phi: impl Fn(&Vec3) -> f64,
    v: &Vec3,
    v_prime: &Vec3,
) -> Result<f64, OpError> {
    let (e1, e2, _) = hyperplane_frame(v, v_prime)?;
    let r2 = (v_prime - v).norm_squared();
    let c1 = -v.dot(&e1);
    let c2 = -v.dot(&e2);
    let g = params.gamma_exp;
    let mut inner = 0.0;
    for &(a, wa) in plane {
        let eta1 = c1 + a;
        for &(b, wb) in plane {
            let eta2 = c2 + b;
            let v1 = v + eta1 * e1 + eta2 * e2;
            inner += wa * wb * phi(&v1) * (r2 + eta1 * eta1 + eta2 * eta2).powf(0.5 * g);
        }
    }
    Ok(inner)
}

/// Orthonormal right-handed frame with `ẽ3 = (v′ − v)/|v′ − v|`; `ẽ1` comes
/// from the coordinate axis least aligned with `ẽ3` (lowest index on ties).
pub fn hyperplane_frame(v: &Vec3, v_prime: &Vec3) -> Result<(Vec3, Vec3, Vec3), OpError> {
    let d = v_prime - v;
    let n = d.norm();
    if n <= 1e-12 {
        return Err(OpError::DegenerateDirection(n));
    }
    let e3 = d / n;
    let mut k = 0;
    for i in 1..3 {
        if e3[i].abs() < e3[k].abs() {
            k = i;
        }
    }
    let mut axis = Vec3::zeros();
    axis[k] = 1.0;
    let e1 = (axis - axis.dot(&e3) * e3).normalize();
    let e2 = e3.cross(&e1);
    Ok((e1, e2, e3))
}

/// `v″ = v′ − (v − v̄)`.
pub fn cov_shift(v: &Vec3, v_bar: &Vec3, v_prime: &Vec3) -> Vec3 {
    v_prime - (v - v_bar)
}

/// `v₁″ = v₁′ + ê ((v̄ − v)·ê)` with `ê = (v′ − v)/|v′ − v|`.
pub fn cov_plane(v: &Vec3, v_prime: &Vec3, v_bar: &Vec3, v1_prime: &Vec3) -> Result<Vec3, OpError> {
    let d = v_prime - v;
    let n = d.norm();
    if n <= 1e-12 {
        return Err(OpError::DegenerateDirection(n));
    }
    let e = d / n;
    Ok(v1_prime + e * (v_bar - v).dot(&e))
}

/// Central projection of the unit sphere onto `E_{vv′}`:
/// `u ↦ (v·(v′ − v))/(u·(v′ − v)) u`.
pub fn projection_map(v: &Vec3, v_prime: &Vec3, u: &Vec3) -> Vec3 {
    let d = v_prime - v;
    (v.dot(&d) / u.dot(&d)) * u
}

/// `K_w h(v) = w(v) K(h/w)(v)` assembled from the three Q-operator calls,
/// `K f = μ^{−1/2}[Q₊(μ, √μf) + Q₊(√μf, μ) − Q₋(√μf, μ)]`.
pub fn apply_kw(
    params: &KernelParams,
    weights: &WeightSet,
    quad: &VelocityQuadrature,
    h: impl Fn(&Vec3) -> f64,
    v: &Vec3,
) -> f64 {
    let g = |u: &Vec3| sqrt_mu(u) * h(u) / weights.w(u);
    let a = q_plus_direct(params, quad, mu, g, v);
    let b = q_plus_direct(params, quad, g, mu, v);
    let c = q_minus_direct(params, quad, g, mu, v);
    weights.w(v) * (a + b - c) / sqrt_mu(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaPart {
    Plus,
    Minus,
}

/// `plus`: `w μ^{−1/2} Q₊(√μ h1/w, √μ h2/w)(v)`; `minus`: `ν_{h1}(v) h2(v)`.
pub fn apply_gamma(
    params: &KernelParams,
    weights: &WeightSet,
    quad: &VelocityQuadrature,
    h1: impl Fn(&Vec3) -> f64,
    h2: impl Fn(&Vec3) -> f64,
    v: &Vec3,
    part: GammaPart,
) -> f64 {
    match part {
        GammaPart::Plus => {
            let f1 = |u: &Vec3| sqrt_mu(u) * h1(u) / weights.w(u);
            let f2 = |u: &Vec3| sqrt_mu(u) * h2(u) / weights.w(u);
            weights.w(v) * q_plus_direct(params, quad, f1, f2, v) / sqrt_mu(v)
        }
        GammaPart::Minus => {
            let h2v = h2(v);
            if h2v == 0.0 {
                return 0.0;
            }
            h2v * loss_frequency(params, quad, |u| sqrt_mu(u) * h1(u) / weights.w(u), v)
        }
    }
}

/// Velocity rule for the explicit-kernel route: shells of the given radius
/// centered at the evaluation velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelRule {
    pub n_r: usize,
    pub n_polar: usize,
    pub n_azimuth: usize,
    pub radius: f64,
    pub rho_nodes: usize,
}

impl Default for KernelRule {
    fn default() -> Self {
        KernelRule { n_r: 24, n_polar: 8, n_azimuth: 16, radius: 12.0, rho_nodes: 40 }
    }
}

/// `K` written as an integral operator `Kf(v) = ∫ k(v, u) f(u) du`, with the
/// two gain kernels obtained from the Carleman form by integrating the plane
/// in polar coordinates (the angular part gives a Bessel `I₀`).
#[derive(Debug, Clone)]
pub struct KernelOperator {
    pub params: KernelParams,
    pub weights: WeightSet,
    pub rule: KernelRule,
    shells: ShellRule,
    rho_unit: Vec<(f64, f64)>,
}

/// Precomputed weights at one velocity: `K_w h(v) ≈ Σ k_weights[j] h(nodes[j])`
/// and `ν_h(v) ≈ Σ nu_weights[j] h(nodes[j])`.
#[derive(Debug, Clone)]
pub struct KernelStencil {
    pub nodes: Vec<Vec3>,
    pub k_weights: Vec<f64>,
    pub nu_weights: Vec<f64>,
}

impl KernelStencil {
    pub fn apply(&self, values: &[f64]) -> (f64, f64) {
        let mut k = 0.0;
        let mut n = 0.0;
        for ((a, b), h) in self.k_weights.iter().zip(&self.nu_weights).zip(values) {
            k += a * h;
            n += b * h;
        }
        (k, n)
    }
}

const RHO_SPAN: f64 = 9.0;

impl KernelOperator {
    pub fn new(params: KernelParams, weights: WeightSet, rule: KernelRule) -> Self {
        KernelOperator {
            params,
            weights,
            rule,
            shells: ShellRule::new(rule.n_r, rule.n_polar, rule.n_azimuth, rule.radius),
            rho_unit: gauss_legendre_on(rule.rho_nodes, 0.0, 1.0),
        }
    }

    /// `(∫(ρ²+r²)^{γ/2} g dρ, ∫ρ(ρ²+r²)^{γ/2} g dρ)` with
    /// `g = e^{−(ρ−a)²/2} e^{−ρa} I₀(ρa)`.
    fn radial_integrals(&self, r: f64, a: f64) -> (f64, f64) {
        let lo = (a - RHO_SPAN).max(0.0);
        let hi = a + RHO_SPAN;
        let len = hi - lo;
        let g = self.params.gamma_exp;
        let (mut ja, mut jb) = (0.0, 0.0);
        for &(t, w) in &self.rho_unit {
            let rho = lo + len * t;
            let f = (rho * rho + r * r).powf(0.5 * g) * (-0.5 * (rho - a).powi(2)).exp() * bessel_i0e(rho * a);
            ja += w * f;
            jb += w * rho * f;
        }
        (ja * len, jb * len)
    }

    /// `k(v, u)` such that `Kf(v) = ∫ k(v, u) f(u) du`.
    pub fn k(&self, v: &Vec3, u: &Vec3) -> f64 {
        let d = u - v;
        let r = d.norm();
        if r < 1e-14 {
            return 0.0;
        }
        let e = d / r;
        let ve = v.dot(&e);
        let a = (v - ve * e).norm();
        let damp = (-0.5 * ((ve + 0.5 * r).powi(2) + 0.25 * r * r)).exp();
        let (ja, jb) = self.radial_integrals(r, a);
        let loss = (-0.25 * (v.norm_squared() + u.norm_squared())).exp() * r.powf(self.params.gamma_exp);
        self.params.angular_mass() * (damp * (jb / (r * r) + ja / r) - loss)
    }

    pub fn stencil(&self, v: &Vec3) -> KernelStencil {
        self.stencil_at(v, &self.general_nodes(v))
    }

    /// Shell nodes `(u, weight)` centered at `v` with the rule's radius.
    pub fn general_nodes(&self, v: &Vec3) -> Vec<(Vec3, f64)> {
        self.shells.iter().map(|(r, d, w)| (v + r * d, w)).collect()
    }

    /// Nodes covering `B(center, radius)` only, for integrands that vanish
    /// outside it. When `v` is near the ball the shells stay centered at `v`
    /// so the `1/|u − v|` factor of the kernel is cancelled by the Jacobian.
    pub fn ball_nodes(&self, v: &Vec3, center: &Vec3, radius: f64) -> Vec<(Vec3, f64)> {
        let d = (v - center).norm();
        let (origin, reach) = if d <= 2.0 * radius { (*v, d + radius) } else { (*center, radius) };
        let scale = reach / self.rule.radius;
        let s3 = scale.powi(3);
        self.shells
            .iter()
            .map(|(r, dir, w)| (origin + scale * r * dir, s3 * w))
            .filter(|(u, _)| (u - center).norm() <= radius)
            .collect()
    }

    pub fn stencil_at(&self, v: &Vec3, nodes: &[(Vec3, f64)]) -> KernelStencil {
        let wv = self.weights.w(v);
        let g = self.params.gamma_exp;
        let am = self.params.angular_mass();
        let mut out = KernelStencil {
            nodes: Vec::with_capacity(nodes.len()),
            k_weights: Vec::with_capacity(nodes.len()),
            nu_weights: Vec::with_capacity(nodes.len()),
        };
        for &(u, w) in nodes {
            let wu = self.weights.w(&u);
            out.nodes.push(u);
            out.k_weights.push(w * wv * self.k(v, &u) / wu);
            out.nu_weights.push(w * am * (u - v).norm().powf(g) * sqrt_mu(&u) / wu);
        }
        out
    }

    /// `K_w h(v)` through the explicit kernel.
    pub fn apply_kw(&self, h: impl Fn(&Vec3) -> f64, v: &Vec3) -> f64 {
        let s = self.stencil(v);
        let vals: Vec<f64> = s.nodes.iter().map(&h).collect();
        s.apply(&vals).0
    }

    /// `∫ |k_w(v, u)| du`, the operator norm of `K_w` on bounded functions at `v`.
    pub fn kw_row_norm(&self, v: &Vec3) -> f64 {
        self.stencil(v).k_weights.iter().map(|x| x.abs()).sum()
    }
}

/// Fitted operator bounds over `|v| ≤ v_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorConstants {
    pub c_nu: f64,
    pub c_w: f64,
    pub c_k: f64,
    pub c_gamma: f64,
    pub v_max: f64,
    pub samples: usize,
}

/// Two-sided ratio constant `C` with `f/g ∈ [1/C, C]`.
fn two_sided(ratios: &[f64]) -> f64 {
    let hi = ratios.iter().cloned().fold(f64::MIN, f64::max);
    let lo = ratios.iter().cloned().fold(f64::MAX, f64::min);
    hi.max(1.0 / lo)
}

pub fn fit_operator_constants(
    params: &KernelParams,
    weights: &WeightSet,
    quad: &VelocityQuadrature,
    kop: &KernelOperator,
    v_max: f64,
    samples: usize,
) -> OperatorConstants {
    let g = params.gamma_exp;
    let speeds: Vec<f64> = (0..samples).map(|i| v_max * i as f64 / (samples - 1) as f64).collect();
    let mut r_nu = Vec::new();
    let mut r_w = Vec::new();
    let mut c_k: f64 = 0.0;
    let mut c_gamma: f64 = 0.0;
    for &s in &speeds {
        let v = Vec3::new(s, 0.0, 0.0);
        let scale = (1.0 + s).powf(g);
        r_nu.push(collision_frequency(params, quad, &v) / scale);
        r_w.push(nu_weighted(params, weights, quad, &v) / scale);
        c_k = c_k.max(kop.kw_row_norm(&v));
        let env = |u: &Vec3| sqrt_mu(u) / weights.w(u);
        let plus = weights.w(&v) * q_plus_direct(params, quad, env, env, &v) / sqrt_mu(&v);
        let minus = loss_frequency(params, quad, env, &v);
        c_gamma = c_gamma.max((plus + minus) / scale);
    }
    OperatorConstants { c_nu: two_sided(&r_nu), c_w: two_sided(&r_w), c_k, c_gamma, v_max, samples }
}
