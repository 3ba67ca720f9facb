//! Free streaming, bounce-back back-time cycles and the diffuse wall measure.

use crate::collision_ops::WeightSet;
use crate::geometry::{GeomError, ImplicitDomain, Vec3};
use crate::phase_topology::tangent_frame;
use crate::quadrature::{gauss_laguerre, gauss_legendre_on};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Normalization of the diffuse wall measure `c_μ μ(v)(n·v) dv`.
pub const C_MU: f64 = 1.0 / (2.0 * PI);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrajError {
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error("bounce {k} lands tangentially (n·v = {normal_dot_v})")]
    GrazingCycle { k: usize, normal_dot_v: f64 },
    #[error("cycle start lies on γ0 ∪ γ−")]
    InvalidStart,
}

pub fn stream(x: &Vec3, v: &Vec3, dt: f64) -> Vec3 {
    x + dt * v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleEntry {
    pub t: f64,
    pub x: Vec3,
    pub v: Vec3,
}

/// Back-time cycle `(t_k, x_k, v_k)` under bounce-back reflection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BounceCycle {
    pub entries: Vec<CycleEntry>,
    pub period_d: f64,
    /// Set when the recursion stopped at `k_max` with `t_k` still positive.
    pub truncated_at: Option<usize>,
}

impl BounceCycle {
    fn segment(&self, s: f64) -> Option<&CycleEntry> {
        let n = self.entries.len();
        for k in 0..n {
            let e = &self.entries[k];
            let lower = if k + 1 < n { self.entries[k + 1].t } else { f64::NEG_INFINITY };
            if s <= e.t && s > lower {
                return Some(e);
            }
        }
        None
    }

    /// `X_cl(s)`, position on the cycle at time `s ≤ t`.
    pub fn x_cl(&self, s: f64) -> Option<Vec3> {
        self.segment(s).map(|e| e.x + (s - e.t) * e.v)
    }

    pub fn v_cl(&self, s: f64) -> Option<Vec3> {
        self.segment(s).map(|e| e.v)
    }
}

/// Definition of the cycle: `t_{k+1} = t_k − t_b(x_k, v_k)`,
/// `x_{k+1} = x_b(x_k, v_k)`, `v_{k+1} = −v_k`, until `t_{k+1} ≤ 0` or `k_max`.
pub fn bounce_cycle(dom: &ImplicitDomain, t: f64, x: &Vec3, v: &Vec3, k_max: usize) -> Result<BounceCycle, TrajError> {
    let speed = v.norm();
    if speed < dom.tol.v_floor {
        return Err(GeomError::DegenerateGradient([v.x, v.y, v.z]).into());
    }
    if dom.on_boundary(x) {
        let n = dom.normal_at(x)?;
        if n.dot(v) <= dom.tol.tangency_tol * speed {
            return Err(TrajError::InvalidStart);
        }
    }
    let tb_fwd = dom.backward_exit(x, v)?.t_b;
    let tb_bwd = dom.backward_exit(x, &(-v))?.t_b;
    let mut entries = vec![CycleEntry { t, x: *x, v: *v }];
    let mut truncated_at = None;
    loop {
        let k = entries.len() - 1;
        let cur = entries[k];
        if cur.t <= 0.0 {
            break;
        }
        if k == k_max {
            truncated_at = Some(k);
            break;
        }
        let rec = dom.backward_exit(&cur.x, &cur.v)?;
        if rec.tangential || rec.normal_dot_v.abs() <= dom.tol.tangency_tol * speed {
            return Err(TrajError::GrazingCycle { k: k + 1, normal_dot_v: rec.normal_dot_v });
        }
        entries.push(CycleEntry { t: cur.t - rec.t_b, x: rec.x_b, v: -cur.v });
    }
    Ok(BounceCycle { entries, period_d: tb_fwd + tb_bwd, truncated_at })
}

/// Quadrature for `∫_{n·v′>0} f(v′) c_μ μ(v′)(n·v′) dv′`: Gauss–Laguerre in
/// `s = |v′|²/2` (the radial weight `r³e^{−r²/2}dr` is `2s e^{−s}ds`), Gauss–
/// Legendre in `cos θ` with weight `cos θ`, uniform in azimuth.
#[derive(Debug, Clone)]
pub struct HalfSpaceRule {
    pub normal: Vec3,
    pub nodes: Vec<(Vec3, f64)>,
}

impl HalfSpaceRule {
    pub fn new(normal: &Vec3, node_count: usize) -> Self {
        let n_r = ((node_count as f64).cbrt().round() as usize).max(2);
        let n_c = (n_r / 2).max(2);
        let n_phi = (node_count / (n_r * n_c)).max(3);
        let (s, ws) = gauss_laguerre(n_r, 1);
        let cosines = gauss_legendre_on(n_c, 0.0, 1.0);
        let (e1, e2) = tangent_frame(normal);
        let dphi = 2.0 * PI / n_phi as f64;
        let mut nodes = Vec::with_capacity(n_r * n_c * n_phi);
        for (si, wi) in s.iter().zip(&ws) {
            let r = (2.0 * si).sqrt();
            for &(c, wc) in &cosines {
                let sn = (1.0 - c * c).sqrt();
                for k in 0..n_phi {
                    let phi = (k as f64 + 0.5) * dphi;
                    let dir = sn * phi.cos() * e1 + sn * phi.sin() * e2 + c * normal;
                    nodes.push((r * dir, C_MU * 2.0 * wi * c * wc * dphi));
                }
            }
        }
        HalfSpaceRule { normal: *normal, nodes }
    }

    /// Rule for `∫_{n·v′>0} f(v′) w̃(v′) dσ(v′)`, the measure of the diffuse
    /// wall operator. Laguerre in `s = |v′|²/4`, where the radial part becomes
    /// `8 s e^{−s} (1 + 4ρ²s)^{−β} ds`.
    pub fn diffuse(normal: &Vec3, node_count: usize, weights: &WeightSet) -> Self {
        let n_r = ((node_count as f64).cbrt().round() as usize).max(2);
        let n_c = (n_r / 2).max(2);
        let n_phi = (node_count / (n_r * n_c)).max(3);
        let (s, ws) = gauss_laguerre(n_r, 1);
        let cosines = gauss_legendre_on(n_c, 0.0, 1.0);
        let (e1, e2) = tangent_frame(normal);
        let dphi = 2.0 * PI / n_phi as f64;
        let rho2 = weights.rho * weights.rho;
        let mut nodes = Vec::with_capacity(n_r * n_c * n_phi);
        for (si, wi) in s.iter().zip(&ws) {
            let r = 2.0 * si.sqrt();
            let radial = 8.0 * wi * (1.0 + 4.0 * rho2 * si).powf(-weights.beta);
            for &(c, wc) in &cosines {
                let sn = (1.0 - c * c).sqrt();
                for k in 0..n_phi {
                    let phi = (k as f64 + 0.5) * dphi;
                    let dir = sn * phi.cos() * e1 + sn * phi.sin() * e2 + c * normal;
                    nodes.push((r * dir, C_MU * radial * c * wc * dphi));
                }
            }
        }
        HalfSpaceRule { normal: *normal, nodes }
    }

    pub fn integrate(&self, f: impl Fn(&Vec3) -> f64) -> f64 {
        self.nodes.iter().map(|(v, w)| w * f(v)).sum()
    }
}

/// Nodes on `𝒱(x) = {n(x)·v′ > 0}` for a boundary point `x`.
pub fn diffuse_half_space_quadrature(
    dom: &ImplicitDomain,
    x: &Vec3,
    node_count: usize,
) -> Result<HalfSpaceRule, TrajError> {
    let n = dom.outward_normal(x)?;
    Ok(HalfSpaceRule::new(&n, node_count))
}

/// `∫_{𝒱} w̃ dσ` by its polar factorization,
/// `c_μ π ∫₀^∞ r³ e^{−r²/4} (1 + ρ²r²)^{−β} dr`.
pub fn w_tilde_flux(weights: &WeightSet) -> f64 {
    // split [0, 40] where the rational factor varies fastest
    let knee = (4.0 / weights.rho).min(40.0);
    let mut total = 0.0;
    for (a, b) in [(0.0, knee), (knee, 40.0)] {
        if b <= a {
            continue;
        }
        for (r, w) in gauss_legendre_on(200, a, b) {
            let base = 1.0 + weights.rho * weights.rho * r * r;
            total += w * r.powi(3) * (-0.25 * r * r).exp() * base.powf(-weights.beta);
        }
    }
    C_MU * PI * total
}

/// `C̃_β = max_ρ ρ⁴ ∫_{𝒱} w̃ dσ` over the given ρ values.
pub fn fit_c_beta(beta: f64, rhos: &[f64]) -> f64 {
    rhos.iter().map(|&rho| rho.powi(4) * w_tilde_flux(&WeightSet { rho, beta })).fold(0.0, f64::max)
}
