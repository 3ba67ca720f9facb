//! Quadrature rules shared by the collision operators and the solver.

use crate::geometry::Vec3;
use nalgebra::DMatrix;
use std::f64::consts::PI;

/// Gauss–Legendre nodes and weights on [−1, 1] (Golub–Welsch).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    if n == 1 {
        return (vec![0.0], vec![2.0]);
    }
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let kf = k as f64;
        let b = kf / (4.0 * kf * kf - 1.0).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], 2.0 * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // symmetrize to remove eigen-solver asymmetry
    for i in 0..n / 2 {
        let k = n - 1 - i;
        let x = 0.5 * (pairs[k].0 - pairs[i].0);
        let w = 0.5 * (pairs[k].1 + pairs[i].1);
        pairs[i] = (-x, w);
        pairs[k] = (x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    pairs.into_iter().unzip()
}

/// Gauss–Legendre rule mapped to [a, b].
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> Vec<(f64, f64)> {
    let (x, w) = gauss_legendre(n);
    let h = 0.5 * (b - a);
    let c = 0.5 * (b + a);
    x.iter().zip(w.iter()).map(|(xi, wi)| (c + h * xi, h * wi)).collect()
}

/// Generalized Gauss–Laguerre rule for the weight `s^α e^{−s}` on [0, ∞).
pub fn gauss_laguerre(n: usize, alpha: u32) -> (Vec<f64>, Vec<f64>) {
    let mass: f64 = (1..=alpha).map(f64::from).product();
    let alpha = f64::from(alpha);
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        let kf = k as f64;
        j[(k, k)] = 2.0 * kf + alpha + 1.0;
        if k + 1 < n {
            let b = ((kf + 1.0) * (kf + 1.0 + alpha)).sqrt();
            j[(k, k + 1)] = b;
            j[(k + 1, k)] = b;
        }
    }
    let eig = j.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], mass * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

/// Product rule on the unit sphere: Gauss–Legendre in cos θ, uniform in φ.
/// Weights sum to 4π.
pub fn sphere_rule(n_polar: usize, n_azimuth: usize) -> Vec<(Vec3, f64)> {
    let (z, wz) = gauss_legendre(n_polar);
    let dphi = 2.0 * PI / n_azimuth as f64;
    let mut out = Vec::with_capacity(n_polar * n_azimuth);
    for (zi, wi) in z.iter().zip(wz.iter()) {
        let s = (1.0 - zi * zi).max(0.0).sqrt();
        for k in 0..n_azimuth {
            // half-step offset keeps nodes off the coordinate planes
            let phi = (k as f64 + 0.5) * dphi;
            out.push((Vec3::new(s * phi.cos(), s * phi.sin(), *zi), wi * dphi));
        }
    }
    out
}

/// Ball rule around `center`: radial Gauss–Legendre on [0, radius] times a
/// sphere rule. Weights include the r² Jacobian. The radial offset of each
/// node is returned alongside so callers can cancel singular factors.
#[derive(Debug, Clone)]
pub struct ShellRule {
    pub radial: Vec<(f64, f64)>,
    pub sphere: Vec<(Vec3, f64)>,
}

impl ShellRule {
    pub fn new(n_r: usize, n_polar: usize, n_azimuth: usize, radius: f64) -> Self {
        ShellRule { radial: gauss_legendre_on(n_r, 0.0, radius), sphere: sphere_rule(n_polar, n_azimuth) }
    }

    pub fn len(&self) -> usize {
        self.radial.len() * self.sphere.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Iterate `(r, direction, weight·r²)`.
    pub fn iter(&self) -> impl Iterator<Item = (f64, Vec3, f64)> + '_ {
        self.radial.iter().flat_map(move |&(r, wr)| self.sphere.iter().map(move |&(d, wd)| (r, d, wr * wd * r * r)))
    }
}

/// `e^{−x} I₀(x)` for x ≥ 0: power series below 30, asymptotic series above.
pub fn bessel_i0e(x: f64) -> f64 {
    let x = x.abs();
    if x <= 30.0 {
        let q = 0.25 * x * x;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        while term > 1e-17 * sum {
            term *= q / (k * k);
            sum += term;
            k += 1.0;
        }
        sum * (-x).exp()
    } else {
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..40 {
            let kf = k as f64;
            let next = term * (2.0 * kf - 1.0).powi(2) / (8.0 * kf * x);
            if next > term || next < 1e-17 {
                break;
            }
            term = next;
            sum += term;
        }
        sum / (2.0 * PI * x).sqrt()
    }
}
