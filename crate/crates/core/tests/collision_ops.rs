use graze::collision_ops::*;
use graze::quadrature::gauss_legendre_on;
use graze::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::PI;

fn unit_q0() -> KernelParams {
    KernelParams::new(1.0, 1.0 / (4.0 * PI)).unwrap()
}

fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
    Vec3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s))
}

/// Composite Simpson on [0, b].
fn simpson(f: impl Fn(f64) -> f64, b: f64, n: usize) -> f64 {
    let h = b / n as f64;
    let mut s = f(0.0) + f(b);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// `∫ |v − u| g(|u|) du` for radial g, with the angular integral in closed form.
fn radial_oracle(g: impl Fn(f64) -> f64, speed: f64, reach: f64) -> f64 {
    simpson(
        |r| {
            let ang = if speed == 0.0 || r == 0.0 {
                4.0 * PI * (speed * speed + r * r).sqrt()
            } else {
                let a = speed * speed + r * r;
                let b = 2.0 * speed * r;
                2.0 * PI * 2.0 / (3.0 * b) * ((a + b).powf(1.5) - (a - b).abs().powf(1.5))
            };
            r * r * g(r) * ang
        },
        reach,
        20000,
    )
}

#[test]
fn collision_frequency_matches_radial_oracle() {
    let p = unit_q0();
    let q = VelocityQuadrature::default();
    let nu0 = collision_frequency(&p, &q, &Vec3::zeros());
    assert!((nu0 - 8.0 * PI).abs() < 1e-6 * 8.0 * PI, "{nu0}");
    for s in [0.5, 1.7, 3.0, 6.0] {
        let oracle = radial_oracle(|r| (-0.5 * r * r).exp(), s, 12.0);
        let got = collision_frequency(&p, &q, &Vec3::new(s, 0.0, 0.0));
        assert!((got - oracle).abs() < 1e-3 * oracle, "|v|={s}: {got} vs {oracle}");
    }
}

#[test]
fn collision_frequency_is_radial_and_checked() {
    let p = KernelParams::default();
    let q = VelocityQuadrature::default();
    for a in [0.7, 2.5] {
        let x = collision_frequency(&p, &q, &Vec3::new(a, 0.0, 0.0));
        let y = collision_frequency(&p, &q, &Vec3::new(0.0, a, 0.0));
        assert!((x - y).abs() < 1e-3 * x);
    }
    let nu = checked(&q, 1e-3, 1e-12, |qq| collision_frequency(&p, qq, &Vec3::new(1.0, 0.0, 0.0))).unwrap();
    assert!(nu > 0.0);
    let coarse = VelocityQuadrature {
        scheme: QuadScheme::Tensor { n_r: 2, n_polar: 2, n_azimuth: 2 },
        ..VelocityQuadrature::default()
    };
    assert!(checked(&coarse, 1e-3, 1e-12, |qq| collision_frequency(&p, qq, &Vec3::new(1.0, 0.0, 0.0))).is_err());
}

#[test]
fn collision_frequency_bounds_fit() {
    let p = KernelParams::default();
    let q = VelocityQuadrature::default();
    let ratios: Vec<f64> = (0..=20)
        .map(|i| {
            let s = 0.5 * i as f64;
            collision_frequency(&p, &q, &Vec3::new(s, 0.0, 0.0)) / (1.0 + s)
        })
        .collect();
    let c = ratios.iter().cloned().fold(0.0, f64::max).max(1.0 / ratios.iter().cloned().fold(f64::MAX, f64::min));
    assert!(c.is_finite() && c < 10.0);
    for r in ratios {
        assert!(r >= 1.0 / c && r <= c);
    }
}

#[test]
fn nu_weighted_small_weight_limit() {
    let p = unit_q0();
    let q = VelocityQuadrature::default();
    let ws = WeightSet { rho: 1e-8, beta: 1e-8 };
    for s in [0.0, 1.0, 2.5] {
        let oracle = radial_oracle(|r| (-0.25 * r * r).exp(), s, 16.0);
        let got = nu_weighted(&p, &ws, &q, &Vec3::new(s, 0.0, 0.0));
        assert!((got - oracle).abs() < 1e-3 * oracle, "|v|={s}: {got} vs {oracle}");
    }
    let ws = WeightSet::default();
    let x = nu_weighted(&p, &ws, &q, &Vec3::new(1.3, 0.0, 0.0));
    let y = nu_weighted(&p, &ws, &q, &Vec3::new(0.0, 0.0, 1.3));
    assert!((x - y).abs() < 1e-3 * x);
}

#[test]
fn maxwellian_equilibrium() {
    let p = KernelParams::default();
    let q = VelocityQuadrature::default();
    for v in [Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 2.0, 0.0)] {
        let gain = q_plus_direct(&p, &q, mu, mu, &v);
        let loss = q_minus_direct(&p, &q, mu, mu, &v);
        let nu_mu = collision_frequency(&p, &q, &v) * mu(&v);
        assert!((gain - nu_mu).abs() < 1e-3 * nu_mu);
        assert!((gain - loss).abs() < 1e-3 * nu_mu);
    }
    assert_eq!(q_minus_direct(&p, &q, mu, |_| 0.0, &Vec3::zeros()), 0.0);
}

#[test]
fn gain_term_matches_monte_carlo() {
    let p = KernelParams::default();
    let q = VelocityQuadrature::default();
    let c = Vec3::new(1.0, 0.0, 0.0);
    let f = |u: &Vec3| (-(u - c).norm_squared()).exp();
    let v = Vec3::new(0.5, 0.2, 0.0);
    let quad = q_plus_direct(&p, &q, f, f, &v);

    // importance sampling: u ~ N(c, σ²), ω uniform on S²
    let sigma = 1.2;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 1_000_000;
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let z = Vec3::new(
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        );
        let u = c + sigma * z;
        let pdf = (-0.5 * z.norm_squared()).exp() / ((2.0 * PI).powf(1.5) * sigma.powi(3));
        let om = loop {
            let w: Vec3 = Vec3::new(
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            );
            if w.norm() > 1e-12 {
                break w.normalize();
            }
        };
        let (vp, up) = collide(&v, &u, &om);
        let x = kernel_b(&p, &(v - u), &om) * f(&up) * f(&vp) * 4.0 * PI / pdf;
        s1 += x;
        s2 += x * x;
    }
    let mean = s1 / n as f64;
    let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((quad - mean).abs() < 3.0 * se, "quad {quad} mc {mean} ± {se}");
}

#[test]
fn carleman_equilibrium_and_far_field_bound() {
    let p = KernelParams::default();
    let q = VelocityQuadrature::default();
    let rule = CarlemanRule::default();
    for v in [Vec3::new(0.5, 0.0, 0.0), Vec3::new(0.0, 1.5, 0.5)] {
        let c = q_plus_carleman(&p, &rule, mu, mu, &v).unwrap();
        let nu_mu = collision_frequency(&p, &q, &v) * mu(&v);
        assert!((c - nu_mu).abs() < 2e-2 * nu_mu, "{c} vs {nu_mu}");
    }
    // φ supported in the unit ball: the plane integral stays below
    // C_φ (1 + |v − v′|^γ) with C_φ = 11π sup φ for |v| ≤ 10
    let phi = |u: &Vec3| {
        let s = u.norm_squared();
        if s < 1.0 {
            (-1.0 / (1.0 - s)).exp()
        } else {
            0.0
        }
    };
    let plane = gauss_legendre_on(64, -1.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let v = rand_vec(&mut rng, 10.0 / 3f64.sqrt());
        let vp = v + rand_vec(&mut rng, 4.0);
        // the plane rule is centered at the foot of the origin and covers the support
        let val = plane_integral(&p, &plane, phi, &v, &vp).unwrap();
        let bound = 11.0 * PI * (-1f64).exp() * (1.0 + (vp - v).norm());
        assert!(val <= bound, "{val} > {bound}");
    }
}

#[test]
fn hyperplane_frame_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let v = rand_vec(&mut rng, 3.0);
        let vp = rand_vec(&mut rng, 3.0);
        let (e1, e2, e3) = hyperplane_frame(&v, &vp).unwrap();
        let es = [e1, e2, e3];
        for i in 0..3 {
            for j in 0..3 {
                let d = if i == j { 1.0 } else { 0.0 };
                assert!((es[i].dot(&es[j]) - d).abs() < 1e-14);
            }
        }
        assert!((e1.cross(&e2) - e3).norm() < 1e-14);
        for _ in 0..5 {
            let v1 = v + rng.gen_range(-5.0..5.0) * e1 + rng.gen_range(-5.0..5.0) * e2;
            assert!((v1 - v).dot(&(vp - v)).abs() < 1e-12);
        }
    }
}

#[test]
fn change_of_variables_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let v = rand_vec(&mut rng, 3.0);
        let vp = rand_vec(&mut rng, 3.0);
        let vbar = v + rand_vec(&mut rng, 0.5);
        let vpp = cov_shift(&v, &vbar, &vp);
        let n1 = (vp - v).normalize();
        let n2 = (vpp - vbar).normalize();
        assert!(n1.cross(&n2).norm() < 1e-14);
        // distance between the parallel planes through v and v̄
        let dist = (vbar - v).dot(&n1).abs();
        let expect = (vbar - v).dot(&(vp - v)).abs() / (vp - v).norm();
        assert!((dist - expect).abs() < 1e-12);

        let (e1, e2, _) = hyperplane_frame(&v, &vp).unwrap();
        let v1 = v + rng.gen_range(-4.0..4.0) * e1 + rng.gen_range(-4.0..4.0) * e2;
        let v1pp = cov_plane(&v, &vp, &vbar, &v1).unwrap();
        assert!((v1pp - vbar).dot(&(vpp - vbar)).abs() < 1e-11);
        assert!((v1pp - v1).norm() <= (vbar - v).norm() + 1e-15);
    }
}

/// Area Jacobian of the projection from central differences on the sphere.
fn projection_jacobian_fd(v: &Vec3, vp: &Vec3, u: &Vec3) -> f64 {
    let a = if u.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let t1 = (a - a.dot(u) * u).normalize();
    let t2 = u.cross(&t1);
    let h = 1e-6;
    let d = |t: &Vec3| {
        let p = projection_map(v, vp, &(u + h * t).normalize());
        let m = projection_map(v, vp, &(u - h * t).normalize());
        (p - m) / (2.0 * h)
    };
    d(&t1).cross(&d(&t2)).norm()
}

#[test]
fn projection_jacobian_bound() {
    let n_big = 4.0;
    let varrho = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    while checked < 200 {
        let v = rand_vec(&mut rng, n_big / 3f64.sqrt());
        if v.norm() < 1e-3 || varrho >= 0.5 * v.norm_squared() {
            continue;
        }
        let vp = rand_vec(&mut rng, 2.0 * n_big / 3f64.sqrt());
        let e = (vp - v).normalize();
        if (v.dot(&e)).abs() <= varrho / (3.0 * n_big) {
            continue;
        }
        let u = loop {
            let u = rand_vec(&mut rng, 1.0);
            if u.norm() > 0.1 {
                break u.normalize();
            }
        };
        let img = projection_map(&v, &vp, &u);
        if !(1.0 / n_big..=n_big).contains(&img.norm()) {
            continue;
        }
        assert!((img - v).dot(&(vp - v)).abs() < 1e-9 * (1.0 + img.norm()));
        let jac = projection_jacobian_fd(&v, &vp, &u);
        assert!(jac <= 3.0 * n_big.powi(4) / varrho * 1.01, "{jac}");
        checked += 1;
    }
}

#[test]
fn kw_equilibrium_and_zero() {
    let p = KernelParams::default();
    let ws = WeightSet::default();
    let q = VelocityQuadrature::default();
    let kop = KernelOperator::new(p, ws, KernelRule::default());
    assert_eq!(apply_kw(&p, &ws, &q, |_| 0.0, &Vec3::new(0.3, 0.0, 0.0)), 0.0);
    let h = |u: &Vec3| ws.w(u) * sqrt_mu(u);
    for v in [Vec3::zeros(), Vec3::new(0.8, -0.3, 0.2), Vec3::new(0.0, 2.0, 0.0)] {
        let expect = ws.w(&v) * collision_frequency(&p, &q, &v) * sqrt_mu(&v);
        let direct = apply_kw(&p, &ws, &q, h, &v);
        let kernel = kop.apply_kw(h, &v);
        assert!((direct - expect).abs() < 1e-3 * expect, "direct {direct} vs {expect}");
        assert!((kernel - expect).abs() < 1e-3 * expect, "kernel {kernel} vs {expect}");
    }
}

#[test]
fn kernel_route_matches_q_operators() {
    let p = KernelParams::default();
    let ws = WeightSet::default();
    let q = VelocityQuadrature::default();
    let kop = KernelOperator::new(p, ws, KernelRule::default());
    let hs: Vec<Box<dyn Fn(&Vec3) -> f64>> = vec![
        Box::new(|u: &Vec3| (-(u - Vec3::new(1.0, 0.0, 0.0)).norm_squared()).exp()),
        Box::new(|u: &Vec3| u.y * (-0.3 * u.norm_squared()).exp()),
        Box::new(|u: &Vec3| 1.0 / (1.0 + u.norm_squared())),
    ];
    for h in &hs {
        for v in [Vec3::new(0.2, 0.1, 0.0), Vec3::new(-1.0, 0.5, 1.0)] {
            let a = apply_kw(&p, &ws, &q, h, &v);
            let b = kop.apply_kw(h, &v);
            assert!((a - b).abs() < 2e-3 * a.abs().max(1e-2), "{a} vs {b}");
        }
    }
}

#[test]
fn kw_bounded_by_fitted_row_norm() {
    let p = KernelParams::default();
    let ws = WeightSet::default();
    let kop = KernelOperator::new(p, ws, KernelRule::default());
    let speeds: Vec<f64> = (0..=10).map(|i| i as f64).collect();
    let c_k = speeds.iter().map(|&s| kop.kw_row_norm(&Vec3::new(s, 0.0, 0.0))).fold(0.0, f64::max);
    assert!(c_k.is_finite() && c_k > 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let a = rand_vec(&mut rng, 1.0);
        let c = rand_vec(&mut rng, 2.0);
        let h = move |u: &Vec3| (a.dot(u) + (u - c).norm()).sin();
        for &s in &speeds {
            let dir = rand_vec(&mut rng, 1.0).normalize();
            let val = kop.apply_kw(h, &(s * dir));
            assert!(val.abs() <= c_k * 1.0 * 1.05, "{val} > {c_k}");
        }
    }
}

#[test]
fn gamma_parts() {
    let p = KernelParams::default();
    let ws = WeightSet::default();
    let q = VelocityQuadrature::default();
    let v = Vec3::new(0.4, 0.0, -0.2);
    let h = |u: &Vec3| ws.w(u) * sqrt_mu(u);
    let zero = |_: &Vec3| 0.0;
    for part in [GammaPart::Plus, GammaPart::Minus] {
        assert_eq!(apply_gamma(&p, &ws, &q, zero, h, &v, part), 0.0);
        assert_eq!(apply_gamma(&p, &ws, &q, h, zero, &v, part), 0.0);
    }
    let plus = apply_gamma(&p, &ws, &q, h, h, &v, GammaPart::Plus);
    let minus = apply_gamma(&p, &ws, &q, h, h, &v, GammaPart::Minus);
    assert!((plus - minus).abs() < 1e-3 * minus);
}
