use graze::geometry::*;
use graze::phase_topology::{random_interior_point, random_unit};
use graze::Vec3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Non-tangential sample: the exit is transversal and the exit time is
/// stable under small perturbations.
fn sample(dom: &ImplicitDomain, rng: &mut ChaCha8Rng) -> (Vec3, Vec3) {
    loop {
        let x = random_interior_point(dom, rng);
        let v = rng.gen_range(0.5..2.0) * random_unit(rng);
        let Ok(rec) = dom.backward_exit(&x, &v) else { continue };
        if rec.tangential || rec.normal_dot_v > -0.05 * v.norm() {
            continue;
        }
        return (x, v);
    }
}

fn fd_gradients(dom: &ImplicitDomain, x: &Vec3, v: &Vec3, h: f64) -> ExitGradients {
    let mut g =
        ExitGradients { dtb_dx: Vec3::zeros(), dtb_dv: Vec3::zeros(), dxb_dx: Mat3::zeros(), dxb_dv: Mat3::zeros() };
    for i in 0..3 {
        let mut e = Vec3::zeros();
        e[i] = h;
        let p = dom.backward_exit(&(x + e), v).unwrap();
        let m = dom.backward_exit(&(x - e), v).unwrap();
        g.dtb_dx[i] = (p.t_b - m.t_b) / (2.0 * h);
        g.dxb_dx.set_column(i, &((p.x_b - m.x_b) / (2.0 * h)));
        let p = dom.backward_exit(x, &(v + e)).unwrap();
        let m = dom.backward_exit(x, &(v - e)).unwrap();
        g.dtb_dv[i] = (p.t_b - m.t_b) / (2.0 * h);
        g.dxb_dv.set_column(i, &((p.x_b - m.x_b) / (2.0 * h)));
    }
    g
}

fn rel(diff: f64, scale: f64) -> f64 {
    diff / scale.max(1e-8)
}

#[test]
fn exit_gradients_match_finite_differences() {
    for dom in builtin_domains() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let (x, v) = sample(&dom, &mut rng);
            let a = dom.exit_time_gradients(&x, &v).unwrap();
            let f = fd_gradients(&dom, &x, &v, 1e-6);
            let errs = [
                rel((a.dtb_dx - f.dtb_dx).norm(), a.dtb_dx.norm()),
                rel((a.dtb_dv - f.dtb_dv).norm(), a.dtb_dv.norm()),
                rel((a.dxb_dx - f.dxb_dx).norm(), a.dxb_dx.norm()),
                rel((a.dxb_dv - f.dxb_dv).norm(), a.dxb_dv.norm()),
            ];
            for e in errs {
                assert!(e < 1e-4, "{}: x={x:?} v={v:?} errs={errs:?}", dom.name);
            }
        }
    }
}

#[test]
fn sphere_exit_time_closed_form() {
    let dom = builtin_domain("ball").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let x = random_interior_point(&dom, &mut rng);
        let v = rng.gen_range(0.1..3.0) * random_unit(&mut rng);
        // |x − s v| = 1 with s > 0
        let a = v.norm_squared();
        let b = x.dot(&v);
        let c = x.norm_squared() - 1.0;
        let s = (b + (b * b - a * c).sqrt()) / a;
        let rec = dom.backward_exit(&x, &v).unwrap();
        assert!((rec.t_b - s).abs() < 1e-10 * s.max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exit_point_lies_on_boundary(seed in 0u64..10_000, which in 0usize..3) {
        let dom = builtin_domains().remove(which);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_interior_point(&dom, &mut rng);
        let v = rng.gen_range(0.2..3.0) * random_unit(&mut rng);
        if let Ok(rec) = dom.backward_exit(&x, &v) {
            prop_assert!(rec.t_b > 0.0);
            prop_assert!((rec.x_b - (x - rec.t_b * v)).norm() < 1e-12 * (1.0 + rec.x_b.norm()));
            prop_assert!(dom.psi(&rec.x_b).abs() <= 10.0 * dom.tol.boundary_tol);
            // the back-traced ray stays in the closed domain before the exit
            for k in 1..20 {
                let s = rec.t_b * k as f64 / 20.0;
                prop_assert!(dom.psi(&(x - s * v)) <= dom.tol.boundary_tol);
            }
        }
    }

    #[test]
    fn exit_time_scales_inversely_with_speed(seed in 0u64..10_000, lambda in 0.25f64..4.0) {
        let dom = builtin_domain("peanut").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_interior_point(&dom, &mut rng);
        let v = random_unit(&mut rng);
        if let (Ok(a), Ok(b)) = (dom.backward_exit(&x, &v), dom.backward_exit(&x, &(lambda * v))) {
            if !a.tangential {
                prop_assert!((a.t_b - lambda * b.t_b).abs() < 1e-9 * a.t_b.max(1.0));
                prop_assert!((a.x_b - b.x_b).norm() < 1e-9);
            }
        }
    }
}
