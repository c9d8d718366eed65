use std::sync::Arc;

use lpd_core::operator::{ForwardOperator, Linear, LinearOperator, ScaledIdentity};
use lpd_core::phantom::sample_ellipse_phantom;
use lpd_core::projector::{forward_operator, Geometry, Image, OpMode, RayTransform, Sinogram};
use lpd_core::variational::{
    div_op, grad_op, objective, pdhg_solve, prox_l1_conjugate_isotropic, prox_l2_conjugate, stacked_norm,
    tune_lambda, Pdhg, PdhgParams,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::taut_string;

/// Optimality of `x` for the 1D problem: the running sum `u_k = Σ_{j≤k}(y_j − x_j)`
/// stays in `[−λ, λ]`, hits `±λ` with the jump's sign, and closes at zero.
fn tv1d_kkt_defect(y: &[f64], x: &[f64], lambda: f64) -> f64 {
    let mut u = 0.0;
    let mut worst: f64 = 0.0;
    for k in 0..y.len() - 1 {
        u += y[k] - x[k];
        worst = worst.max(u.abs() - lambda);
        let jump = x[k + 1] - x[k];
        if jump.abs() > 1e-9 {
            worst = worst.max((u + lambda * jump.signum()).abs());
        }
    }
    u += y[y.len() - 1] - x[y.len() - 1];
    worst.max(u.abs())
}

fn random_signal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut level = rng.random::<f64>();
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < 0.15 {
                level = rng.random::<f64>();
            }
            level + 0.1 * (rng.random::<f64>() - 0.5)
        })
        .collect()
}

fn identity_op(shape: [usize; 2]) -> Arc<dyn ForwardOperator<f64>> {
    Arc::new(Linear(ScaledIdentity::new(shape, 1.0)))
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

#[test]
fn taut_string_oracle_is_optimal() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let n = rng.random_range(1..=64);
        let y = random_signal(&mut rng, n);
        let lambda = rng.random_range(0.01..0.5);
        let x = taut_string(&y, lambda);
        assert!(tv1d_kkt_defect(&y, &x, lambda) < 1e-10);
    }
}

/// Largest defect over twenty random 1D instances embedded as `1×N` images.
fn taut_string_worst_error(iterations: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(8..=64);
        let y = random_signal(&mut rng, n);
        let lambda = rng.random_range(0.05..0.4);
        let op = identity_op([1, n]);
        let norm = stacked_norm(op.as_ref());
        let solver = Pdhg::with_norm(op, PdhgParams::with_norm(norm, lambda, iterations), norm, 1.0).unwrap();
        let g = Sinogram::from_vec([1, n], y.clone());
        let f = solver.solve(&g, false).unwrap().image;
        // ‖f − g‖² + λ TV matches ½‖f − g‖² + (λ/2) TV.
        let exact = taut_string(&y, lambda / 2.0);
        worst = worst.max(rel_l2(f.as_slice(), &exact));
    }
    worst
}

#[test]
fn pdhg_matches_taut_string() {
    let worst = taut_string_worst_error(2000);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

/// Minimiser of a unimodal function on `[a, b]`.
fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

#[test]
fn l2_conjugate_prox_matches_scalar_minimisation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 12;
    let h: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    for &sigma in &[0.05, 0.5, 2.0] {
        let closed = prox_l2_conjugate(&Sinogram::from_vec([1, n], h.clone()), &Sinogram::from_vec([1, n], g.clone()), sigma);
        for k in 0..n {
            // F*(y) = sup_x xy − (x − g)², evaluated numerically.
            let conj = |y: f64| {
                let x = golden_section(|x| -(x * y - (x - g[k]).powi(2)), -50.0, 50.0);
                x * y - (x - g[k]).powi(2)
            };
            let y = golden_section(|y| sigma * conj(y) + 0.5 * (y - h[k]).powi(2), -20.0, 20.0);
            assert!((closed.values[(0, k)] - y).abs() < 1e-7, "{} vs {y}", closed.values[(0, k)]);
        }
    }
}

#[test]
fn l2_conjugate_prox_matches_closed_form_objective_minimiser() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let (h, g, sigma) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(0.01..3.0));
        let closed = prox_l2_conjugate(&Sinogram::from_vec([1, 1], vec![h]), &Sinogram::from_vec([1, 1], vec![g]), sigma);
        let y0 = closed.values[(0, 0)];
        // q(y0 + d) − q(y0) for q(y) = σ(yg + y²/4) + ½(y − h)², expanded in d
        // so the search is not limited by cancellation.
        let slope = sigma * (g + y0 / 2.0) + (y0 - h);
        let curvature = sigma / 4.0 + 0.5;
        let d = golden_section(|d| d * slope + d * d * curvature, -1.0, 1.0);
        assert!(d.abs() < 1e-8, "offset {d}");
    }
}

#[test]
fn identity_least_squares_converges() {
    let shape = [6, 7];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g: Vec<f64> = (0..42).map(|_| rng.random::<f64>()).collect();
    let op = identity_op(shape);
    let norm = stacked_norm(op.as_ref());
    let solver = Pdhg::with_norm(op, PdhgParams::with_norm(norm, 0.0, 1000), norm, 1.0).unwrap();
    let f = solver.solve(&Sinogram::from_vec(shape, g.clone()), false).unwrap().image;
    assert!(rel_l2(f.as_slice(), &g) < 1e-6);
}

fn ellipse_problem() -> (Geometry, Image<f64>, Sinogram<f64>, Arc<dyn ForwardOperator<f64>>) {
    let geom = Geometry::parallel([32, 32], 1.0, 30, 46).unwrap();
    let f: Image<f64> = sample_ellipse_phantom(5, [32, 32]);
    let ray = Arc::new(RayTransform::new(&geom).unwrap());
    let g = ray.forward(&f).unwrap();
    let op = forward_operator(ray, OpMode::Linear).unwrap();
    (geom, f, g, op)
}

#[test]
fn objective_trace_decreases_on_ellipse_problem() {
    let (geom, _, g, op) = ellipse_problem();
    let norm = stacked_norm(op.as_ref());
    let params = PdhgParams::with_norm(norm, 0.5, 2000);
    let out = Pdhg::with_norm(op.clone(), params, norm, geom.pixel_size)
        .unwrap()
        .solve(&g, true)
        .unwrap();
    assert_eq!(out.objective.len(), 2000);
    assert!(out.objective[999] <= out.objective[99]);
    // The recorded value is the objective of the returned image.
    let last = objective(op.as_ref(), out.image.as_slice(), g.as_slice(), 0.5);
    assert_eq!(last, out.objective[1999]);
    // Sampled every 100 iterations, no 500-iteration window increases.
    let sampled: Vec<f64> = (0..20).map(|k| out.objective[100 * k + 99]).collect();
    for w in sampled.windows(6) {
        assert!(w[5] <= w[0] + 1e-8, "{w:?}");
    }
}

#[test]
fn unregularised_normal_residual_drops() {
    let (geom, _, g, op) = ellipse_problem();
    let ray = RayTransform::<f64>::new(&geom).unwrap();
    let norm = stacked_norm(op.as_ref());
    let solver = Pdhg::with_norm(op, PdhgParams::with_norm(norm, 0.0, 1000), norm, 1.0).unwrap();
    let mut residuals = Vec::new();
    solver
        .solve_with(&g, false, |i, f| {
            if i == 10 || i == 1000 {
                let mut pf = vec![0.0; g.as_slice().len()];
                ray.apply(f, &mut pf);
                pf.iter_mut().zip(g.as_slice()).for_each(|(p, gi)| *p -= gi);
                let mut r = vec![0.0; f.len()];
                ray.apply_adjoint(&pf, &mut r);
                residuals.push(r.iter().map(|v| v * v).sum::<f64>().sqrt());
            }
        })
        .unwrap();
    assert!(residuals[1] * 10.0 <= residuals[0], "{residuals:?}");
}

#[test]
fn step_gate_rejects_large_steps() {
    let (geom, _, _, op) = ellipse_problem();
    let norm = stacked_norm(op.as_ref());
    let mut params = PdhgParams::with_norm(norm, 0.1, 10);
    params.sigma = 1.0 / norm;
    params.tau = 1.0 / norm;
    assert!(Pdhg::with_norm(op.clone(), params, norm, 1.0).is_err());
    // Exactly at the margin is rejected as well.
    params.sigma = 1.0 / (1.01 * norm);
    params.tau = params.sigma;
    assert!(Pdhg::with_norm(op, params, norm, 1.0).is_err());
    assert!(pdhg_solve(&Sinogram::<f64>::zeros([30, 46]), &geom, &params, OpMode::Linear).is_err());
}

#[test]
fn beer_lambert_mode_runs_and_fits_data() {
    let geom = Geometry::parallel([16, 16], 1.0, 20, 23).unwrap();
    let f: Image<f64> = sample_ellipse_phantom(1, [16, 16]);
    let ray = Arc::new(RayTransform::new(&geom).unwrap());
    let mode = OpMode::BeerLambert { mu: 0.2 };
    let op = forward_operator(ray, mode).unwrap();
    let mut g = vec![0.0; 20 * 23];
    op.apply(f.as_slice(), &mut g);
    let g = Sinogram::from_vec([20, 23], g);
    let norm = stacked_norm(op.as_ref());
    let params = PdhgParams::with_norm(norm, 1e-3, 300);
    let out = pdhg_solve(&g, &geom, &params, mode).unwrap();
    assert!(out.objective[299] < 0.1 * out.objective[0], "{} vs {}", out.objective[299], out.objective[0]);
}

#[test]
fn tune_lambda_cases() {
    let geom = Geometry::parallel([16, 16], 1.0, 30, 23).unwrap();
    let ray = RayTransform::new(&geom).unwrap();
    let mut pairs: Vec<(Sinogram<f64>, Image<f64>)> = (0..3)
        .map(|s| {
            let f: Image<f64> = sample_ellipse_phantom(s, [16, 16]);
            (ray.forward(&f).unwrap(), f)
        })
        .collect();
    assert_eq!(tune_lambda(&pairs, &geom, OpMode::Linear, 50, &[0.3]).unwrap(), 0.3);
    let best = tune_lambda(&pairs, &geom, OpMode::Linear, 300, &[1e-3, 2.0]).unwrap();
    assert_eq!(best, 1e-3);
    pairs.rotate_left(1);
    assert_eq!(tune_lambda(&pairs, &geom, OpMode::Linear, 300, &[1e-3, 2.0]).unwrap(), best);
    assert!(tune_lambda(&pairs, &geom, OpMode::Linear, 10, &[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn divergence_is_negative_adjoint_of_gradient(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || Image::from_vec([h, w], (0..h * w).map(|_| rng.random::<f64>() - 0.5).collect(), 1.0);
        let f = draw();
        let p = [draw(), draw()];
        let gf = grad_op(&f);
        let lhs: f64 = (0..2).map(|c| (&gf[c].values * &p[c].values).sum()).sum();
        let rhs = -(&f.values * &div_op(&p).values).sum();
        prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn ball_projection_is_idempotent_and_bounded(
        vals in prop::collection::vec(-5.0f64..5.0, 2..40),
        lambda in 0.0f64..3.0,
    ) {
        let n = vals.len() / 2;
        let p = [
            Image::from_vec([1, n], vals[..n].to_vec(), 1.0),
            Image::from_vec([1, n], vals[n..2 * n].to_vec(), 1.0),
        ];
        let q = prox_l1_conjugate_isotropic(&p, lambda);
        let qq = prox_l1_conjugate_isotropic(&q, lambda);
        for k in 0..n {
            let (a, b) = (q[0].values[(0, k)], q[1].values[(0, k)]);
            prop_assert!(a.hypot(b) <= lambda * (1.0 + 1e-12));
            prop_assert!((qq[0].values[(0, k)] - a).abs() <= 1e-15 * (1.0 + a.abs()));
            prop_assert!((qq[1].values[(0, k)] - b).abs() <= 1e-15 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn taut_string_equivalence_random(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=32);
        let y = random_signal(&mut rng, n);
        let lambda = rng.random_range(0.05..0.4);
        let op = identity_op([1, n]);
        let norm = stacked_norm(op.as_ref());
        let solver = Pdhg::with_norm(op, PdhgParams::with_norm(norm, lambda, 2000), norm, 1.0).unwrap();
        let f = solver.solve(&Sinogram::from_vec([1, n], y.clone()), false).unwrap().image;
        let exact = taut_string(&y, lambda / 2.0);
        prop_assert!(rel_l2(f.as_slice(), &exact) < 1e-4);
    }
}
