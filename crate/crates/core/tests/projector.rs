use std::sync::Arc;

use lpd_core::gradcheck::{check_gradients, GradCheckOptions};
use lpd_core::operator::{ForwardOperator, LinearOperator};
use lpd_core::projector::{
    back_projection, beer_lambert_derivative_adjoint, beer_lambert_forward, operator_norm_estimate,
    ray_transform, BeerLambert, Geometry, Image, RayTransform, Sinogram,
};
use lpd_core::scalar::dot;
use lpd_core::{Graph, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

/// Projection matrix assembled column by column from canonical basis images.
fn dense_matrix(geom: &Geometry) -> DMatrix<f64> {
    let [h, w] = geom.image_shape;
    let [na, nb] = geom.sinogram_shape();
    let mut m = DMatrix::zeros(na * nb, h * w);
    for c in 0..h * w {
        let mut e = vec![0.0; h * w];
        e[c] = 1.0;
        let s = ray_transform(&Image::from_vec([h, w], e, geom.pixel_size), geom).unwrap();
        for (r, &v) in s.values.iter().enumerate() {
            m[(r, c)] = v;
        }
    }
    m
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

#[test]
fn forward_matches_dense_matrix() {
    let geom = Geometry::parallel([8, 8], 1.0, 10, 12).unwrap();
    let m = dense_matrix(&geom);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = random_vec(&mut rng, 64);
    let s = ray_transform(&Image::from_vec([8, 8], f.clone(), 1.0), &geom).unwrap();
    let dense = &m * nalgebra::DVector::from_vec(f);
    assert!(rel_err(s.values.as_slice().unwrap(), dense.as_slice()) < 1e-12);
}

#[test]
fn back_projection_matches_dense_transpose() {
    let geom = Geometry::parallel([8, 8], 1.0, 10, 12).unwrap();
    let m = dense_matrix(&geom);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = random_vec(&mut rng, 120);
    let b = back_projection(&Sinogram::from_vec([10, 12], g.clone()), &geom).unwrap();
    let dense = m.transpose() * nalgebra::DVector::from_vec(g);
    assert!(rel_err(b.values.as_slice().unwrap(), dense.as_slice()) < 1e-12);

    // A unit sinogram entry back-projects to the corresponding matrix row.
    let mut unit = vec![0.0; 120];
    unit[37] = 1.0;
    let b = back_projection(&Sinogram::from_vec([10, 12], unit), &geom).unwrap();
    let row: Vec<f64> = m.row(37).iter().copied().collect();
    assert!(rel_err(b.values.as_slice().unwrap(), &row) < 1e-12);
}

#[test]
fn norm_estimate_matches_dense_svd() {
    let geom = Geometry::parallel([8, 8], 1.0, 10, 12).unwrap();
    let sigma_max = dense_matrix(&geom).singular_values().max();
    let est = operator_norm_estimate(&geom, 100).unwrap();
    assert!((est - sigma_max).abs() / sigma_max < 0.01, "{est} vs {sigma_max}");
}

fn adjoint_defect(op: &RayTransform<f64>, rng: &mut ChaCha8Rng) -> f64 {
    let f = random_vec(rng, op.domain()[0] * op.domain()[1]);
    let g = random_vec(rng, op.range()[0] * op.range()[1]);
    let mut af = vec![0.0; g.len()];
    let mut atg = vec![0.0; f.len()];
    op.apply(&f, &mut af);
    op.apply_adjoint(&g, &mut atg);
    (dot(&af, &g) - dot(&f, &atg)).abs() / (dot(&af, &af).sqrt() * dot(&g, &g).sqrt() + 1e-300)
}

#[test]
fn adjoint_defect_on_shipped_geometries() {
    let geoms = [
        Geometry::parallel([8, 8], 1.0, 10, 12).unwrap(),
        Geometry::parallel([32, 32], 1.0, 30, 46).unwrap(),
        Geometry::fan([32, 32], 1.0, 60, 46, 64.0, 64.0).unwrap(),
        Geometry::parallel([64, 64], 1.0, 30, 92).unwrap(),
        Geometry::parallel([13, 7], 0.3, 17, 11).unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for geom in &geoms {
        let op = RayTransform::<f64>::new(geom).unwrap();
        for _ in 0..50 {
            assert!(adjoint_defect(&op, &mut rng) < 1e-10);
        }
    }
}

#[test]
fn ray_transform_is_linear() {
    let geom = Geometry::fan([12, 10], 0.7, 16, 20, 30.0, 20.0).unwrap();
    let op = RayTransform::<f64>::new(&geom).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let f1 = random_vec(&mut rng, 120);
    let f2 = random_vec(&mut rng, 120);
    let alpha = -1.7;
    let combo: Vec<f64> = f1.iter().zip(&f2).map(|(a, b)| alpha * a + b).collect();
    let mut s1 = vec![0.0; 320];
    let mut s2 = vec![0.0; 320];
    let mut sc = vec![0.0; 320];
    op.apply(&f1, &mut s1);
    op.apply(&f2, &mut s2);
    op.apply(&combo, &mut sc);
    for k in 0..320 {
        assert!((sc[k] - (alpha * s1[k] + s2[k])).abs() < 1e-12 * (1.0 + sc[k].abs()));
    }
}

/// Rotationally symmetric smooth bump; its projections should not depend on
/// the angle beyond interpolation error.
#[test]
fn centred_bump_projects_angle_independently() {
    let n = 64;
    let geom = Geometry::parallel([n, n], 1.0, 16, 91).unwrap();
    let c = (n as f64 - 1.0) / 2.0;
    let r0 = 20.0;
    let mut f = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let r2 = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (r0 * r0);
            if r2 < 1.0 {
                f[i * n + j] = (1.0 - r2).powi(3);
            }
        }
    }
    let s = ray_transform(&Image::from_vec([n, n], f, 1.0), &geom).unwrap();
    let first = s.values.row(0).to_owned();
    let peak = first.iter().cloned().fold(0.0f64, f64::max);
    let mut worst = 0.0f64;
    for a in 1..16 {
        for (x, y) in s.values.row(a).iter().zip(first.iter()) {
            worst = worst.max((x - y).abs() / peak);
        }
    }
    assert!(worst < 1e-3, "max relative deviation {worst}");
}

#[test]
fn beer_lambert_reference_value() {
    // A single vertical chord through a 5-pixel column of density 1 at unit
    // pixel size integrates to 5; μ = 0.2 gives e^{-1}.
    let mut geom = Geometry::parallel([5, 1], 1.0, 1, 1).unwrap();
    geom.detector_extent = 1.0;
    let s = beer_lambert_forward(&Image::from_vec([5, 1], vec![1.0f64; 5], 1.0), &geom, 0.2).unwrap();
    // The bilinear interpolant of a one-pixel-wide column is a tent in x; the
    // ray through its centre sees full density along 4 interior lengths plus
    // two half-length ramps.
    assert!((s.values[(0, 0)] - (-1.0f64).exp()).abs() < 1e-12, "{}", s.values[(0, 0)]);
}

#[test]
fn beer_lambert_range_and_monotonicity() {
    let geom = Geometry::parallel([8, 8], 1.0, 10, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
    let s = beer_lambert_forward(&Image::from_vec([8, 8], f.clone(), 1.0), &geom, 0.2).unwrap();
    assert!(s.values.iter().all(|&v| v > 0.0 && v <= 1.0));
    for k in [0, 9, 27, 63] {
        let mut bumped = f.clone();
        bumped[k] += 0.5;
        let sb = beer_lambert_forward(&Image::from_vec([8, 8], bumped, 1.0), &geom, 0.2).unwrap();
        for (b, a) in sb.values.iter().zip(s.values.iter()) {
            assert!(b <= a);
        }
    }
}

#[test]
fn beer_lambert_adjoint_derivative_special_cases() {
    let geom = Geometry::parallel([8, 8], 1.0, 10, 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let f = Image::from_vec([8, 8], random_vec(&mut rng, 64), 1.0);
    let zero_g = Sinogram::<f64>::zeros([10, 12]);
    let r = beer_lambert_derivative_adjoint(&f, &zero_g, &geom, 0.2).unwrap();
    assert!(r.values.iter().all(|&v| v == 0.0));

    let g = Sinogram::from_vec([10, 12], random_vec(&mut rng, 120));
    let at_zero = beer_lambert_derivative_adjoint(&Image::zeros([8, 8], 1.0), &g, &geom, 0.2).unwrap();
    let bp = back_projection(&g, &geom).unwrap();
    for (a, b) in at_zero.values.iter().zip(bp.values.iter()) {
        assert!((a + 0.2 * b).abs() < 1e-14);
    }
}

#[test]
fn beer_lambert_directional_derivative() {
    let geom = Geometry::parallel([8, 8], 1.0, 10, 12).unwrap();
    let op = BeerLambert::new(Arc::new(RayTransform::<f64>::new(&geom).unwrap()), 0.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let f: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let d = random_vec(&mut rng, 64);
        let g = random_vec(&mut rng, 120);
        let h = 1e-5;
        let mut up = vec![0.0; 120];
        let mut down = vec![0.0; 120];
        let fp: Vec<f64> = f.iter().zip(&d).map(|(a, b)| a + h * b).collect();
        let fm: Vec<f64> = f.iter().zip(&d).map(|(a, b)| a - h * b).collect();
        op.apply(&fp, &mut up);
        op.apply(&fm, &mut down);
        let fd: Vec<f64> = up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let mut jd = vec![0.0; 120];
        op.derivative(&f, &d, &mut jd);
        assert!(rel_err(&jd, &fd) < 1e-5);
        let mut adj = vec![0.0; 64];
        op.derivative_adjoint(&f, &g, &mut adj);
        let lhs = dot(&fd, &g);
        let rhs = dot(&d, &adj);
        assert!((lhs - rhs).abs() / lhs.abs().max(1e-12) < 1e-5, "{lhs} vs {rhs}");
    }
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn ray_transform_node_gradient() {
    let geom = Geometry::parallel([8, 8], 1.0, 10, 12).unwrap();
    let op: Arc<dyn LinearOperator<f64>> = Arc::new(RayTransform::<f64>::new(&geom).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = tensor(&[1, 1, 8, 8], random_vec(&mut rng, 64));
    let target = tensor(&[1, 1, 10, 12], random_vec(&mut rng, 120));
    let r = check_gradients(&[x], &GradCheckOptions::default(), |g, v| {
        let y = g.linear(op.clone(), v[0])?;
        let t = g.constant(target.clone());
        let d = g.sub(y, t)?;
        Ok(g.sum_squares(d))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

#[test]
fn beer_lambert_node_gradient() {
    let geom = Geometry::parallel([8, 8], 1.0, 10, 12).unwrap();
    let op: Arc<dyn ForwardOperator<f64>> =
        Arc::new(BeerLambert::new(Arc::new(RayTransform::<f64>::new(&geom).unwrap()), 0.2).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = tensor(&[1, 1, 8, 8], (0..64).map(|_| rng.random::<f64>()).collect());
    let c = tensor(&[1, 1, 10, 12], random_vec(&mut rng, 120));
    let r = check_gradients(&[x, c], &GradCheckOptions::default(), |g, v| {
        let y = g.operator(op.clone(), v[0])?;
        let z = g.adjoint_derivative(op.clone(), v[0], v[1])?;
        let a = g.sum_squares(y);
        let b = g.sum_squares(z);
        g.add(a, b)
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");

    let mut g = Graph::new();
    let zero = g.constant(Tensor::zeros(&[1, 1, 8, 8]).unwrap());
    let y = g.operator(op, zero).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn adjoint_identity_random_geometries(
        h in 3usize..14, w in 3usize..14, na in 1usize..12, nb in 1usize..20,
        ps in 0.2f64..2.0, fan in any::<bool>(), seed in 0u64..10_000,
    ) {
        let geom = if fan {
            Geometry::fan([h, w], ps, na, nb, 4.0 * ps * (h.max(w) as f64), 2.0 * ps * (h as f64)).unwrap()
        } else {
            Geometry::parallel([h, w], ps, na, nb).unwrap()
        };
        let op = RayTransform::<f64>::new(&geom).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert!(adjoint_defect(&op, &mut rng) < 1e-10);
    }

    #[test]
    fn projections_of_nonnegative_images_are_nonnegative(seed in 0u64..10_000) {
        let geom = Geometry::parallel([9, 9], 1.0, 7, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f: Vec<f64> = (0..81).map(|_| rng.random::<f64>()).collect();
        let s = ray_transform(&Image::from_vec([9, 9], f, 1.0), &geom).unwrap();
        prop_assert!(s.values.iter().all(|&v| v >= 0.0));
    }
}
