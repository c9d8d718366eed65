//! Non-linear PDHG for `min ‖A(f) − g‖² + λ‖∇f‖₁` (isotropic TV).
//!
//! The problem is split as `K(f) = [A(f), ∇f]`, `F(h¹, h²) = ‖h¹ − g‖² + λ‖h²‖₁`
//! and `G ≡ 0`, so the primal proximal step is the identity. Image gradients
//! use forward differences in pixel units with a replicate (Neumann) edge.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fbp::{argmax_small_tie, order_free_mean};
use crate::metrics::{psnr, MetricsError};
use crate::operator::{grid_len, power_method_norm, ForwardOperator, LinearOperator, Linearized};
use crate::projector::{forward_operator, Geometry, Image, OpMode, ProjectorError, RayTransform, Sinogram};
use crate::scalar::Scalar;

/// Relative safety margin applied to `‖K‖` in the step-size gate.
pub const NORM_MARGIN: f64 = 1.01;
const NORM_ITERATIONS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VariationalError {
    #[error("step sizes violate στ‖K‖² < 1: σ = {sigma}, τ = {tau}, ‖K‖ = {norm} (with 1% margin)")]
    StepSize { sigma: f64, tau: f64, norm: f64 },
    #[error("invalid PDHG parameters: {0}")]
    InvalidParams(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: [usize; 2], got: [usize; 2] },
    #[error(transparent)]
    Projector(#[from] ProjectorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0} must not be empty")]
    Empty(&'static str),
}

/// Forward-difference gradient; `out` holds the x (column) component followed
/// by the y (row) component.
pub fn gradient_into<T: Scalar>(f: &[T], [h, w]: [usize; 2], out: &mut [T]) {
    let (gx, gy) = out.split_at_mut(h * w);
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            gx[k] = if j + 1 < w { f[k + 1] - f[k] } else { T::zero() };
            gy[k] = if i + 1 < h { f[k + w] - f[k] } else { T::zero() };
        }
    }
}

/// Negative adjoint of [`gradient_into`].
pub fn divergence_into<T: Scalar>(p: &[T], [h, w]: [usize; 2], out: &mut [T]) {
    let (px, py) = p.split_at(h * w);
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            let mut d = T::zero();
            if j + 1 < w {
                d += px[k];
            }
            if j > 0 {
                d -= px[k - 1];
            }
            if i + 1 < h {
                d += py[k];
            }
            if i > 0 {
                d -= py[k - w];
            }
            out[k] = d;
        }
    }
}

pub fn grad_op<T: Scalar>(f: &Image<T>) -> [Image<T>; 2] {
    let shape = f.shape();
    let n = grid_len(shape);
    let mut out = vec![T::zero(); 2 * n];
    gradient_into(f.as_slice(), shape, &mut out);
    let gy = out.split_off(n);
    [
        Image::from_vec(shape, out, f.pixel_size),
        Image::from_vec(shape, gy, f.pixel_size),
    ]
}

pub fn div_op<T: Scalar>(p: &[Image<T>; 2]) -> Image<T> {
    let shape = p[0].shape();
    assert_eq!(shape, p[1].shape(), "gradient components must share a shape");
    let mut stacked = p[0].as_slice().to_vec();
    stacked.extend_from_slice(p[1].as_slice());
    let mut out = vec![T::zero(); grid_len(shape)];
    divergence_into(&stacked, shape, &mut out);
    Image::from_vec(shape, out, p[0].pixel_size)
}

/// `prox_{σF*}` for `F(h) = ‖h − g‖²`: `(h − σg)/(1 + σ/2)`, in place.
pub fn prox_l2_conjugate_in_place<T: Scalar>(h: &mut [T], g: &[T], sigma: f64) {
    let s = T::of(sigma);
    let d = T::of(1.0 + 0.5 * sigma);
    for (v, &gi) in h.iter_mut().zip(g) {
        *v = (*v - s * gi) / d;
    }
}

pub fn prox_l2_conjugate<T: Scalar>(h: &Sinogram<T>, g: &Sinogram<T>, sigma: f64) -> Sinogram<T> {
    let mut out = h.as_slice().to_vec();
    prox_l2_conjugate_in_place(&mut out, g.as_slice(), sigma);
    Sinogram::from_vec(h.shape(), out)
}

/// Pointwise projection of the stacked field `[px, py]` onto the radius-λ ball.
pub fn project_ball_in_place<T: Scalar>(p: &mut [T], lambda: f64) {
    let n = p.len() / 2;
    let (px, py) = p.split_at_mut(n);
    if lambda == 0.0 {
        px.fill(T::zero());
        py.fill(T::zero());
        return;
    }
    let l = T::of(lambda);
    for (x, y) in px.iter_mut().zip(py.iter_mut()) {
        let scale = ((*x * *x + *y * *y).sqrt() / l).max(T::one());
        *x /= scale;
        *y /= scale;
    }
}

pub fn prox_l1_conjugate_isotropic<T: Scalar>(p: &[Image<T>; 2], lambda: f64) -> [Image<T>; 2] {
    let shape = p[0].shape();
    let mut stacked = p[0].as_slice().to_vec();
    stacked.extend_from_slice(p[1].as_slice());
    project_ball_in_place(&mut stacked, lambda);
    let py = stacked.split_off(grid_len(shape));
    [
        Image::from_vec(shape, stacked, p[0].pixel_size),
        Image::from_vec(shape, py, p[1].pixel_size),
    ]
}

/// Isotropic total variation `Σ |∇f|₂`.
pub fn total_variation<T: Scalar>(f: &[T], shape: [usize; 2]) -> f64 {
    let n = grid_len(shape);
    let mut g = vec![T::zero(); 2 * n];
    gradient_into(f, shape, &mut g);
    (0..n).map(|k| g[k].as_f64().hypot(g[k + n].as_f64())).sum()
}

/// `‖A(f) − g‖² + λ TV(f)`.
pub fn objective<T: Scalar>(op: &dyn ForwardOperator<T>, f: &[T], g: &[T], lambda: f64) -> f64 {
    let mut af = vec![T::zero(); grid_len(op.range())];
    op.apply(f, &mut af);
    let fit: f64 = af.iter().zip(g).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    fit + lambda * total_variation(f, op.domain())
}

/// `[∂A(0); ∇]` as one linear map, used to bound `‖K‖`.
struct Stacked<'a, T> {
    data: Linearized<'a, T, dyn ForwardOperator<T> + 'a>,
}

impl<T: Scalar> LinearOperator<T> for Stacked<'_, T> {
    fn domain(&self) -> [usize; 2] {
        self.data.domain()
    }

    fn range(&self) -> [usize; 2] {
        let m = grid_len(self.data.range());
        [1, m + 2 * grid_len(self.domain())]
    }

    fn apply(&self, x: &[T], y: &mut [T]) {
        let m = grid_len(self.data.range());
        let (a, b) = y.split_at_mut(m);
        self.data.apply(x, a);
        gradient_into(x, self.domain(), b);
    }

    fn apply_adjoint(&self, y: &[T], x: &mut [T]) {
        let m = grid_len(self.data.range());
        let (a, b) = y.split_at(m);
        self.data.apply_adjoint(a, x);
        let mut d = vec![T::zero(); x.len()];
        divergence_into(b, self.domain(), &mut d);
        for (xi, di) in x.iter_mut().zip(d) {
            *xi -= di;
        }
    }
}

/// Power-method estimate of `‖[∂A(0); ∇]‖`.
///
/// For the Beer-Lambert model `∂A(f) = −μ diag(e^{−μPf}) P`, whose norm is
/// largest at `f = 0` among non-negative images.
pub fn stacked_norm<T: Scalar>(op: &dyn ForwardOperator<T>) -> f64 {
    let stacked = Stacked {
        data: Linearized {
            op,
            point: vec![T::zero(); grid_len(op.domain())],
        },
    };
    power_method_norm(&stacked, NORM_ITERATIONS, 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdhgParams {
    pub sigma: f64,
    pub tau: f64,
    /// Over-relaxation weight.
    pub gamma: f64,
    pub iterations: usize,
    pub lambda: f64,
}

impl PdhgParams {
    /// `σ = τ = 0.99/‖K‖`, `γ = 1`.
    pub fn with_norm(norm: f64, lambda: f64, iterations: usize) -> Self {
        Self {
            sigma: 0.99 / norm,
            tau: 0.99 / norm,
            gamma: 1.0,
            iterations,
            lambda,
        }
    }

    pub fn validate(&self, norm: f64) -> Result<(), VariationalError> {
        let bad = |m: String| Err(VariationalError::InvalidParams(m));
        if !(self.sigma > 0.0 && self.tau > 0.0) {
            return bad(format!("σ = {}, τ = {} must be positive", self.sigma, self.tau));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("γ = {} must lie in [0, 1]", self.gamma));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("λ = {} must be non-negative", self.lambda));
        }
        let bound = NORM_MARGIN * norm;
        if self.sigma * self.tau * bound * bound >= 1.0 {
            return Err(VariationalError::StepSize {
                sigma: self.sigma,
                tau: self.tau,
                norm,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PdhgOutput<T> {
    pub image: Image<T>,
    /// Objective after every iteration, when recording was requested.
    pub objective: Vec<f64>,
}

/// Solver state shared by every run on one forward operator.
pub struct Pdhg<T> {
    op: Arc<dyn ForwardOperator<T>>,
    params: PdhgParams,
    norm: f64,
    pixel_size: f64,
}

impl<T: Scalar> Pdhg<T> {
    /// Estimates `‖K‖` and checks the step-size gate.
    pub fn new(op: Arc<dyn ForwardOperator<T>>, params: PdhgParams, pixel_size: f64) -> Result<Self, VariationalError> {
        let norm = stacked_norm(op.as_ref());
        Self::with_norm(op, params, norm, pixel_size)
    }

    pub fn with_norm(
        op: Arc<dyn ForwardOperator<T>>,
        params: PdhgParams,
        norm: f64,
        pixel_size: f64,
    ) -> Result<Self, VariationalError> {
        params.validate(norm)?;
        Ok(Self {
            op,
            params,
            norm,
            pixel_size,
        })
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn params(&self) -> &PdhgParams {
        &self.params
    }

    pub fn solve(&self, g: &Sinogram<T>, record_objective: bool) -> Result<PdhgOutput<T>, VariationalError> {
        self.solve_with(g, record_objective, |_, _| {})
    }

    /// Runs exactly `iterations` steps from `f₀ = 0`, `h₀ = 0`; `callback`
    /// sees the primal iterate after every step (1-based index).
    pub fn solve_with(
        &self,
        g: &Sinogram<T>,
        record_objective: bool,
        mut callback: impl FnMut(usize, &[T]),
    ) -> Result<PdhgOutput<T>, VariationalError> {
        let shape = self.op.domain();
        let range = self.op.range();
        if g.shape() != range {
            return Err(VariationalError::ShapeMismatch {
                expected: range,
                got: g.shape(),
            });
        }
        let n = grid_len(shape);
        let m = grid_len(range);
        let PdhgParams {
            sigma,
            tau,
            gamma,
            iterations,
            lambda,
        } = self.params;
        let (s, t, gm) = (T::of(sigma), T::of(tau), T::of(gamma));
        let g = g.as_slice();

        let mut f = vec![T::zero(); n];
        let mut f_bar = f.clone();
        let mut h1 = vec![T::zero(); m];
        let mut h2 = vec![T::zero(); 2 * n];
        let mut k1 = vec![T::zero(); m];
        let mut k2 = vec![T::zero(); 2 * n];
        let mut adj = vec![T::zero(); n];
        let mut div = vec![T::zero(); n];
        let mut trace = Vec::new();

        for i in 1..=iterations {
            self.op.apply(&f_bar, &mut k1);
            gradient_into(&f_bar, shape, &mut k2);
            for (h, k) in h1.iter_mut().zip(&k1) {
                *h += s * *k;
            }
            for (h, k) in h2.iter_mut().zip(&k2) {
                *h += s * *k;
            }
            prox_l2_conjugate_in_place(&mut h1, g, sigma);
            project_ball_in_place(&mut h2, lambda);

            self.op.derivative_adjoint(&f, &h1, &mut adj);
            divergence_into(&h2, shape, &mut div);
            for k in 0..n {
                let next = f[k] - t * (adj[k] - div[k]);
                f_bar[k] = next + gm * (next - f[k]);
                f[k] = next;
            }
            if record_objective {
                trace.push(objective(self.op.as_ref(), &f, g, lambda));
            }
            callback(i, &f);
        }
        Ok(PdhgOutput {
            image: Image::from_vec(shape, f, self.pixel_size),
            objective: trace,
        })
    }
}

/// TV-regularised reconstruction of `g` on `geom` with the chosen model.
pub fn pdhg_solve<T: Scalar>(
    g: &Sinogram<T>,
    geom: &Geometry,
    params: &PdhgParams,
    mode: OpMode,
) -> Result<PdhgOutput<T>, VariationalError> {
    let op = forward_operator(Arc::new(RayTransform::new(geom)?), mode)?;
    Pdhg::new(op, *params, geom.pixel_size)?.solve(g, true)
}

/// λ from `grid` maximising the mean PSNR over `pairs` with default steps.
pub fn tune_lambda<T: Scalar>(
    pairs: &[(Sinogram<T>, Image<T>)],
    geom: &Geometry,
    mode: OpMode,
    iterations: usize,
    grid: &[f64],
) -> Result<f64, VariationalError> {
    if grid.is_empty() {
        return Err(VariationalError::Empty("lambda grid"));
    }
    if pairs.is_empty() {
        return Err(VariationalError::Empty("validation pairs"));
    }
    let op = forward_operator(Arc::new(RayTransform::new(geom)?), mode)?;
    let norm = stacked_norm(op.as_ref());
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let solver = Pdhg::with_norm(
            op.clone(),
            PdhgParams::with_norm(norm, lambda, iterations),
            norm,
            geom.pixel_size,
        )?;
        let values = pairs
            .par_iter()
            .map(|(g, f)| -> Result<f64, VariationalError> {
                Ok(psnr(&solver.solve(g, false)?.image, f, None)?)
            })
            .collect::<Result<Vec<_>, _>>()?;
        scores.push(order_free_mean(values));
    }
    Ok(argmax_small_tie(grid, &scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::{Linear, ScaledIdentity};
    use crate::scalar::dot;

    #[test]
    fn gradient_of_constant_and_ramp() {
        let c = Image::from_vec([4, 5], vec![2.5; 20], 1.0);
        let [gx, gy] = grad_op(&c);
        assert!(gx.values.iter().chain(gy.values.iter()).all(|&v| v == 0.0));
        let ramp = Image::from_vec([4, 5], (0..20).map(|k| (k % 5) as f64).collect(), 1.0);
        let [gx, gy] = grad_op(&ramp);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(gx.values[(i, j)], 1.0);
            }
            assert_eq!(gx.values[(i, 4)], 0.0);
        }
        assert!(gy.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn divergence_is_negative_adjoint() {
        let shape = [16, 16];
        let f: Vec<f64> = (0..256).map(|k| ((k * 37 % 101) as f64 * 0.13).sin()).collect();
        let p: Vec<f64> = (0..512).map(|k| ((k * 53 % 97) as f64 * 0.29).cos()).collect();
        let mut gf = vec![0.0; 512];
        gradient_into(&f, shape, &mut gf);
        let mut dp = vec![0.0; 256];
        divergence_into(&p, shape, &mut dp);
        let lhs = dot(&gf, &p);
        let rhs = -dot(&f, &dp);
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn prox_closed_forms() {
        let h = Sinogram::<f64>::from_vec([1, 3], vec![1.0, -2.0, 0.5]);
        let g = Sinogram::from_vec([1, 3], vec![0.3, 0.1, -0.4]);
        assert_eq!(prox_l2_conjugate(&h, &g, 0.0), h);
        let sg = Sinogram::new(g.values.mapv(|v| 0.7 * v));
        assert!(prox_l2_conjugate(&sg, &g, 0.7).values.iter().all(|v| v.abs() < 1e-16));

        let p = [Image::<f64>::from_vec([1, 1], vec![3.0], 1.0), Image::from_vec([1, 1], vec![4.0], 1.0)];
        let q = prox_l1_conjugate_isotropic(&p, 1.0);
        assert!((q[0].values[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((q[1].values[(0, 0)] - 0.8).abs() < 1e-15);
        assert_eq!(prox_l1_conjugate_isotropic(&q, 1.0), q);
        assert_eq!(prox_l1_conjugate_isotropic(&p, 6.0), p);
        let z = prox_l1_conjugate_isotropic(&p, 0.0);
        assert!(z[0].values[(0, 0)] == 0.0 && z[1].values[(0, 0)] == 0.0);
    }

    #[test]
    fn step_gate() {
        let op: Arc<dyn ForwardOperator<f64>> = Arc::new(Linear(ScaledIdentity::new([4, 4], 1.0)));
        let norm = stacked_norm(op.as_ref());
        // ‖[I; ∇]‖² = 1 + ‖∇‖², with ‖∇‖² < 8 on a grid.
        assert!(norm > 2.0 && norm < 3.0, "{norm}");
        let ok = PdhgParams::with_norm(norm, 0.1, 5);
        assert!(Pdhg::with_norm(op.clone(), ok, norm, 1.0).is_ok());
        let bad = PdhgParams {
            sigma: 1.0 / norm,
            tau: 1.0 / norm,
            ..ok
        };
        assert!(matches!(
            Pdhg::with_norm(op, bad, norm, 1.0),
            Err(VariationalError::StepSize { .. })
        ));
    }
}
