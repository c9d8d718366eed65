//! Ray transforms and the Beer-Lambert transmission model.
//!
//! The ray transform samples the bilinear interpolant of the image at
//! midpoints of half-pixel steps along each ray (Joseph-style, ray driven).
//! Rows are assembled once into a sparse matrix; back-projection applies the
//! stored transpose, so the pair is adjoint up to summation rounding.

mod geometry;

use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use geometry::{Beam, Geometry};

use crate::operator::{power_method_norm, ForwardOperator, Linear, LinearOperator};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectorError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: [usize; 2], got: [usize; 2] },
    #[error("attenuation coefficient must be positive and finite, got {0}")]
    InvalidMu(f64),
    #[error("power iteration needs at least 10 iterations, got {0}")]
    TooFewIterations(usize),
}

/// Attenuation values on a grid with physical pixel size.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub values: Array2<T>,
    pub pixel_size: f64,
}

/// Data indexed by (angle, detector bin).
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram<T> {
    pub values: Array2<T>,
}

fn shape_of<T>(a: &Array2<T>) -> [usize; 2] {
    let (r, c) = a.dim();
    [r, c]
}

fn check_shape(expected: [usize; 2], got: [usize; 2]) -> Result<(), ProjectorError> {
    if expected != got {
        return Err(ProjectorError::ShapeMismatch { expected, got });
    }
    Ok(())
}

impl<T: Scalar> Image<T> {
    pub fn new(values: Array2<T>, pixel_size: f64) -> Self {
        Self { values, pixel_size }
    }

    pub fn zeros(shape: [usize; 2], pixel_size: f64) -> Self {
        Self::new(Array2::zeros((shape[0], shape[1])), pixel_size)
    }

    pub fn shape(&self) -> [usize; 2] {
        shape_of(&self.values)
    }

    pub fn with_pixel_size(mut self, pixel_size: f64) -> Self {
        self.pixel_size = pixel_size;
        self
    }

    /// Row-major samples; images built by this crate are always contiguous.
    pub fn as_slice(&self) -> &[T] {
        self.values.as_slice().expect("standard layout image")
    }

    pub fn from_vec(shape: [usize; 2], data: Vec<T>, pixel_size: f64) -> Self {
        Self::new(
            Array2::from_shape_vec((shape[0], shape[1]), data).expect("data length matches shape"),
            pixel_size,
        )
    }
}

impl<T: Scalar> Sinogram<T> {
    pub fn new(values: Array2<T>) -> Self {
        Self { values }
    }

    pub fn zeros(shape: [usize; 2]) -> Self {
        Self::new(Array2::zeros((shape[0], shape[1])))
    }

    pub fn shape(&self) -> [usize; 2] {
        shape_of(&self.values)
    }

    pub fn as_slice(&self) -> &[T] {
        self.values.as_slice().expect("standard layout sinogram")
    }

    pub fn from_vec(shape: [usize; 2], data: Vec<T>) -> Self {
        Self::new(Array2::from_shape_vec((shape[0], shape[1]), data).expect("data length matches shape"))
    }
}

/// Compressed sparse rows.
#[derive(Clone, Debug)]
struct Csr<T> {
    offsets: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<T>,
}

impl<T: Scalar> Csr<T> {
    fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    fn row(&self, r: usize) -> (&[u32], &[T]) {
        let span = self.offsets[r]..self.offsets[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    fn transpose(&self, cols: usize) -> Self {
        let mut counts = vec![0usize; cols + 1];
        for &c in &self.indices {
            counts[c as usize + 1] += 1;
        }
        for k in 0..cols {
            counts[k + 1] += counts[k];
        }
        let mut fill = counts.clone();
        let mut indices = vec![0u32; self.indices.len()];
        let mut values = vec![T::zero(); self.values.len()];
        for r in 0..self.rows() {
            let (idx, val) = self.row(r);
            for (&c, &v) in idx.iter().zip(val) {
                let slot = &mut fill[c as usize];
                indices[*slot] = r as u32;
                values[*slot] = v;
                *slot += 1;
            }
        }
        Self {
            offsets: counts,
            indices,
            values,
        }
    }

    /// `y = M x`, one independent dot product per row.
    fn mul(&self, x: &[T], y: &mut [T]) {
        y.par_iter_mut().with_min_len(64).enumerate().for_each(|(r, out)| {
            let (idx, val) = self.row(r);
            let mut acc = T::zero();
            for (&c, &v) in idx.iter().zip(val) {
                acc += v * x[c as usize];
            }
            *out = acc;
        });
    }
}

/// Builds one ray's row: samples in f64, duplicates merged, columns sorted.
fn assemble_row(geom: &Geometry, angle: usize, bin: usize, scratch: &mut [f64], touched: &mut Vec<u32>) -> Vec<(u32, f64)> {
    let [h, w] = geom.image_shape;
    let ps = geom.pixel_size;
    let (p0, d, [tmin, tmax]) = geom.ray(angle, bin);
    // Bilinear support extends half a pixel beyond the outer pixel centres.
    let hx = (w as f64 + 1.0) / 2.0 * ps;
    let hy = (h as f64 + 1.0) / 2.0 * ps;
    let (mut t0, mut t1) = (tmin, tmax);
    for (p, dir, half) in [(p0[0], d[0], hx), (p0[1], d[1], hy)] {
        if dir.abs() < 1e-15 {
            if p.abs() >= half {
                return Vec::new();
            }
            continue;
        }
        let a = (-half - p) / dir;
        let b = (half - p) / dir;
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    if !(t1 > t0) {
        return Vec::new();
    }
    let len = t1 - t0;
    let n = (len / (0.5 * ps)).ceil().max(1.0) as usize;
    let dt = len / n as f64;
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    for k in 0..n {
        let t = t0 + (k as f64 + 0.5) * dt;
        let fj = (p0[0] + t * d[0]) / ps + cx;
        let fi = cy - (p0[1] + t * d[1]) / ps;
        let j0 = fj.floor();
        let i0 = fi.floor();
        let ax = fj - j0;
        let ay = fi - i0;
        let (j0, i0) = (j0 as isize, i0 as isize);
        for (di, wy) in [(0, 1.0 - ay), (1, ay)] {
            let i = i0 + di;
            if i < 0 || i >= h as isize || wy == 0.0 {
                continue;
            }
            for (dj, wx) in [(0, 1.0 - ax), (1, ax)] {
                let j = j0 + dj;
                if j < 0 || j >= w as isize || wx == 0.0 {
                    continue;
                }
                let c = i as usize * w + j as usize;
                if scratch[c] == 0.0 {
                    touched.push(c as u32);
                }
                scratch[c] += wy * wx * dt;
            }
        }
    }
    touched.sort_unstable();
    let row = touched
        .iter()
        .map(|&c| (c, std::mem::take(&mut scratch[c as usize])))
        .filter(|&(_, v)| v != 0.0)
        .collect();
    touched.clear();
    row
}

/// The discretised line-integral operator of a geometry, with its transpose.
#[derive(Clone, Debug)]
pub struct RayTransform<T> {
    geometry: Geometry,
    forward: Csr<T>,
    backward: Csr<T>,
}

impl<T: Scalar> RayTransform<T> {
    pub fn new(geometry: &Geometry) -> Result<Self, ProjectorError> {
        geometry.validate()?;
        let [h, w] = geometry.image_shape;
        let npix = h * w;
        let nb = geometry.num_detector_bins;
        let rows: Vec<Vec<(u32, f64)>> = (0..geometry.num_angles)
            .into_par_iter()
            .flat_map_iter(|a| {
                let mut scratch = vec![0.0; npix];
                let mut touched = Vec::new();
                (0..nb)
                    .map(|b| assemble_row(geometry, a, b, &mut scratch, &mut touched))
                    .collect::<Vec<_>>()
            })
            .collect();
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let nnz: usize = rows.iter().map(Vec::len).sum();
        let mut indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        for row in rows {
            for (c, v) in row {
                indices.push(c);
                values.push(T::of(v));
            }
            offsets.push(indices.len());
        }
        let forward = Csr {
            offsets,
            indices,
            values,
        };
        let backward = forward.transpose(npix);
        Ok(Self {
            geometry: geometry.clone(),
            forward,
            backward,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn nnz(&self) -> usize {
        self.forward.values.len()
    }

    pub fn forward(&self, f: &Image<T>) -> Result<Sinogram<T>, ProjectorError> {
        check_shape(self.geometry.image_shape, f.shape())?;
        let mut out = vec![T::zero(); self.forward.rows()];
        self.forward.mul(f.as_slice(), &mut out);
        Ok(Sinogram::from_vec(self.geometry.sinogram_shape(), out))
    }

    pub fn adjoint(&self, s: &Sinogram<T>) -> Result<Image<T>, ProjectorError> {
        check_shape(self.geometry.sinogram_shape(), s.shape())?;
        let [h, w] = self.geometry.image_shape;
        let mut out = vec![T::zero(); h * w];
        self.backward.mul(s.as_slice(), &mut out);
        Ok(Image::from_vec([h, w], out, self.geometry.pixel_size))
    }
}

impl<T: Scalar> LinearOperator<T> for RayTransform<T> {
    fn domain(&self) -> [usize; 2] {
        self.geometry.image_shape
    }

    fn range(&self) -> [usize; 2] {
        self.geometry.sinogram_shape()
    }

    fn apply(&self, x: &[T], y: &mut [T]) {
        self.forward.mul(x, y)
    }

    fn apply_adjoint(&self, y: &[T], x: &mut [T]) {
        self.backward.mul(y, x)
    }
}

/// `A(f) = exp(−μ·P f)`.
#[derive(Clone, Debug)]
pub struct BeerLambert<T> {
    pub ray: Arc<RayTransform<T>>,
    pub mu: f64,
}

impl<T: Scalar> BeerLambert<T> {
    pub fn new(ray: Arc<RayTransform<T>>, mu: f64) -> Result<Self, ProjectorError> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(ProjectorError::InvalidMu(mu));
        }
        Ok(Self { ray, mu })
    }

    fn transmission(&self, x: &[T]) -> Vec<T> {
        let mut e = vec![T::zero(); grid_len(self.ray.range())];
        self.ray.apply(x, &mut e);
        let m = T::of(-self.mu);
        e.iter_mut().for_each(|v| *v = (m * *v).exp());
        e
    }
}

fn grid_len(s: [usize; 2]) -> usize {
    s[0] * s[1]
}

impl<T: Scalar> ForwardOperator<T> for BeerLambert<T> {
    fn domain(&self) -> [usize; 2] {
        self.ray.domain()
    }

    fn range(&self) -> [usize; 2] {
        self.ray.range()
    }

    fn apply(&self, x: &[T], out: &mut [T]) {
        out.copy_from_slice(&self.transmission(x));
    }

    fn derivative(&self, x: &[T], dx: &[T], out: &mut [T]) {
        let e = self.transmission(x);
        self.ray.apply(dx, out);
        let m = T::of(-self.mu);
        for (o, &ei) in out.iter_mut().zip(&e) {
            *o = m * ei * *o;
        }
    }

    fn derivative_adjoint(&self, x: &[T], dy: &[T], out: &mut [T]) {
        let e = self.transmission(x);
        let weighted: Vec<T> = e.iter().zip(dy).map(|(&ei, &g)| ei * g).collect();
        self.ray.apply_adjoint(&weighted, out);
        let m = T::of(-self.mu);
        out.iter_mut().for_each(|v| *v *= m);
    }

    fn second_order_adjoint(&self, x: &[T], dy: &[T], v: &[T], out: &mut [T]) {
        let e = self.transmission(x);
        let mut pv = vec![T::zero(); e.len()];
        self.ray.apply(v, &mut pv);
        let mu2 = T::of(self.mu * self.mu);
        let weighted: Vec<T> = e
            .iter()
            .zip(dy)
            .zip(&pv)
            .map(|((&ei, &g), &p)| mu2 * ei * g * p)
            .collect();
        self.ray.apply_adjoint(&weighted, out);
    }
}

pub fn ray_transform<T: Scalar>(f: &Image<T>, geom: &Geometry) -> Result<Sinogram<T>, ProjectorError> {
    RayTransform::new(geom)?.forward(f)
}

pub fn back_projection<T: Scalar>(s: &Sinogram<T>, geom: &Geometry) -> Result<Image<T>, ProjectorError> {
    RayTransform::new(geom)?.adjoint(s)
}

pub fn beer_lambert_forward<T: Scalar>(
    f: &Image<T>,
    geom: &Geometry,
    mu: f64,
) -> Result<Sinogram<T>, ProjectorError> {
    let op = BeerLambert::new(Arc::new(RayTransform::new(geom)?), mu)?;
    check_shape(geom.image_shape, f.shape())?;
    let mut out = vec![T::zero(); grid_len(geom.sinogram_shape())];
    op.apply(f.as_slice(), &mut out);
    Ok(Sinogram::from_vec(geom.sinogram_shape(), out))
}

/// `[∂A(f)]*(g) = −μ Pᵀ(exp(−μ P f) ⊙ g)`.
pub fn beer_lambert_derivative_adjoint<T: Scalar>(
    f: &Image<T>,
    g: &Sinogram<T>,
    geom: &Geometry,
    mu: f64,
) -> Result<Image<T>, ProjectorError> {
    let op = BeerLambert::new(Arc::new(RayTransform::new(geom)?), mu)?;
    check_shape(geom.image_shape, f.shape())?;
    check_shape(geom.sinogram_shape(), g.shape())?;
    let mut out = vec![T::zero(); grid_len(geom.image_shape)];
    op.derivative_adjoint(f.as_slice(), g.as_slice(), &mut out);
    Ok(Image::from_vec(geom.image_shape, out, geom.pixel_size))
}

/// Power-method estimate of `‖P‖` with a fixed start-vector seed.
pub fn operator_norm_estimate(geom: &Geometry, iterations: usize) -> Result<f64, ProjectorError> {
    if iterations < 10 {
        return Err(ProjectorError::TooFewIterations(iterations));
    }
    let op = RayTransform::<f64>::new(geom)?;
    Ok(power_method_norm(&op, iterations, 0))
}

/// Which forward model links images to data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OpMode {
    Linear,
    BeerLambert { mu: f64 },
}

impl OpMode {
    pub fn is_linear(&self) -> bool {
        matches!(self, OpMode::Linear)
    }
}

/// The forward operator of `mode` on top of an assembled ray transform.
pub fn forward_operator<T: Scalar>(
    ray: Arc<RayTransform<T>>,
    mode: OpMode,
) -> Result<Arc<dyn ForwardOperator<T>>, ProjectorError> {
    Ok(match mode {
        OpMode::Linear => Arc::new(Linear(ray)),
        OpMode::BeerLambert { mu } => Arc::new(BeerLambert::new(ray, mu)?),
    })
}

/// Noiseless data `A(f)` for the chosen model.
pub fn simulate<T: Scalar>(
    f: &Image<T>,
    ray: &Arc<RayTransform<T>>,
    mode: OpMode,
) -> Result<Sinogram<T>, ProjectorError> {
    check_shape(ray.geometry.image_shape, f.shape())?;
    let op = forward_operator(ray.clone(), mode)?;
    let mut out = vec![T::zero(); grid_len(op.range())];
    op.apply(f.as_slice(), &mut out);
    Ok(Sinogram::from_vec(ray.geometry.sinogram_shape(), out))
}
