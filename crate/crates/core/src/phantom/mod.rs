//! Phantoms, measurement noise and on-disk persistence.
//!
//! Phantoms live on the normalised square `[−1, 1]²`; pixel `(i, j)` of an
//! `H×W` raster is sampled at `x = (2j + 1 − W)/W`, `y = (H − 2i − 1)/H`.

mod dataset;
mod tnsr;

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dataset::{
    generate_dataset, image_tensor, sample_seeds, simulate_all, simulate_pair, sinogram_tensor, Dataset,
    DatasetError, DatasetMeta, DatasetSpec, EllipseDistribution, RNG_NAME,
};
pub use tnsr::{read_tensor, read_tensor_header, write_tensor, TnsrError};

use crate::projector::{Image, Sinogram};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipseSpec {
    pub value: f64,
    pub center: [f64; 2],
    pub axes: [f64; 2],
    pub rotation: f64,
}

impl EllipseSpec {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        let u = (dx * c + dy * s) / self.axes[0];
        let v = (-dx * s + dy * c) / self.axes[1];
        u * u + v * v <= 1.0
    }
}

fn pixel_center(i: usize, j: usize, [h, w]: [usize; 2]) -> (f64, f64) {
    (
        (2.0 * j as f64 + 1.0 - w as f64) / w as f64,
        (h as f64 - 2.0 * i as f64 - 1.0) / h as f64,
    )
}

/// Sum of the amplitudes of the ellipses containing each pixel centre,
/// clamped to `[0, 1]`. The image carries the normalised pixel size `2/W`.
pub fn render_ellipses<T: Scalar>(specs: &[EllipseSpec], shape: [usize; 2]) -> Image<T> {
    let values = Array2::from_shape_fn((shape[0], shape[1]), |(i, j)| {
        let (x, y) = pixel_center(i, j, shape);
        let v = specs
            .iter()
            .filter(|e| e.contains(x, y))
            .fold(0.0, |acc, e| acc + e.value);
        T::of(v.clamp(0.0, 1.0))
    });
    Image::new(values, 2.0 / shape[1] as f64)
}

/// Ellipse parameters drawn from the training distribution.
pub fn sample_ellipses(rng: &mut ChaCha8Rng, dist: &EllipseDistribution) -> Vec<EllipseSpec> {
    let n = rng.random_range(dist.count[0]..=dist.count[1]);
    (0..n)
        .map(|_| {
            let value = rng.random_range(dist.value[0]..=dist.value[1]);
            let r = rng.random::<f64>().sqrt() * dist.center_radius;
            let phi = rng.random::<f64>() * 2.0 * PI;
            let a = rng.random_range(dist.axis[0]..=dist.axis[1]);
            let b = rng.random_range(dist.axis[0]..=dist.axis[1]);
            let rotation = rng.random::<f64>() * PI;
            EllipseSpec {
                value,
                center: [r * phi.cos(), r * phi.sin()],
                axes: [a, b],
                rotation,
            }
        })
        .collect()
}

/// Random-ellipse phantom, a pure function of `(seed, shape)`.
pub fn sample_ellipse_phantom<T: Scalar>(seed: u64, shape: [usize; 2]) -> Image<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render_ellipses(&sample_ellipses(&mut rng, &EllipseDistribution::default()), shape)
}

/// Modified Shepp-Logan with Toft's intensities:
/// (value, a, b, x0, y0, rotation in degrees).
pub const SHEPP_LOGAN_TOFT: [[f64; 6]; 10] = [
    [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
    [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
    [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
    [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
    [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
    [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
    [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
    [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
    [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
];

pub fn shepp_logan_ellipses() -> Vec<EllipseSpec> {
    SHEPP_LOGAN_TOFT
        .iter()
        .map(|&[value, a, b, x0, y0, deg]| EllipseSpec {
            value,
            center: [x0, y0],
            axes: [a, b],
            rotation: deg.to_radians(),
        })
        .collect()
}

pub fn shepp_logan<T: Scalar>(shape: [usize; 2]) -> Image<T> {
    render_ellipses(&shepp_logan_ellipses(), shape)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("noise level must be positive and finite, got {0}")]
    InvalidLevel(f64),
    #[error("poisson noise needs positive transmission values, found {value} at entry {index}")]
    NonPositive { index: usize, value: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    AdditiveGaussian,
    PoissonPhoton,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    /// Relative standard deviation (gaussian) or incident photon count (poisson).
    pub level: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn gaussian(level: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::AdditiveGaussian,
            level,
            seed,
        }
    }

    pub fn poisson(photons: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::PoissonPhoton,
            level: photons,
            seed,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Returns a noisy copy of `s`.
///
/// Gaussian: iid `N(0, σ²)` with `σ = level · mean|s|`.
/// Poisson: `Poisson(level · s) / level`.
pub fn apply_noise<T: Scalar>(s: &Sinogram<T>, model: &NoiseModel) -> Result<Sinogram<T>, NoiseError> {
    if !(model.level > 0.0 && model.level.is_finite()) {
        return Err(NoiseError::InvalidLevel(model.level));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let data = s.as_slice();
    let out: Vec<T> = match model.kind {
        NoiseKind::AdditiveGaussian => {
            let mean_abs = data.iter().map(|v| v.as_f64().abs()).sum::<f64>() / data.len() as f64;
            let sigma = model.level * mean_abs;
            if sigma == 0.0 {
                data.to_vec()
            } else {
                let normal = Normal::new(0.0, sigma).expect("finite sigma");
                data.iter().map(|&v| T::of(v.as_f64() + normal.sample(&mut rng))).collect()
            }
        }
        NoiseKind::PoissonPhoton => {
            if let Some((index, v)) = data.iter().enumerate().find(|(_, v)| !(v.as_f64() > 0.0)) {
                return Err(NoiseError::NonPositive {
                    index,
                    value: v.as_f64(),
                });
            }
            data.iter()
                .map(|&v| {
                    let lambda = model.level * v.as_f64();
                    let counts: f64 = Poisson::new(lambda).expect("positive rate").sample(&mut rng);
                    T::of(counts / model.level)
                })
                .collect()
        }
    };
    Ok(Sinogram::from_vec(s.shape(), out))
}
