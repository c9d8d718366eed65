//! Image quality measures.

use thiserror::Error;

use crate::projector::Image;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 2], [usize; 2]),
    #[error("data range must be positive, got {0}")]
    InvalidRange(f64),
    #[error("SSIM needs images of at least {WINDOW}×{WINDOW}, got {0:?}")]
    TooSmall([usize; 2]),
}

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;

fn check<T: Scalar>(x: &Image<T>, r: &Image<T>) -> Result<(), MetricsError> {
    if x.shape() != r.shape() {
        return Err(MetricsError::ShapeMismatch(x.shape(), r.shape()));
    }
    Ok(())
}

/// `max(ref) − min(ref)`.
pub fn default_range<T: Scalar>(r: &Image<T>) -> f64 {
    let (lo, hi) = r
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.as_f64()), hi.max(v.as_f64()))
        });
    hi - lo
}

fn resolve_range<T: Scalar>(r: &Image<T>, range: Option<f64>) -> Result<f64, MetricsError> {
    let range = range.unwrap_or_else(|| default_range(r));
    if !(range > 0.0 && range.is_finite()) {
        return Err(MetricsError::InvalidRange(range));
    }
    Ok(range)
}

pub fn mse<T: Scalar>(x: &Image<T>, r: &Image<T>) -> Result<f64, MetricsError> {
    check(x, r)?;
    let n = x.values.len() as f64;
    Ok(x.values
        .iter()
        .zip(r.values.iter())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB; `+∞` when the images coincide.
pub fn psnr<T: Scalar>(x: &Image<T>, r: &Image<T>, range: Option<f64>) -> Result<f64, MetricsError> {
    let range = resolve_range(r, range)?;
    let e = mse(x, r)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / e).log10())
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (k, v) in w.iter_mut().enumerate() {
        *v = (-((k as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode Gaussian filtering of a row-major `h×w` array.
fn filter_valid(a: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w - WINDOW + 1;
    let oh = h - WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..WINDOW).map(|t| k[t] * a[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..WINDOW).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean structural similarity over all fully contained 11×11 Gaussian
/// windows (σ = 1.5, K1 = 0.01, K2 = 0.03).
pub fn ssim<T: Scalar>(x: &Image<T>, r: &Image<T>, range: Option<f64>) -> Result<f64, MetricsError> {
    check(x, r)?;
    let [h, w] = x.shape();
    if h < WINDOW || w < WINDOW {
        return Err(MetricsError::TooSmall([h, w]));
    }
    let range = resolve_range(r, range)?;
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let a: Vec<f64> = x.values.iter().map(|v| v.as_f64()).collect();
    let b: Vec<f64> = r.values.iter().map(|v| v.as_f64()).collect();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let k = gaussian_window();
    let mu_a = filter_valid(&a, h, w, &k);
    let mu_b = filter_valid(&b, h, w, &k);
    let aa = filter_valid(&prod(&a, &a), h, w, &k);
    let bb = filter_valid(&prod(&b, &b), h, w, &k);
    let ab = filter_valid(&prod(&a, &b), h, w, &k);
    let n = mu_a.len() as f64;
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Image<f64> {
        Image::from_vec([h, w], (0..h * w).map(|k| f(k / w, k % w)).collect(), 1.0)
    }

    #[test]
    fn psnr_identity_and_log_arithmetic() {
        let r = img(4, 4, |i, j| (i + j) as f64 / 6.0);
        assert_eq!(psnr(&r, &r, None).unwrap(), f64::INFINITY);
        let x = r.values.mapv(|v| v + 0.1);
        let x = Image::new(x, 1.0);
        assert!((psnr(&x, &r, Some(1.0)).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_rejects_bad_input() {
        let r = img(4, 4, |_, _| 0.5);
        assert_eq!(psnr(&r, &r, None), Err(MetricsError::InvalidRange(0.0)));
        let x = img(4, 5, |_, _| 0.5);
        assert!(matches!(psnr(&x, &r, Some(1.0)), Err(MetricsError::ShapeMismatch(..))));
    }

    #[test]
    fn ssim_self_offset_and_size() {
        let r = img(16, 16, |i, j| ((i * 7 + j * 3) % 11) as f64 / 10.0);
        assert!((ssim(&r, &r, None).unwrap() - 1.0).abs() < 1e-12);
        let x = Image::new(r.values.mapv(|v| v + 0.5), 1.0);
        assert!(ssim(&x, &r, Some(1.0)).unwrap() < 1.0);
        let small = img(10, 16, |_, _| 0.0);
        assert_eq!(ssim(&small, &small, Some(1.0)), Err(MetricsError::TooSmall([10, 16])));
    }

    #[test]
    fn window_is_normalised() {
        let k = gaussian_window();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[10]);
    }
}
