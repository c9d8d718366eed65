//! File helpers: geometry resolution, TNSR images and sinograms, PNG previews.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use image::GrayImage;
use lpd_core::phantom::{read_tensor, read_tensor_header, write_tensor};
use lpd_core::projector::{Geometry, Image, Sinogram};
use lpd_core::{Dtype, Scalar, Tensor};

/// 64×64 grid on [−1, 1]², 30 parallel angles, 92 bins.
pub fn default_geometry() -> Geometry {
    Geometry::parallel([64, 64], 2.0 / 64.0, 30, 92).expect("valid default geometry")
}

/// `--geometry` if given, then `fallback`, then the default.
pub fn resolve_geometry(flag: Option<&Path>, fallback: Option<Geometry>) -> Result<Geometry> {
    match flag {
        Some(path) => read_geometry(path),
        None => Ok(fallback.unwrap_or_else(default_geometry)),
    }
}

pub fn read_geometry(path: &Path) -> Result<Geometry> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Geometry::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Reads a TNSR file of either precision as `T`.
pub fn read_any<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let (dtype, _) = read_tensor_header(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(match dtype {
        Dtype::F32 => read_tensor::<f32>(path)?.cast(),
        Dtype::F64 => read_tensor::<f64>(path)?.cast(),
    })
}

pub fn read_image<T: Scalar>(path: &Path, geom: &Geometry) -> Result<Image<T>> {
    let t = read_any::<T>(path)?;
    if t.shape() != geom.image_shape {
        bail!("{} holds shape {:?}, the geometry expects {:?}", path.display(), t.shape(), geom.image_shape);
    }
    Ok(Image::from_vec(geom.image_shape, t.into_data(), geom.pixel_size))
}

pub fn read_sinogram<T: Scalar>(path: &Path, geom: &Geometry) -> Result<Sinogram<T>> {
    let t = read_any::<T>(path)?;
    let shape = geom.sinogram_shape();
    if t.shape() != shape {
        bail!("{} holds shape {:?}, the geometry expects {shape:?}", path.display(), t.shape());
    }
    Ok(Sinogram::from_vec(shape, t.into_data()))
}

fn write_grid<T: Scalar>(path: &Path, shape: [usize; 2], data: &[T], window: Option<&[f64]>) -> Result<()> {
    let t = Tensor::new(shape.to_vec(), data.to_vec())?;
    write_tensor(path, &t).with_context(|| format!("writing {}", path.display()))?;
    write_png(&path.with_extension("png"), shape, data, window)
}

/// Writes `<stem>.tnsr` and a `<stem>.png` preview.
pub fn write_image<T: Scalar>(path: &Path, f: &Image<T>, window: Option<&[f64]>) -> Result<()> {
    write_grid(path, f.shape(), f.as_slice(), window)
}

pub fn write_sinogram<T: Scalar>(path: &Path, s: &Sinogram<T>, window: Option<&[f64]>) -> Result<()> {
    write_grid(path, s.shape(), s.as_slice(), window)
}

/// 8-bit grayscale, `lo ↦ 0` and `hi ↦ 255`, clamped.
pub fn to_gray<T: Scalar>(data: &[T], window: Option<&[f64]>) -> Vec<u8> {
    let (lo, hi) = match window {
        Some(w) => (w[0], w[1]),
        None => data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.as_f64()), hi.max(v.as_f64()))
        }),
    };
    let span = hi - lo;
    data.iter()
        .map(|v| {
            if !(span > 0.0) {
                return 0;
            }
            let x = ((v.as_f64() - lo) / span).clamp(0.0, 1.0);
            (x * 255.0).round() as u8
        })
        .collect()
}

pub fn write_png<T: Scalar>(path: &Path, [h, w]: [usize; 2], data: &[T], window: Option<&[f64]>) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, to_gray(data, window)).expect("buffer matches shape");
    img.save(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
