//! Simulated datasets: `meta.json` plus numbered TNSR files.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apply_noise, render_ellipses, sample_ellipses, write_tensor, NoiseModel, TnsrError};
use crate::projector::{simulate, Geometry, Image, OpMode, RayTransform, Sinogram};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const RNG_NAME: &str = "ChaCha8";

/// Ranges of the random-ellipse distribution, in normalised coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipseDistribution {
    /// Inclusive range of the ellipse count.
    pub count: [usize; 2],
    pub value: [f64; 2],
    /// Centres are uniform in the disk of this radius.
    pub center_radius: f64,
    pub axis: [f64; 2],
}

impl Default for EllipseDistribution {
    fn default() -> Self {
        Self {
            count: [1, 10],
            value: [0.1, 1.0],
            center_radius: 1.0,
            axis: [0.05, 0.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub count: usize,
    pub seed: u64,
    pub geometry: Geometry,
    pub op_mode: OpMode,
    /// The per-sample noise seed replaces `noise.seed`.
    pub noise: Option<NoiseModel>,
    pub distribution: EllipseDistribution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub rng: String,
    pub dtype: Dtype,
    pub spec: DatasetSpec,
    pub phantom_seeds: Vec<u64>,
    pub noise_seeds: Vec<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Tnsr(#[from] TnsrError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad meta.json: {0}")]
    Meta(String),
    #[error(transparent)]
    Projector(#[from] crate::projector::ProjectorError),
    #[error(transparent)]
    Noise(#[from] super::NoiseError),
    #[error("sample {index} out of range for {len} samples")]
    OutOfRange { index: usize, len: usize },
}

/// Deterministic per-sample seeds derived from the run seed.
pub fn sample_seeds(seed: u64, index: usize) -> (u64, u64) {
    let phantom = seed.wrapping_add(index as u64);
    // splitmix64 finaliser keeps the noise stream apart from the phantom stream.
    let mut z = phantom.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (phantom, z ^ (z >> 31))
}

/// One ground-truth phantom and its (optionally noisy) data.
pub fn simulate_pair<T: Scalar>(
    spec: &DatasetSpec,
    ray: &Arc<RayTransform<T>>,
    index: usize,
) -> Result<(Image<T>, Sinogram<T>), DatasetError> {
    let (phantom_seed, noise_seed) = sample_seeds(spec.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(phantom_seed);
    let ellipses = sample_ellipses(&mut rng, &spec.distribution);
    let image = render_ellipses::<T>(&ellipses, spec.geometry.image_shape)
        .with_pixel_size(spec.geometry.pixel_size);
    let clean = simulate(&image, ray, spec.op_mode)?;
    let data = match spec.noise {
        Some(model) => apply_noise(&clean, &model.with_seed(noise_seed))?,
        None => clean,
    };
    Ok((image, data))
}

/// Generates every pair of `spec` in memory.
pub fn simulate_all<T: Scalar>(spec: &DatasetSpec) -> Result<Vec<(Image<T>, Sinogram<T>)>, DatasetError> {
    let ray = Arc::new(RayTransform::new(&spec.geometry)?);
    (0..spec.count).map(|i| simulate_pair(spec, &ray, i)).collect()
}

fn phantom_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("phantom_{i:05}.tnsr"))
}

fn data_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("data_{i:05}.tnsr"))
}

pub fn image_tensor<T: Scalar>(f: &Image<T>) -> Tensor<T> {
    Tensor::new(f.shape().to_vec(), f.as_slice().to_vec()).expect("image shape")
}

pub fn sinogram_tensor<T: Scalar>(s: &Sinogram<T>) -> Tensor<T> {
    Tensor::new(s.shape().to_vec(), s.as_slice().to_vec()).expect("sinogram shape")
}

/// Writes `spec.count` pairs and `meta.json` into `dir`.
pub fn generate_dataset<T: Scalar>(dir: &Path, spec: &DatasetSpec) -> Result<DatasetMeta, DatasetError> {
    fs::create_dir_all(dir)?;
    let ray = Arc::new(RayTransform::<T>::new(&spec.geometry)?);
    let mut phantom_seeds = Vec::with_capacity(spec.count);
    let mut noise_seeds = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let (image, data) = simulate_pair(spec, &ray, i)?;
        write_tensor(&phantom_path(dir, i), &image_tensor(&image))?;
        write_tensor(&data_path(dir, i), &sinogram_tensor(&data))?;
        let (p, n) = sample_seeds(spec.seed, i);
        phantom_seeds.push(p);
        noise_seeds.push(n);
    }
    let meta = DatasetMeta {
        rng: RNG_NAME.into(),
        dtype: T::DTYPE,
        spec: spec.clone(),
        phantom_seeds,
        noise_seeds,
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| DatasetError::Meta(e.to_string()))?;
    fs::write(dir.join("meta.json"), text)?;
    Ok(meta)
}

/// Read access to a generated dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    dir: PathBuf,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(dir.join("meta.json"))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| DatasetError::Meta(e.to_string()))?;
        meta.spec.geometry.validate()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.meta.spec.count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn geometry(&self) -> &Geometry {
        &self.meta.spec.geometry
    }

    /// Loads sample `index`, converting to `T` when the stored dtype differs.
    pub fn load<T: Scalar>(&self, index: usize) -> Result<(Image<T>, Sinogram<T>), DatasetError> {
        if index >= self.len() {
            return Err(DatasetError::OutOfRange {
                index,
                len: self.len(),
            });
        }
        let geom = self.geometry();
        let f = load_as::<T>(&phantom_path(&self.dir, index), self.meta.dtype)?;
        let g = load_as::<T>(&data_path(&self.dir, index), self.meta.dtype)?;
        Ok((
            Image::from_vec(geom.image_shape, f.into_data(), geom.pixel_size),
            Sinogram::from_vec(geom.sinogram_shape(), g.into_data()),
        ))
    }

    /// Streams samples in index order.
    pub fn iter<T: Scalar>(&self) -> impl Iterator<Item = Result<(Image<T>, Sinogram<T>), DatasetError>> + '_ {
        (0..self.len()).map(move |i| self.load(i))
    }

    pub fn load_all<T: Scalar>(&self) -> Result<Vec<(Image<T>, Sinogram<T>)>, DatasetError> {
        self.iter().collect()
    }
}

fn load_as<T: Scalar>(path: &Path, stored: Dtype) -> Result<Tensor<T>, DatasetError> {
    Ok(match stored {
        Dtype::F32 => super::read_tensor::<f32>(path)?.cast(),
        Dtype::F64 => super::read_tensor::<f64>(path)?.cast(),
    })
}
