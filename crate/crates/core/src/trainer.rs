//! Empirical-loss training of the learned schemes with ADAM.

use std::io::Write;
use std::path::PathBuf;

use ndarray::{ArrayView1, ArrayViewMut1, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Graph;
use crate::lpd::{LpdError, Model, Problem, RngState};
use crate::metrics::{psnr, MetricsError};
use crate::phantom::RNG_NAME;
use crate::projector::{Image, Sinogram};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Lpd(#[from] LpdError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("empty batch or dataset")]
    Empty,
    #[error("step {t} outside [0, {t_max}]")]
    StepOutOfRange { t: usize, t_max: usize },
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: usize, loss: f64 },
    #[error("gradient buffers do not match the parameters")]
    GradientShape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub eta0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Validation PSNR is logged every this many steps (0 disables it).
    pub val_interval: usize,
    /// Checkpoints are written every this many steps (0: only at the end).
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            eta0: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            clip_norm: 1.0,
            batch_size: 5,
            seed: 0,
            val_interval: 100,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.eta0 > 0.0 && self.epsilon > 0.0 && self.clip_norm > 0.0) {
            return bad("eta0, epsilon and clip-norm must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch-size must be positive");
        }
        Ok(())
    }
}

/// SplitMix64 finaliser of `seed + (index + 1)·φ`, used to give every
/// tensor and sample its own stream.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `(fan_in, fan_out)` of an `[out, in, kh, kw]` kernel; vectors use their length for both.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [out, inp, rest @ ..] => {
            let field: usize = rest.iter().product();
            (inp * field, out * field)
        }
        [n] => (*n, *n),
        [] => (1, 1),
    }
}

/// Uniform on `[−a, a]` with `a = √(6/(fan_in + fan_out))`.
pub fn xavier_init<T: Scalar>(shape: &[usize], seed: u64) -> Result<Tensor<T>, TensorError> {
    let (fan_in, fan_out) = fans(shape);
    let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::of(dist.sample(&mut rng))).collect())
}

/// `η₀/2 · (1 + cos(πt/t_max))`.
pub fn cosine_lr(t: usize, t_max: usize, eta0: f64) -> Result<f64, TrainError> {
    if t > t_max {
        return Err(TrainError::StepOutOfRange { t, t_max });
    }
    if t_max == 0 {
        return Ok(eta0);
    }
    Ok(eta0 / 2.0 * (1.0 + (std::f64::consts::PI * t as f64 / t_max as f64).cos()))
}

pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt()
}

/// Rescales all gradients together when their joint norm exceeds `clip`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], clip: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip {
        let c = T::of(clip / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }
    norm
}

/// ADAM moment buffers.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Tensor<T>], beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros = || params.iter().map(|p| p.map(|_| T::zero())).collect::<Vec<_>>();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    fn check(&self, params: &[Tensor<T>], grads: &[Tensor<T>]) -> Result<(), TrainError> {
        let same = |a: &[Tensor<T>], b: &[Tensor<T>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape());
        if same(params, grads) && same(params, &self.m) {
            Ok(())
        } else {
            Err(TrainError::GradientShape)
        }
    }

    fn coefficients(&mut self) -> [T; 6] {
        self.t += 1;
        let t = self.t as i32;
        [
            T::of(self.beta1),
            T::of(1.0 - self.beta1),
            T::of(self.beta2),
            T::of(1.0 - self.beta2),
            T::of(1.0 - self.beta1.powi(t)),
            T::of(1.0 - self.beta2.powi(t)),
        ]
    }

    /// Element-by-element update.
    pub fn step_loop(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<(), TrainError> {
        self.check(params, grads)?;
        let [b1, c1, b2, c2, bc1, bc2] = self.coefficients();
        let (lr, eps) = (T::of(lr), T::of(self.epsilon));
        for (k, g) in grads.iter().enumerate() {
            let p = params[k].data_mut();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..g.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + c1 * gi;
                v[i] = b2 * v[i] + c2 * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// The same update expressed with ndarray zips.
    pub fn step_vectorized(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<(), TrainError> {
        self.check(params, grads)?;
        let [b1, c1, b2, c2, bc1, bc2] = self.coefficients();
        let (lr, eps) = (T::of(lr), T::of(self.epsilon));
        for (k, g) in grads.iter().enumerate() {
            Zip::from(ArrayViewMut1::from(params[k].data_mut()))
                .and(ArrayViewMut1::from(self.m[k].data_mut()))
                .and(ArrayViewMut1::from(self.v[k].data_mut()))
                .and(ArrayView1::from(g.data()))
                .for_each(|p, m, v, &gi| {
                    *m = b1 * *m + c1 * gi;
                    *v = b2 * *v + c2 * gi * gi;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Mean over the batch of `Δx² · Σ (T(g) − f)²` and its parameter gradients.
///
/// Samples are evaluated in parallel; their gradients are summed in batch order.
pub fn empirical_loss<T: Scalar>(
    model: &Model<T>,
    problem: &Problem<T>,
    batch: &[(&Image<T>, &Sinogram<T>)],
) -> Result<(f64, Vec<Tensor<T>>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Empty);
    }
    let area = problem.geometry.pixel_size * problem.geometry.pixel_size;
    let weight = T::of(area / batch.len() as f64);
    let per_sample = batch
        .par_iter()
        .map(|(f, g)| -> Result<(f64, Vec<Tensor<T>>), TrainError> {
            let mut graph = Graph::new();
            let bound = model.bind(&mut graph);
            let out = model.forward(&mut graph, &bound, problem, g)?;
            let [h, w] = f.shape();
            let target = graph.constant(Tensor::new(vec![1, 1, h, w], f.as_slice().to_vec())?);
            let diff = graph.sub(out, target).map_err(LpdError::from)?;
            let ss = graph.sum_squares(diff);
            let loss = graph.scale(ss, weight);
            let value = graph.value(loss).data()[0].as_f64();
            let mut grads = graph.backward(loss).map_err(LpdError::from)?;
            let grads = bound
                .vars
                .iter()
                .zip(&model.tensors)
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| p.map(|_| T::zero())))
                .collect();
            Ok((value, grads))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut iter = per_sample.into_iter();
    let (mut loss, mut total) = iter.next().expect("non-empty batch");
    for (l, grads) in iter {
        loss += l;
        for (acc, g) in total.iter_mut().zip(&grads) {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    Ok((loss, total))
}

/// Mean PSNR of the model's reconstructions, each against its own ground truth range.
pub fn mean_psnr<T: Scalar>(
    model: &Model<T>,
    problem: &Problem<T>,
    pairs: &[(Image<T>, Sinogram<T>)],
) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::Empty);
    }
    let values = pairs
        .par_iter()
        .map(|(f, g)| -> Result<f64, TrainError> {
            let rec = model.reconstruct(problem, g)?;
            Ok(psnr(&rec, f, None)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// One line of the NDJSON metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_psnr: Option<f64>,
}

pub struct TrainOutput<T> {
    pub model: Model<T>,
    pub log: Vec<LogRecord>,
}

/// Where and how often to write checkpoints and log lines.
#[derive(Default)]
pub struct TrainSinks<'a> {
    pub checkpoint_dir: Option<PathBuf>,
    pub log: Option<&'a mut dyn Write>,
}

fn rng_state(rng: &ChaCha8Rng, seed: u64) -> RngState {
    RngState {
        algorithm: RNG_NAME.to_string(),
        seed,
        word_pos: rng.get_word_pos().to_string(),
    }
}

/// Runs `steps` iterations of sample → forward → loss → backward → clip → ADAM
/// from `model`, with batches drawn with replacement from `train`.
pub fn train<T: Scalar>(
    mut model: Model<T>,
    problem: &Problem<T>,
    config: &TrainConfig,
    train: &[(Image<T>, Sinogram<T>)],
    validation: &[(Image<T>, Sinogram<T>)],
    mut sinks: TrainSinks<'_>,
) -> Result<TrainOutput<T>, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&model.tensors, config.beta1, config.beta2, config.epsilon);
    let mut log = Vec::with_capacity(config.steps);
    for t in 0..config.steps {
        let lr = cosine_lr(t, config.steps, config.eta0)?;
        let batch: Vec<(&Image<T>, &Sinogram<T>)> = (0..config.batch_size)
            .map(|_| {
                let (f, g) = &train[rng.random_range(0..train.len())];
                (f, g)
            })
            .collect();
        let (loss, mut grads) = empirical_loss(&model, problem, &batch)?;
        let step = t + 1;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { step, loss });
        }
        clip_global_norm(&mut grads, config.clip_norm);
        adam.step_vectorized(&mut model.tensors, &grads, lr)?;

        let val_psnr = if config.val_interval > 0 && step % config.val_interval == 0 && !validation.is_empty() {
            Some(mean_psnr(&model, problem, validation)?)
        } else {
            None
        };
        let record = LogRecord {
            step,
            lr,
            loss,
            val_psnr,
        };
        if let Some(w) = sinks.log.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&record).expect("plain record"))?;
        }
        log.push(record);
        if let Some(dir) = &sinks.checkpoint_dir {
            if config.checkpoint_interval > 0 && step % config.checkpoint_interval == 0 && step < config.steps {
                model.save(&dir.join(format!("step-{step:06}")), step, Some(rng_state(&rng, config.seed)))?;
            }
        }
    }
    if let Some(dir) = &sinks.checkpoint_dir {
        model.save(dir, config.steps, Some(rng_state(&rng, config.seed)))?;
    }
    Ok(TrainOutput { model, log })
}
