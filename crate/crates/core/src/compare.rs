//! Method comparison tables: mean PSNR/SSIM, runtime and parameter count.

use std::io::{Read, Write};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fbp::{Fbp, FbpError};
use crate::lpd::{LpdError, Model, Problem};
use crate::metrics::{psnr, ssim, MetricsError};
use crate::projector::{Image, Sinogram};
use crate::scalar::Scalar;
use crate::variational::{Pdhg, VariationalError};

pub const TIMED_RUNS: usize = 5;

#[derive(Debug, Error)]
pub enum CompareError {
    #[error(transparent)]
    Lpd(#[from] LpdError),
    #[error(transparent)]
    Fbp(#[from] FbpError),
    #[error(transparent)]
    Variational(#[from] VariationalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("nothing to compare")]
    Empty,
}

/// Anything that maps a sinogram to an image.
pub trait Reconstructor<T: Scalar>: Sync {
    fn reconstruct(&self, g: &Sinogram<T>) -> Result<Image<T>, CompareError>;
    fn parameter_count(&self) -> usize;
}

/// FBP has a single tunable parameter, its bandwidth.
impl<T: Scalar> Reconstructor<T> for Fbp<T> {
    fn reconstruct(&self, g: &Sinogram<T>) -> Result<Image<T>, CompareError> {
        Ok(Fbp::reconstruct(self, g)?)
    }

    fn parameter_count(&self) -> usize {
        1
    }
}

/// TV-regularised PDHG has a single tunable parameter, λ.
impl<T: Scalar> Reconstructor<T> for Pdhg<T> {
    fn reconstruct(&self, g: &Sinogram<T>) -> Result<Image<T>, CompareError> {
        Ok(self.solve(g, false)?.image)
    }

    fn parameter_count(&self) -> usize {
        1
    }
}

pub struct Learned<T> {
    pub model: Model<T>,
    pub problem: Problem<T>,
}

impl<T: Scalar> Reconstructor<T> for Learned<T> {
    fn reconstruct(&self, g: &Sinogram<T>) -> Result<Image<T>, CompareError> {
        Ok(self.model.reconstruct(&self.problem, g)?)
    }

    fn parameter_count(&self) -> usize {
        self.model.parameter_count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub median_runtime_ms: f64,
    pub parameters: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CompareTable {
    pub rows: Vec<CompareRow>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Scores one method on `pairs` of (ground truth, data).
///
/// Runtime is the median of [`TIMED_RUNS`] reconstructions of the first
/// sample after one warm-up run; quality metrics are computed afterwards.
pub fn evaluate<T: Scalar>(
    name: &str,
    method: &dyn Reconstructor<T>,
    pairs: &[(Image<T>, Sinogram<T>)],
) -> Result<CompareRow, CompareError> {
    let (_, g0) = pairs.first().ok_or(CompareError::Empty)?;
    method.reconstruct(g0)?;
    let mut times = Vec::with_capacity(TIMED_RUNS);
    for _ in 0..TIMED_RUNS {
        let start = Instant::now();
        method.reconstruct(g0)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let scores = pairs
        .par_iter()
        .map(|(f, g)| -> Result<(f64, f64), CompareError> {
            let rec = method.reconstruct(g)?;
            Ok((psnr(&rec, f, None)?, ssim(&rec, f, None)?))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n = scores.len() as f64;
    Ok(CompareRow {
        method: name.to_string(),
        mean_psnr: scores.iter().map(|s| s.0).sum::<f64>() / n,
        mean_ssim: scores.iter().map(|s| s.1).sum::<f64>() / n,
        median_runtime_ms: median(times),
        parameters: method.parameter_count(),
    })
}

/// Evaluates every method in turn, one at a time.
pub fn compare<T: Scalar>(
    methods: &[(String, &dyn Reconstructor<T>)],
    pairs: &[(Image<T>, Sinogram<T>)],
) -> Result<CompareTable, CompareError> {
    if methods.is_empty() {
        return Err(CompareError::Empty);
    }
    let rows = methods
        .iter()
        .map(|(name, m)| evaluate(name, *m, pairs))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CompareTable { rows })
}

impl CompareTable {
    pub fn row(&self, method: &str) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Fixed-width text table.
    pub fn to_text(&self) -> String {
        let header = ["method", "PSNR [dB]", "SSIM", "runtime [ms]", "parameters"];
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.clone(),
                    format!("{:.2}", r.mean_psnr),
                    format!("{:.4}", r.mean_ssim),
                    format!("{:.2}", r.median_runtime_ms),
                    r.parameters.to_string(),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let mut out = String::new();
        let line = |cols: Vec<&str>, out: &mut String| {
            let parts: Vec<String> = cols
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    if i == 0 {
                        format!("{c:<w$}", w = widths[i])
                    } else {
                        format!("{c:>w$}", w = widths[i])
                    }
                })
                .collect();
            out.push_str(parts.join("  ").trim_end());
            out.push('\n');
        };
        line(header.to_vec(), &mut out);
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        line(rule.iter().map(String::as_str).collect(), &mut out);
        for row in &cells {
            line(row.iter().map(String::as_str).collect(), &mut out);
        }
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), CompareError> {
        let mut writer = csv::Writer::from_writer(w);
        for row in &self.rows {
            writer.serialize(row)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, CompareError> {
        let mut reader = csv::Reader::from_reader(r);
        let rows = reader.deserialize().collect::<Result<Vec<CompareRow>, _>>()?;
        Ok(Self { rows })
    }
}
