use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use lpd_core::compare::{compare, Learned, Reconstructor};
use lpd_core::fbp::{tune_bandwidth, Fbp, Filter};
use lpd_core::lpd::{InitMode, LpdConfig, Model, ModelKind, Problem};
use lpd_core::metrics::{psnr, ssim};
use lpd_core::phantom::{apply_noise, generate_dataset, shepp_logan, Dataset, DatasetSpec, EllipseDistribution};
use lpd_core::projector::{forward_operator, simulate, Geometry, Image, OpMode, RayTransform, Sinogram};
use lpd_core::trainer::{train, TrainConfig, TrainSinks};
use lpd_core::variational::{stacked_norm, tune_lambda, Pdhg, PdhgParams};
use lpd_core::Scalar;
use serde::Serialize;

use crate::io::{read_image, read_sinogram, resolve_geometry, write_image, write_sinogram};
use crate::{Cli, Command, Method, TvArgs};

const BANDWIDTH_GRID: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
const LAMBDA_GRID: [f64; 8] = [1e-4, 3e-4, 1e-3, 2e-3, 3e-3, 5e-3, 1e-2, 3e-2];

pub fn run<T: Scalar>(cli: &Cli) -> Result<()> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let window = cli.window.as_deref();
    if let Some(w) = window {
        if !(w[1] > w[0]) {
            bail!("display window needs LO < HI, got [{}, {}]", w[0], w[1]);
        }
    }
    let flag = cli.geometry.as_deref();
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenData { count, noise, op } => {
            let spec = DatasetSpec {
                count: *count,
                seed: cli.seed,
                geometry: resolve_geometry(flag, None)?,
                op_mode: op.mode(),
                noise: noise.model(0),
                distribution: EllipseDistribution::default(),
            };
            generate_dataset::<T>(out, &spec)?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::SheppLogan => {
            let geom = resolve_geometry(flag, None)?;
            let f = shepp_logan::<T>(geom.image_shape).with_pixel_size(geom.pixel_size);
            write_image(&out.join("phantom.tnsr"), &f, window)?;
            fs::write(out.join("geometry.json"), geom.to_json())?;
        }
        Command::Simulate { input, noise, op } => {
            let geom = resolve_geometry(flag, None)?;
            let f = read_image::<T>(input, &geom)?;
            let ray = Arc::new(RayTransform::new(&geom)?);
            let clean = simulate(&f, &ray, op.mode())?;
            let data = match noise.model(cli.seed) {
                Some(model) => apply_noise(&clean, &model)?,
                None => clean,
            };
            write_sinogram(&out.join("data.tnsr"), &data, window)?;
            fs::write(out.join("geometry.json"), geom.to_json())?;
        }
        Command::Fbp {
            input,
            filter,
            bandwidth,
            reference,
        } => {
            let geom = resolve_geometry(flag, None)?;
            let g = read_sinogram::<T>(input, &geom)?;
            let rec = Fbp::<T>::new(&geom, *filter, *bandwidth)?.reconstruct(&g)?;
            finish(out, "fbp", &rec, reference.as_deref(), &geom, window)?;
        }
        Command::Tv {
            input,
            tv,
            op,
            reference,
        } => {
            let geom = resolve_geometry(flag, None)?;
            let g = read_sinogram::<T>(input, &geom)?;
            let solver = tv_solver::<T>(&geom, op.mode(), tv)?;
            let result = solver.solve(&g, true)?;
            let mut log = BufWriter::new(File::create(out.join("tv_objective.ndjson"))?);
            for (k, value) in result.objective.iter().enumerate() {
                writeln!(log, "{}", serde_json::json!({ "iteration": k + 1, "objective": value }))?;
            }
            log.flush()?;
            finish(out, "tv", &result.image, reference.as_deref(), &geom, window)?;
        }
        Command::Train {
            data,
            val_data,
            val_count,
            model,
            steps,
            batch_size,
            eta0,
            clip_norm,
            iterations,
            hidden,
            n_primal,
            n_dual,
            share_weights,
            init,
            val_interval,
            checkpoint_interval,
        } => {
            let dataset = Dataset::open(data)?;
            let geom = resolve_geometry(flag, Some(dataset.geometry().clone()))?;
            let mut pairs = dataset.load_all::<T>()?;
            let validation = match val_data {
                Some(dir) => Dataset::open(dir)?.load_all::<T>()?,
                None => {
                    if *val_count >= pairs.len() {
                        bail!("cannot hold out {val_count} of {} samples", pairs.len());
                    }
                    pairs.split_off(pairs.len() - val_count)
                }
            };
            let init_mode = match init {
                Some(arg) => arg.mode(),
                None if *model == ModelKind::ResidualDenoiser => InitMode::PseudoInverse,
                None => InitMode::Zero,
            };
            let (n_primal, n_dual) = if *model == ModelKind::LearnedPdhg {
                (1, 1)
            } else {
                (*n_primal, *n_dual)
            };
            let cfg = LpdConfig {
                n_primal,
                n_dual,
                iterations: *iterations,
                hidden: *hidden,
                op_mode: dataset.meta.spec.op_mode,
                init_mode,
                share_weights: *share_weights,
                ..LpdConfig::default()
            };
            let config = TrainConfig {
                steps: *steps,
                eta0: *eta0,
                clip_norm: *clip_norm,
                batch_size: *batch_size,
                seed: cli.seed,
                val_interval: *val_interval,
                checkpoint_interval: *checkpoint_interval,
                ..TrainConfig::default()
            };
            let problem = Problem::<T>::new(&geom, &cfg)?;
            let initial = Model::<T>::init(*model, &cfg, cli.seed)?;
            let checkpoint = out.join("checkpoint");
            let mut log = BufWriter::new(File::create(out.join("train_log.ndjson"))?);
            let sinks = TrainSinks {
                checkpoint_dir: Some(checkpoint.clone()),
                log: Some(&mut log),
            };
            let result = train(initial, &problem, &config, &pairs, &validation, sinks)?;
            log.flush()?;
            fs::write(checkpoint.join("geometry.json"), geom.to_json())?;
            let last = result.log.last().map_or(f64::NAN, |r| r.loss);
            println!(
                "trained {model} ({} parameters) for {steps} steps, final batch loss {last:.6}",
                result.model.parameter_count()
            );
        }
        Command::Reconstruct {
            checkpoint,
            input,
            reference,
        } => {
            let (model, geom) = load_checkpoint::<T>(checkpoint, flag)?;
            let g = read_sinogram::<T>(input, &geom)?;
            let problem = Problem::<T>::new(&geom, &model.config)?;
            let rec = model.reconstruct(&problem, &g)?;
            finish(out, "reconstruction", &rec, reference.as_deref(), &geom, window)?;
        }
        Command::Eval {
            dataset,
            method,
            checkpoint,
            filter,
            bandwidth,
            tv,
        } => {
            let ds = Dataset::open(dataset)?;
            let geom = resolve_geometry(flag, Some(ds.geometry().clone()))?;
            let pairs = ds.load_all::<T>()?;
            let mode = ds.meta.spec.op_mode;
            let method: Box<dyn Reconstructor<T>> = match method {
                Method::Fbp => {
                    linear_only(mode, "fbp")?;
                    Box::new(Fbp::<T>::new(&geom, *filter, *bandwidth)?)
                }
                Method::Tv => Box::new(tv_solver::<T>(&geom, mode, tv)?),
                Method::Learned => {
                    let dir = checkpoint.as_deref().expect("clap requires --checkpoint");
                    let (model, _) =
                        Model::<T>::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
                    let problem = Problem::<T>::new(&geom, &model.config)?;
                    Box::new(Learned { model, problem })
                }
            };
            eval(out, method.as_ref(), &pairs)?;
        }
        Command::Compare {
            dataset,
            checkpoints,
            tune,
            bandwidth,
            tv,
        } => {
            let ds = Dataset::open(dataset)?;
            let geom = resolve_geometry(flag, Some(ds.geometry().clone()))?;
            let mode = ds.meta.spec.op_mode;
            linear_only(mode, "compare")?;
            let pairs = ds.load_all::<T>()?;
            let (bandwidth, lambda) = match tune {
                Some(dir) => {
                    let tuning: Vec<(Sinogram<T>, Image<T>)> =
                        Dataset::open(dir)?.load_all::<T>()?.into_iter().map(|(f, g)| (g, f)).collect();
                    (
                        tune_bandwidth(&tuning, &geom, Filter::Hann, &BANDWIDTH_GRID)?,
                        tune_lambda(&tuning, &geom, mode, tv.iterations, &LAMBDA_GRID)?,
                    )
                }
                None => (*bandwidth, tv.lambda),
            };
            let fbp = Fbp::<T>::new(&geom, Filter::Hann, bandwidth)?;
            let tv_method = tv_solver::<T>(&geom, mode, &TvArgs { lambda, ..tv.clone() })?;
            let mut learned = Vec::with_capacity(checkpoints.len());
            for (name, dir) in checkpoints {
                let (model, _) = load_checkpoint::<T>(dir, flag)?;
                let problem = Problem::<T>::new(&geom, &model.config)?;
                learned.push((name.clone(), Learned { model, problem }));
            }
            let mut methods: Vec<(String, &dyn Reconstructor<T>)> =
                vec![("fbp".into(), &fbp), ("tv".into(), &tv_method)];
            methods.extend(learned.iter().map(|(n, m)| (n.clone(), m as &dyn Reconstructor<T>)));
            let table = compare(&methods, &pairs)?;
            let text = table.to_text();
            print!("{text}");
            fs::write(out.join("compare.txt"), &text)?;
            table.write_csv(File::create(out.join("compare.csv"))?)?;
            fs::write(
                out.join("compare_settings.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "fbp_filter": "hann",
                    "fbp_bandwidth": bandwidth,
                    "tv_lambda": lambda,
                    "tv_iterations": tv.iterations,
                }))?,
            )?;
        }
    }
    Ok(())
}

fn linear_only(mode: OpMode, what: &str) -> Result<()> {
    if !mode.is_linear() {
        bail!("{what} expects line-integral data, the dataset uses {mode:?}");
    }
    Ok(())
}

fn tv_solver<T: Scalar>(geom: &Geometry, mode: OpMode, tv: &TvArgs) -> Result<Pdhg<T>> {
    let op = forward_operator(Arc::new(RayTransform::<T>::new(geom)?), mode)?;
    let norm = stacked_norm(op.as_ref());
    let mut params = PdhgParams::with_norm(norm, tv.lambda, tv.iterations);
    if let Some(sigma) = tv.sigma {
        params.sigma = sigma;
    }
    if let Some(tau) = tv.tau {
        params.tau = tau;
    }
    Ok(Pdhg::with_norm(op, params, norm, geom.pixel_size)?)
}

/// Loads a checkpoint with the geometry given by the flag or stored beside it.
fn load_checkpoint<T: Scalar>(dir: &Path, flag: Option<&Path>) -> Result<(Model<T>, Geometry)> {
    let (model, _) = Model::<T>::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
    let stored = dir.join("geometry.json");
    let geom = match flag {
        Some(path) => resolve_geometry(Some(path), None)?,
        None if stored.exists() => resolve_geometry(Some(&stored), None)?,
        None => resolve_geometry(None, None)?,
    };
    Ok((model, geom))
}

/// Writes the reconstruction and, with a reference, prints and stores its metrics.
fn finish<T: Scalar>(
    out: &Path,
    stem: &str,
    rec: &Image<T>,
    reference: Option<&Path>,
    geom: &Geometry,
    window: Option<&[f64]>,
) -> Result<()> {
    write_image(&out.join(format!("{stem}.tnsr")), rec, window)?;
    if let Some(path) = reference {
        let truth = read_image::<T>(path, geom)?;
        let metrics = serde_json::json!({
            "psnr": psnr(rec, &truth, None)?,
            "ssim": ssim(rec, &truth, None)?,
        });
        println!("{metrics}");
        fs::write(out.join(format!("{stem}_metrics.json")), metrics.to_string())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SampleRow {
    index: usize,
    psnr: f64,
    ssim: f64,
}

fn eval<T: Scalar>(out: &Path, method: &dyn Reconstructor<T>, pairs: &[(Image<T>, Sinogram<T>)]) -> Result<()> {
    let mut writer = csv::Writer::from_path(out.join("eval.csv"))?;
    let mut rows = Vec::with_capacity(pairs.len());
    for (index, (f, g)) in pairs.iter().enumerate() {
        let rec = method.reconstruct(g)?;
        let row = SampleRow {
            index,
            psnr: psnr(&rec, f, None)?,
            ssim: ssim(&rec, f, None)?,
        };
        writer.serialize(&row)?;
        rows.push(row);
    }
    writer.flush()?;
    if rows.is_empty() {
        bail!("empty dataset");
    }
    let n = rows.len() as f64;
    println!(
        "{} samples: mean PSNR {:.2} dB, mean SSIM {:.4}, {} parameters",
        rows.len(),
        rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        method.parameter_count()
    );
    Ok(())
}
