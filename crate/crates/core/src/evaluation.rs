//! Quantitative evaluation: reconstruction quality, the scientific-prior
//! line fit and validity scoring, radius ablation, latent interpolation,
//! local neighbourhood sampling, and sphere-uniformity statistics.
//!
//! The scientific prior is the linear relation between the ion-temperature
//! scalar (`scalars[0]`) and the image temperature, fitted by ordinary
//! least squares on training data. A generated sample is valid when its
//! absolute deviation from that line is within a threshold, expressed in
//! units of the fit's residual standard deviation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{no_grad, BnMode, Tensor};
use crate::data::{DataShape, Dataset, SampleRecord};
use crate::error::{io_err, Error, Result};
use crate::model::{encode, generate, project_to_sphere, ModelConfig, ModelParams};
use crate::rng::{Component, Stream};
use crate::training::Standardizer;

/// Default validity thresholds, in units of the train residual std.
pub const DEFAULT_THRESHOLD_SIGMAS: [f64; 4] = [0.5, 1.0, 2.0, 3.0];

/// Image temperature: mean brightness over all pixels and channels (the
/// integral of the image normalized by its element count).
pub fn image_temperature(image: &[f32]) -> f64 {
    image.iter().map(|&v| v as f64).sum::<f64>() / image.len() as f64
}

/// OLS fit of the ion-temperature scalar against image temperature, with
/// residual statistics. This is the validity oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScientificLine {
    pub slope: f64,
    pub intercept: f64,
    pub train_residual_std: f64,
    pub n_fit: usize,
}

/// Fit `t_ion = slope * image_temp + intercept` by ordinary least squares.
/// `points` are (t_ion, image_temp) pairs. Residual std uses denominator
/// n-2; a two-point fit is exact with residual std 0.
pub fn fit_scientific_line(points: &[(f64, f64)]) -> Result<ScientificLine> {
    let n = points.len();
    if n < 2 {
        return Err(Error::InvalidInput(
            "fit_scientific_line: need at least 2 points".into(),
        ));
    }
    let nf = n as f64;
    let mean_x = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let mean_y = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.1 - mean_x) * (p.1 - mean_x)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput(
            "fit_scientific_line: image temperatures are all identical".into(),
        ));
    }
    let sxy: f64 = points.iter().map(|p| (p.1 - mean_x) * (p.0 - mean_y)).sum();
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = points
        .iter()
        .map(|p| {
            let r = p.0 - (slope * p.1 + intercept);
            r * r
        })
        .sum();
    let train_residual_std = if n > 2 {
        (ss_res / (n as f64 - 2.0)).sqrt()
    } else {
        0.0
    };
    Ok(ScientificLine {
        slope,
        intercept,
        train_residual_std,
        n_fit: n,
    })
}

impl ScientificLine {
    /// Signed deviation of a sample from the fitted line.
    pub fn residual(&self, t_ion: f64, image_temp: f64) -> f64 {
        t_ion - (self.slope * image_temp + self.intercept)
    }
}

/// Residual of one record against the line.
pub fn constraint_residual(line: &ScientificLine, record: &SampleRecord) -> f64 {
    line.residual(record.scalars[0] as f64, image_temperature(&record.image))
}

/// Fraction of samples whose |residual| is within the threshold.
pub fn valid_fraction(
    line: &ScientificLine,
    samples: &[(f64, f64)],
    threshold: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("valid_fraction"));
    }
    if threshold < 0.0 {
        return Err(Error::InvalidInput(
            "valid_fraction: threshold must be >= 0".into(),
        ));
    }
    let n_valid = samples
        .iter()
        .filter(|(t, it)| line.residual(*t, *it).abs() <= threshold)
        .count();
    Ok(n_valid as f64 / samples.len() as f64)
}

// ── reconstruction metrics ───────────────────────────────────────────

const EVAL_BATCH: usize = 256;

/// Run the eval-mode pipeline over a dataset: encode, project, generate,
/// de-standardize the scalar head.
pub fn reconstruct(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    standardizer: &Standardizer,
    dataset: &Dataset,
) -> Result<Vec<SampleRecord>> {
    if dataset.is_empty() {
        return Err(Error::Empty("reconstruct"));
    }
    let shape = dataset.shape;
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.records.chunks(EVAL_BATCH) {
        let b = chunk.len();
        let mut images = Vec::with_capacity(b * shape.image_len());
        let mut scalars = Vec::with_capacity(b * shape.n_scalars);
        for rec in chunk {
            images.extend_from_slice(&rec.image);
            scalars.extend(standardizer.transform(&rec.scalars));
        }
        let images =
            Tensor::from_vec(images, &[b, shape.channels, shape.height, shape.width])?;
        let scalars = Tensor::from_vec(scalars, &[b, shape.n_scalars])?;
        let (img_hat, s_hat) = no_grad(|| -> Result<_> {
            let z = encode(params, cfg, &images, &scalars, BnMode::Eval)?;
            let zt = project_to_sphere(&z)?;
            generate(params, cfg, &zt, BnMode::Eval)
        })?;
        let img_data = img_hat.to_vec();
        let s_data = s_hat.to_vec();
        for i in 0..b {
            let image = img_data[i * shape.image_len()..(i + 1) * shape.image_len()].to_vec();
            let std_scalars = &s_data[i * shape.n_scalars..(i + 1) * shape.n_scalars];
            out.push(SampleRecord {
                image,
                scalars: standardizer.inverse(std_scalars),
            });
        }
    }
    Ok(out)
}

/// Coefficient of determination of predictions against truth; `None` when
/// the truth has zero variance (SS_tot = 0).
pub fn r_squared(truth: &[f64], pred: &[f64]) -> Option<f64> {
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|&y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return None;
    }
    let ss_res: f64 = truth
        .iter()
        .zip(pred.iter())
        .map(|(&y, &p)| (y - p) * (y - p))
        .sum();
    Some(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconMetrics {
    /// MSE over all image elements and samples.
    pub image_mse: f64,
    /// Per-scalar R^2 in original units; null where the test variance is 0.
    pub r2_per_scalar: Vec<Option<f64>>,
    /// Mean over the defined entries.
    pub r2_mean: Option<f64>,
}

pub fn recon_metrics(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    standardizer: &Standardizer,
    test: &Dataset,
) -> Result<ReconMetrics> {
    let recons = reconstruct(params, cfg, standardizer, test)?;
    let mut se = 0.0f64;
    let mut count = 0usize;
    for (rec, hat) in test.records.iter().zip(recons.iter()) {
        for (&a, &b) in rec.image.iter().zip(hat.image.iter()) {
            let d = a as f64 - b as f64;
            se += d * d;
        }
        count += rec.image.len();
    }
    let image_mse = se / count as f64;

    let s = test.shape.n_scalars;
    let mut r2_per_scalar = Vec::with_capacity(s);
    for j in 0..s {
        let truth: Vec<f64> = test.records.iter().map(|r| r.scalars[j] as f64).collect();
        let pred: Vec<f64> = recons.iter().map(|r| r.scalars[j] as f64).collect();
        r2_per_scalar.push(r_squared(&truth, &pred));
    }
    let defined: Vec<f64> = r2_per_scalar.iter().filter_map(|&v| v).collect();
    let r2_mean = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(ReconMetrics {
        image_mse,
        r2_per_scalar,
        r2_mean,
    })
}

// ── sampling and validity ────────────────────────────────────────────

/// Draw n prior samples, project to the sphere, scale by `radius`, and
/// decode in eval mode. Scalars come back de-standardized. A fixed seed
/// yields the same sphere points for every radius.
pub fn generate_samples(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    standardizer: &Standardizer,
    n: usize,
    radius: f64,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Empty("generate_samples"));
    }
    if radius <= 0.0 {
        return Err(Error::InvalidInput(
            "generate_samples: radius must be > 0".into(),
        ));
    }
    let shape = cfg.data_shape;
    let d = cfg.arch.latent_dim;
    let mut stream = Stream::named(seed, Component::Prior);
    let mut records = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_BATCH) {
        let b = EVAL_BATCH.min(n - start);
        let z = crate::training::sample_prior(b, d, &mut stream)?;
        let (img, s) = no_grad(|| -> Result<_> {
            let zt = project_to_sphere(&z)?;
            let scaled = zt.scalar_mul(radius as f32)?;
            generate(params, cfg, &scaled, BnMode::Eval)
        })?;
        let img_data = img.to_vec();
        let s_data = s.to_vec();
        for i in 0..b {
            records.push(SampleRecord {
                image: img_data[i * shape.image_len()..(i + 1) * shape.image_len()].to_vec(),
                scalars: standardizer
                    .inverse(&s_data[i * shape.n_scalars..(i + 1) * shape.n_scalars]),
            });
        }
    }
    Ok(Dataset { shape, records })
}

/// One row of the validity curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidityRow {
    pub radius: f64,
    pub threshold: f64,
    pub n_valid: usize,
    pub n_total: usize,
}

pub fn residuals_of(line: &ScientificLine, dataset: &Dataset) -> Vec<f64> {
    dataset
        .records
        .iter()
        .map(|r| constraint_residual(line, r))
        .collect()
}

/// Generate at one radius and count valid samples per threshold.
#[allow(clippy::too_many_arguments)]
pub fn generate_and_score(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    standardizer: &Standardizer,
    line: &ScientificLine,
    n: usize,
    radius: f64,
    thresholds: &[f64],
    seed: u64,
) -> Result<Vec<ValidityRow>> {
    let samples = generate_samples(params, cfg, standardizer, n, radius, seed)?;
    let residuals = residuals_of(line, &samples);
    Ok(thresholds
        .iter()
        .map(|&threshold| ValidityRow {
            radius,
            threshold,
            n_valid: residuals.iter().filter(|r| r.abs() <= threshold).count(),
            n_total: residuals.len(),
        })
        .collect())
}

// ── latent interpolation ─────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct InterpPoint {
    pub t: f64,
    pub image: Vec<f32>,
    pub scalars: Vec<f32>,
    pub image_temp: f64,
    pub t_ion: f64,
    pub residual: f64,
}

pub(crate) fn lerp(a: &[f32], b: &[f32], t: f64) -> Vec<f32> {
    // Endpoints reproduce the inputs exactly.
    if t == 0.0 {
        return a.to_vec();
    }
    if t == 1.0 {
        return b.to_vec();
    }
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| ((1.0 - t) * x as f64 + t * y as f64) as f32)
        .collect()
}

fn encode_single(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    standardizer: &Standardizer,
    rec: &SampleRecord,
) -> Result<Vec<f32>> {
    let shape = cfg.data_shape;
    let images = Tensor::from_vec(
        rec.image.clone(),
        &[1, shape.channels, shape.height, shape.width],
    )?;
    let scalars = Tensor::from_vec(standardizer.transform(&rec.scalars), &[1, shape.n_scalars])?;
    Ok(no_grad(|| encode(params, cfg, &images, &scalars, BnMode::Eval))?.to_vec())
}

/// Linear interpolation between the Euclidean (pre-projection) encodings of
/// two samples; each interpolant is projected onto the sphere and decoded,
/// then scored against the scientific line.
#[allow(clippy::too_many_arguments)]
pub fn interpolate_latent(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    standardizer: &Standardizer,
    line: &ScientificLine,
    sample_a: &SampleRecord,
    sample_b: &SampleRecord,
    n_steps: usize,
) -> Result<Vec<InterpPoint>> {
    if n_steps < 2 {
        return Err(Error::InvalidInput(
            "interpolate_latent: n_steps must be >= 2".into(),
        ));
    }
    let z_a = encode_single(params, cfg, standardizer, sample_a)?;
    let z_b = encode_single(params, cfg, standardizer, sample_b)?;

    let mut out = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let t = k as f64 / (n_steps - 1) as f64;
        let z_t = Tensor::from_vec(lerp(&z_a, &z_b, t), &[1, cfg.arch.latent_dim])?;
        let (img, s) = no_grad(|| -> Result<_> {
            let zt = project_to_sphere(&z_t).map_err(|e| match e {
                Error::DegenerateLatent { norm, floor, .. } => Error::Numerical(format!(
                    "degenerate interpolation latent at t={t}: norm {norm:e} <= {floor:e}"
                )),
                other => other,
            })?;
            generate(params, cfg, &zt, BnMode::Eval)
        })?;
        let image = img.to_vec();
        let scalars = standardizer.inverse(&s.to_vec());
        let image_temp = image_temperature(&image);
        let t_ion = scalars[0] as f64;
        out.push(InterpPoint {
            t,
            residual: line.residual(t_ion, image_temp),
            image,
            scalars,
            image_temp,
            t_ion,
        });
    }
    Ok(out)
}

// ── local neighbourhood sampling ─────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct LocalSpread {
    pub center_id: usize,
    pub res_mean: f64,
    pub res_std: f64,
}

pub(crate) fn draw_local_latents(
    center: &[f32],
    n: usize,
    variance: f64,
    stream: &mut Stream,
) -> Vec<f32> {
    let sd = variance.sqrt();
    let mut out = Vec::with_capacity(n * center.len());
    for _ in 0..n {
        for &c in center {
            out.push((c as f64 + sd * stream.normal()) as f32);
        }
    }
    out
}

/// Sample around encoded centers with N(z_center, variance*I), decode, and
/// report the mean and standard deviation of the constraint residuals per
/// center.
#[allow(clippy::too_many_arguments)]
pub fn local_sample(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    standardizer: &Standardizer,
    line: &ScientificLine,
    centers: &[&SampleRecord],
    n_per_center: usize,
    variance: f64,
    seed: u64,
) -> Result<Vec<LocalSpread>> {
    if centers.is_empty() {
        return Err(Error::Empty("local_sample"));
    }
    if n_per_center < 2 {
        return Err(Error::InvalidInput(
            "local_sample: n_per_center must be >= 2".into(),
        ));
    }
    if variance <= 0.0 {
        return Err(Error::InvalidInput(
            "local_sample: variance must be > 0".into(),
        ));
    }
    let shape = cfg.data_shape;
    let mut out = Vec::with_capacity(centers.len());
    for (ci, center) in centers.iter().enumerate() {
        let z_c = encode_single(params, cfg, standardizer, center)?;
        let mut stream = Stream::new(seed, Component::Local, ci as u64);
        let z = Tensor::from_vec(
            draw_local_latents(&z_c, n_per_center, variance, &mut stream),
            &[n_per_center, cfg.arch.latent_dim],
        )?;
        let (img, s) = no_grad(|| -> Result<_> {
            let zt = project_to_sphere(&z)?;
            generate(params, cfg, &zt, BnMode::Eval)
        })?;
        let img_data = img.to_vec();
        let s_data = s.to_vec();
        let residuals: Vec<f64> = (0..n_per_center)
            .map(|i| {
                let image = &img_data[i * shape.image_len()..(i + 1) * shape.image_len()];
                let scalars = standardizer
                    .inverse(&s_data[i * shape.n_scalars..(i + 1) * shape.n_scalars]);
                line.residual(scalars[0] as f64, image_temperature(image))
            })
            .collect();
        let mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
        let var = residuals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>()
            / (residuals.len() as f64 - 1.0);
        out.push(LocalSpread {
            center_id: ci,
            res_mean: mean,
            res_std: var.sqrt(),
        });
    }
    Ok(out)
}

// ── sphere uniformity ────────────────────────────────────────────────

/// Mean resultant length of unit vectors (row-major n x d): the norm of
/// their average. Near 0 for uniformly dispersed points, 1 at maximal
/// concentration. Errors if any row is off the unit sphere by more than
/// 1e-4.
pub fn uniformity_statistic(rows: &[f64], d: usize) -> Result<f64> {
    if d == 0 || rows.is_empty() || rows.len() % d != 0 {
        return Err(Error::InvalidInput(
            "uniformity_statistic: rows must be a nonempty n x d matrix".into(),
        ));
    }
    let n = rows.len() / d;
    let mut mean = vec![0.0f64; d];
    for (i, row) in rows.chunks_exact(d).enumerate() {
        let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::InvalidInput(format!(
                "uniformity_statistic: row {i} has norm {norm}, not unit"
            )));
        }
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    Ok(mean.iter().map(|v| v * v).sum::<f64>().sqrt())
}

// ── artifact writers ─────────────────────────────────────────────────

pub fn write_validity_csv(path: &Path, rows: &[ValidityRow]) -> Result<()> {
    let mut out = String::from("radius,threshold,n_valid,n_total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.radius, r.threshold, r.n_valid, r.n_total
        ));
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn write_interp_csv(path: &Path, points: &[InterpPoint]) -> Result<()> {
    let mut out = String::from("t,residual,image_temp,t_ion\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.t, p.residual, p.image_temp, p.t_ion
        ));
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn write_local_csv(path: &Path, spreads: &[LocalSpread]) -> Result<()> {
    let mut out = String::from("center_id,res_mean,res_std\n");
    for s in spreads {
        out.push_str(&format!("{},{},{}\n", s.center_id, s.res_mean, s.res_std));
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn write_recon_metrics_json(path: &Path, metrics: &ReconMetrics) -> Result<()> {
    let json = serde_json::to_string_pretty(metrics)
        .map_err(|e| Error::Config(format!("serialize recon metrics: {e}")))?;
    std::fs::write(path, json).map_err(io_err(path))
}

/// Binary PGM (P5), 8-bit.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::ShapeMismatch {
            op: "write_pgm",
            lhs: format!("{width}x{height}"),
            rhs: format!("{} pixels", pixels.len()),
        });
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// Write one PGM grid per channel (`grid_ch{c}.pgm` in `dir`). `rows` is a
/// list of image rows; every image is a full (C,H,W) volume in [0,1].
pub fn write_channel_grids(dir: &Path, shape: DataShape, rows: &[Vec<&[f32]>]) -> Result<()> {
    if rows.is_empty() || rows.iter().any(|r| r.is_empty()) {
        return Err(Error::Empty("write_channel_grids"));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidInput(
            "write_channel_grids: ragged rows".into(),
        ));
    }
    let (h, w) = (shape.height, shape.width);
    for ch in 0..shape.channels {
        let mut pixels = vec![0u8; rows.len() * h * cols * w];
        for (ri, row) in rows.iter().enumerate() {
            for (ci, image) in row.iter().enumerate() {
                let plane = &image[ch * h * w..(ch + 1) * h * w];
                for y in 0..h {
                    for x in 0..w {
                        let v = (plane[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                        pixels[(ri * h + y) * cols * w + ci * w + x] = v;
                    }
                }
            }
        }
        write_pgm(&dir.join(format!("grid_ch{ch}.pgm")), cols * w, rows.len() * h, &pixels)?;
    }
    Ok(())
}
