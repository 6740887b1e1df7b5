//! Two-phase adversarial training of the sphere-projected WAE.
//!
//! Each step runs the two procedures that define the scheme: the
//! discriminator phase scores detached encoder latents against draws from
//! the Euclidean N(0,I) prior, and the autoencoder phase reconstructs
//! through the sphere projection while pushing the (pre-projection)
//! aggregate latent toward the prior. The generator never sees an
//! unprojected latent; the discriminator never sees a projected one.
//!
//! Both phases encode in train mode, so batch-norm running statistics are
//! folded twice per step; they only matter in eval mode.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{no_grad, BnMode, Tensor};
use crate::data::Dataset;
use crate::error::{io_err, Error, Result};
use crate::model::{
    discriminate, encode, generate, project_to_sphere, ModelConfig, ModelParams,
};
use crate::rng::{Component, Stream};

/// Optimization settings. Epochs default to the desk-scale 200; the paper
/// setup used 600 at full scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Weight of the adversarial term in the autoencoder phase.
    pub lambda_adv: f64,
    /// Weight of the scalar reconstruction term relative to the image term.
    pub w_scalar: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda_adv: 1.0,
            w_scalar: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("train: lr must be > 0".into()));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("train: {name} must be in [0, 1)")));
            }
        }
        if self.lambda_adv < 0.0 || self.w_scalar < 0.0 || self.batch_size == 0 {
            return Err(Error::Config(
                "train: lambda_adv, w_scalar >= 0 and batch_size >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-scalar affine standardization fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Standardizer {
    /// Columns with (near-)zero spread standardize with unit scale so the
    /// transform stays invertible.
    pub fn fit(dataset: &Dataset) -> Result<Standardizer> {
        if dataset.is_empty() {
            return Err(Error::Empty("Standardizer::fit"));
        }
        let s = dataset.shape.n_scalars;
        let n = dataset.len() as f64;
        let mut mean = vec![0.0f64; s];
        for rec in &dataset.records {
            for (m, &v) in mean.iter_mut().zip(rec.scalars.iter()) {
                *m += v as f64;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0f64; s];
        for rec in &dataset.records {
            for (v, (&x, &m)) in var.iter_mut().zip(rec.scalars.iter().zip(mean.iter())) {
                let d = x as f64 - m;
                *v += d * d;
            }
        }
        let std: Vec<f32> = var
            .iter()
            .map(|&v| {
                let sd = (v / n).sqrt();
                if sd < 1e-8 {
                    1.0
                } else {
                    sd as f32
                }
            })
            .collect();
        Ok(Standardizer {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std,
        })
    }

    pub fn transform(&self, scalars: &[f32]) -> Vec<f32> {
        scalars
            .iter()
            .zip(self.mean.iter().zip(self.std.iter()))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect()
    }

    pub fn inverse(&self, standardized: &[f32]) -> Vec<f32> {
        standardized
            .iter()
            .zip(self.mean.iter().zip(self.std.iter()))
            .map(|(&v, (&m, &s))| v * s + m)
            .collect()
    }
}

/// First/second moment accumulators for one parameter list, plus the
/// shared step counter.
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor<f32>]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }
}

/// One Adam update over a parameter list. Gradients are read from each
/// tensor's accumulated `grad` (absent means zero). Parameters without a
/// gradient still advance the moment decay.
pub fn adam_update(params: &[Tensor<f32>], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_update",
            lhs: format!("{} params", params.len()),
            rhs: format!("{} state slots", state.m.len()),
        });
    }
    state.t += 1;
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let lr = cfg.lr as f32;
    let eps = cfg.adam_eps as f32;
    let bias1 = 1.0 - (cfg.beta1 as f32).powi(state.t as i32);
    let bias2 = 1.0 - (cfg.beta2 as f32).powi(state.t as i32);
    for (i, p) in params.iter().enumerate() {
        let grad = p.grad();
        let g = grad.as_deref().unwrap_or(&[]);
        if !g.is_empty() && g.len() != p.numel() {
            return Err(Error::ShapeMismatch {
                op: "adam_update",
                lhs: format!("{:?}", p.shape()),
                rhs: format!("grad len {}", g.len()),
            });
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let mut data = p.data_mut();
        for j in 0..data.len() {
            let gj = if g.is_empty() { 0.0 } else { g[j] };
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Draw an (n, d) batch of i.i.d. standard normals from a seeded stream.
pub fn sample_prior(n: usize, d: usize, stream: &mut Stream) -> Result<Tensor<f32>> {
    let data: Vec<f32> = (0..n * d).map(|_| stream.normal() as f32).collect();
    Tensor::from_vec(data, &[n, d])
}

#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub recon_image: f64,
    pub recon_scalar: f64,
    pub adv: f64,
    pub disc: f64,
}

/// One epoch's averaged losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub recon_image_mse: f64,
    pub recon_scalar_mse: f64,
    pub adv_loss: f64,
    pub disc_loss: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,recon_image_mse,recon_scalar_mse,adv_loss,disc_loss,wall_ms\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.recon_image_mse, r.recon_scalar_mse, r.adv_loss, r.disc_loss, r.wall_ms
            ));
        }
        std::fs::write(path, out).map_err(io_err(path))
    }
}

fn finite_or_abort(value: f64, context: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numerical(format!("non-finite {context}")))
    }
}

pub struct Trainer<'a> {
    pub params: &'a ModelParams<f32>,
    pub model_cfg: &'a ModelConfig,
    pub train_cfg: &'a TrainConfig,
    pub ae_state: AdamState,
    pub disc_state: AdamState,
    ae_list: Vec<Tensor<f32>>,
    disc_list: Vec<Tensor<f32>>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        params: &'a ModelParams<f32>,
        model_cfg: &'a ModelConfig,
        train_cfg: &'a TrainConfig,
    ) -> Trainer<'a> {
        let ae_list = params.ae_params();
        let disc_list = params.disc_params();
        Trainer {
            params,
            model_cfg,
            train_cfg,
            ae_state: AdamState::new(&ae_list),
            disc_state: AdamState::new(&disc_list),
            ae_list,
            disc_list,
        }
    }

    /// Discriminator phase: detached encoder latents vs prior draws;
    /// updates only discriminator parameters.
    pub fn disc_phase(
        &mut self,
        images: &Tensor<f32>,
        scalars: &Tensor<f32>,
        prior: &mut Stream,
        context: &str,
    ) -> Result<f64> {
        for p in &self.disc_list {
            p.zero_grad();
        }
        let z_fake = no_grad(|| {
            encode(self.params, self.model_cfg, images, scalars, BnMode::Train)
        })?;
        let b = images.shape()[0];
        let z_real = sample_prior(b, self.model_cfg.arch.latent_dim, prior)?;
        let p_real = discriminate(self.params, self.model_cfg, &z_real)?;
        let p_fake = discriminate(self.params, self.model_cfg, &z_fake)?;
        let ones = Tensor::ones(&[b, 1]);
        let zeros = Tensor::zeros(&[b, 1]);
        let loss = p_real.bce_loss(&ones)?.add(&p_fake.bce_loss(&zeros)?)?;
        let value = finite_or_abort(loss.item()? as f64, &format!("disc_loss at {context}"))?;
        loss.backward()?;
        adam_update(&self.disc_list, &mut self.disc_state, self.train_cfg)?;
        Ok(value)
    }

    /// Autoencoder phase: reconstruction through the sphere projection plus
    /// the adversarial term on the pre-projection latent; updates only
    /// encoder and generator parameters.
    pub fn ae_phase(
        &mut self,
        images: &Tensor<f32>,
        scalars: &Tensor<f32>,
        context: &str,
    ) -> Result<(f64, f64, f64)> {
        for p in self.ae_list.iter().chain(self.disc_list.iter()) {
            p.zero_grad();
        }
        let z = encode(self.params, self.model_cfg, images, scalars, BnMode::Train)?;
        let z_tilde = project_to_sphere(&z)?;
        check_unit_rows(&z_tilde, context)?;
        let (img_hat, s_hat) = generate(self.params, self.model_cfg, &z_tilde, BnMode::Train)?;
        let recon_i = img_hat.mse_loss(images)?;
        let recon_s = s_hat.mse_loss(scalars)?;
        let adv = discriminate(self.params, self.model_cfg, &z)?.bce_loss(&Tensor::ones(&[
            images.shape()[0],
            1,
        ]))?;

        let ri = finite_or_abort(recon_i.item()? as f64, &format!("recon_image at {context}"))?;
        let rs = finite_or_abort(recon_s.item()? as f64, &format!("recon_scalar at {context}"))?;
        let av = finite_or_abort(adv.item()? as f64, &format!("adv_loss at {context}"))?;

        let total = recon_i
            .add(&recon_s.scalar_mul(self.train_cfg.w_scalar as f32)?)?
            .add(&adv.scalar_mul(self.train_cfg.lambda_adv as f32)?)?;
        total.backward()?;
        adam_update(&self.ae_list, &mut self.ae_state, self.train_cfg)?;
        Ok((ri, rs, av))
    }

    /// One full WAE-GAN step: discriminator phase then autoencoder phase.
    pub fn step(
        &mut self,
        images: &Tensor<f32>,
        scalars: &Tensor<f32>,
        prior: &mut Stream,
        context: &str,
    ) -> Result<StepLosses> {
        let disc = self.disc_phase(images, scalars, prior, context)?;
        let (recon_image, recon_scalar, adv) = self.ae_phase(images, scalars, context)?;
        Ok(StepLosses {
            recon_image,
            recon_scalar,
            adv,
            disc,
        })
    }
}

/// The generator must only ever be fed unit-norm rows during training.
fn check_unit_rows(z_tilde: &Tensor<f32>, context: &str) -> Result<()> {
    let (rows, cols) = (z_tilde.shape()[0], z_tilde.shape()[1]);
    let d = z_tilde.data();
    for r in 0..rows {
        let norm: f32 = d[r * cols..(r + 1) * cols]
            .iter()
            .map(|&v| v * v)
            .sum::<f32>()
            .sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Numerical(format!(
                "generator input row {r} has norm {norm} at {context}"
            )));
        }
    }
    Ok(())
}

/// Batch index ranges for one epoch; a trailing singleton is merged into
/// the previous batch so batch norm always sees at least two samples.
fn batch_ranges(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut ranges: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        ranges.push((start, end));
        start = end;
    }
    if ranges.len() > 1 {
        let last = *ranges.last().unwrap();
        if last.1 - last.0 == 1 {
            ranges.pop();
            ranges.last_mut().unwrap().1 = last.1;
        }
    }
    ranges
}

/// Full training run on an already-split training set. Returns the trained
/// parameters, per-epoch log, and the scalar standardizer (which the
/// checkpoint must carry for inference-time de-standardization).
pub fn train(
    train_set: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams<f32>, TrainLog, Standardizer)> {
    if train_set.is_empty() {
        return Err(Error::Empty("train"));
    }
    train_cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.data_shape != train_set.shape {
        return Err(Error::ShapeMismatch {
            op: "train",
            lhs: format!("{:?}", model_cfg.data_shape),
            rhs: format!("{:?}", train_set.shape),
        });
    }

    let standardizer = Standardizer::fit(train_set)?;
    let params = crate::model::init_params::<f32>(model_cfg, seed)?;
    let shape = train_set.shape;

    // Pre-standardize once; images are used raw (already in [0,1]).
    let scalars_std: Vec<Vec<f32>> = train_set
        .records
        .iter()
        .map(|r| standardizer.transform(&r.scalars))
        .collect();

    let mut trainer = Trainer::new(&params, model_cfg, train_cfg);
    let mut shuffle = Stream::named(seed, Component::Shuffle);
    let mut prior = Stream::named(seed, Component::Prior);
    let mut log = TrainLog::default();

    let n = train_set.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..train_cfg.epochs {
        let start = Instant::now();
        shuffle.shuffle(&mut order);
        let mut sums = [0.0f64; 4];
        let mut seen = 0usize;
        for (bi, &(lo, hi)) in batch_ranges(n, train_cfg.batch_size).iter().enumerate() {
            let idx = &order[lo..hi];
            let bsz = idx.len();
            let mut images = Vec::with_capacity(bsz * shape.image_len());
            let mut scalars = Vec::with_capacity(bsz * shape.n_scalars);
            for &i in idx {
                images.extend_from_slice(&train_set.records[i].image);
                scalars.extend_from_slice(&scalars_std[i]);
            }
            let images = Tensor::from_vec(
                images,
                &[bsz, shape.channels, shape.height, shape.width],
            )?;
            let scalars = Tensor::from_vec(scalars, &[bsz, shape.n_scalars])?;
            let context = format!("epoch {epoch} batch {bi}");
            let losses = trainer.step(&images, &scalars, &mut prior, &context)?;
            let w = bsz as f64;
            sums[0] += losses.recon_image * w;
            sums[1] += losses.recon_scalar * w;
            sums[2] += losses.adv * w;
            sums[3] += losses.disc * w;
            seen += bsz;
        }
        let w = seen as f64;
        log.epochs.push(EpochRecord {
            epoch,
            recon_image_mse: sums[0] / w,
            recon_scalar_mse: sums[1] / w,
            adv_loss: sums[2] / w,
            disc_loss: sums[3] / w,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    drop(trainer);
    Ok((params, log, standardizer))
}
