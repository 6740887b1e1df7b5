//! The networks: multimodal encoder E, unit-sphere projection P, multimodal
//! generator G, and the latent discriminator.
//!
//! The pipeline is (I,S) -E-> z -P-> z~ -G-> (I,S). The encoder output z is
//! unconstrained Euclidean (no final activation) so its aggregate can be
//! matched to a Gaussian prior; the generator only ever consumes sphere
//! points during training; the discriminator only ever consumes
//! pre-projection latents and prior draws.
//!
//! The reference architecture (conv ladder, widths) is a documented default
//! recorded in every checkpoint and run summary.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, Real, Tensor};
use crate::data::{DataShape, SampleRecord};
use crate::error::{io_err, Error, Result};
use crate::evaluation::ScientificLine;
use crate::rng::{Component, Stream};
use crate::training::Standardizer;

pub const CKPT_MAGIC: [u8; 4] = *b"SWAE";
pub const CKPT_VERSION: u32 = 1;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
/// Encoder convs: kernel 3, stride 2, pad 1 (halves even spatial dims).
const ENC_KERNEL: usize = 3;
/// Generator deconvs: kernel 2, stride 2, pad 0 (doubles spatial dims).
const GEN_KERNEL: usize = 2;
/// Row norms at or below this are degenerate for the sphere projection.
pub const NORM_FLOOR: f64 = 1e-8;

/// Network architecture knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub latent_dim: usize,
    /// Output channels of each stride-2 encoder conv.
    pub conv_channels: Vec<usize>,
    pub scalar_width: usize,
    pub fusion_width: usize,
    pub disc_widths: Vec<usize>,
    pub leaky_relu_slope: f64,
    /// Batch norm after each generator deconv. Off by default: the
    /// eval-mode renormalization largely cancels the input scale, which
    /// blunts the radius sensitivity the sphere parameterization is
    /// supposed to exhibit.
    pub gen_batch_norm: bool,
    /// Bias terms in the generator's image path (seed dense, deconvs, 1x1
    /// output conv). Off by default: without them the pre-sigmoid logits
    /// scale with the input radius instead of relaxing toward a fixed
    /// bias-driven image, so off-unit radii visibly degrade.
    pub gen_image_bias: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            latent_dim: 16,
            conv_channels: vec![16, 32],
            scalar_width: 64,
            fusion_width: 128,
            disc_widths: vec![128, 128, 128],
            leaky_relu_slope: 0.2,
            gen_batch_norm: false,
            gen_image_bias: false,
        }
    }
}

/// Everything needed to rebuild the parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub data_shape: DataShape,
    pub arch: ArchConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        if a.latent_dim == 0
            || a.scalar_width == 0
            || a.fusion_width == 0
            || a.conv_channels.is_empty()
            || a.conv_channels.iter().any(|&c| c == 0)
            || a.disc_widths.is_empty()
            || a.disc_widths.iter().any(|&w| w == 0)
        {
            return Err(Error::Config("arch: all widths must be >= 1".into()));
        }
        let down = 1usize << a.conv_channels.len();
        let (h, w) = (self.data_shape.height, self.data_shape.width);
        if h % down != 0 || w % down != 0 || h / down == 0 || w / down == 0 {
            return Err(Error::Config(format!(
                "arch: image {h}x{w} must be divisible by 2^{} with nonzero remainder size",
                a.conv_channels.len()
            )));
        }
        Ok(())
    }

    /// Spatial extent at the bottleneck.
    fn seed_spatial(&self) -> (usize, usize) {
        let down = 1usize << self.arch.conv_channels.len();
        (self.data_shape.height / down, self.data_shape.width / down)
    }

    /// Hidden channels between the last deconv and the 1x1 output conv.
    fn head_width(&self) -> usize {
        (self.arch.conv_channels[0] / 2).max(4)
    }
}

// ── parameter containers ─────────────────────────────────────────────

pub struct Dense<T: Real> {
    pub w: Tensor<T>,
    pub b: Option<Tensor<T>>,
}

impl<T: Real> Dense<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = x.matmul(&self.w)?;
        match &self.b {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

pub struct ConvLayer<T: Real> {
    pub w: Tensor<T>,
    pub b: Option<Tensor<T>>,
}

pub struct BnLayer<T: Real> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Real> BnLayer<T> {
    fn new(channels: usize) -> Result<BnLayer<T>> {
        Ok(BnLayer {
            gamma: Tensor::param(vec![T::ONE; channels], &[channels])?,
            beta: Tensor::param(vec![T::ZERO; channels], &[channels])?,
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
        })
    }

    fn forward(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        x.batch_norm(
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            mode,
            T::from_f64(BN_MOMENTUM),
            T::from_f64(BN_EPS),
        )
    }
}

pub struct Encoder<T: Real> {
    pub convs: Vec<ConvLayer<T>>,
    pub bns: Vec<BnLayer<T>>,
    pub scalar_fc: Dense<T>,
    pub fusion_fc: Dense<T>,
    pub latent_fc: Dense<T>,
}

pub struct Generator<T: Real> {
    pub seed_fc: Dense<T>,
    pub deconvs: Vec<ConvLayer<T>>,
    pub bns: Vec<BnLayer<T>>,
    pub out_conv: ConvLayer<T>,
    pub scalar_fc1: Dense<T>,
    pub scalar_fc2: Dense<T>,
}

pub struct Discriminator<T: Real> {
    pub layers: Vec<Dense<T>>,
}

pub struct ModelParams<T: Real> {
    pub encoder: Encoder<T>,
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
}

type WeightSource<'a, T> = dyn FnMut(usize, &[usize]) -> Result<Tensor<T>> + 'a;

fn build_params<T: Real>(cfg: &ModelConfig, draw: &mut WeightSource<'_, T>) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let shape = cfg.data_shape;
    let a = &cfg.arch;
    let (sh, sw) = cfg.seed_spatial();
    let c_last = *a.conv_channels.last().unwrap();
    let flat = c_last * sh * sw;

    let zero_bias = |outs: usize| Tensor::param(vec![T::ZERO; outs], &[outs]);
    let dense = |draw: &mut WeightSource<'_, T>, ins: usize, outs: usize| -> Result<Dense<T>> {
        Ok(Dense {
            w: draw(ins, &[ins, outs])?,
            b: Some(zero_bias(outs)?),
        })
    };
    let dense_nb = |draw: &mut WeightSource<'_, T>,
                    ins: usize,
                    outs: usize,
                    bias: bool|
     -> Result<Dense<T>> {
        Ok(Dense {
            w: draw(ins, &[ins, outs])?,
            b: if bias { Some(zero_bias(outs)?) } else { None },
        })
    };

    // Encoder.
    let mut convs = Vec::new();
    let mut bns = Vec::new();
    let mut in_ch = shape.channels;
    for &out_ch in &a.conv_channels {
        convs.push(ConvLayer {
            w: draw(in_ch * ENC_KERNEL * ENC_KERNEL, &[out_ch, in_ch, ENC_KERNEL, ENC_KERNEL])?,
            b: Some(zero_bias(out_ch)?),
        });
        bns.push(BnLayer::new(out_ch)?);
        in_ch = out_ch;
    }
    let encoder = Encoder {
        convs,
        bns,
        scalar_fc: dense(draw, shape.n_scalars, a.scalar_width)?,
        fusion_fc: dense(draw, flat + a.scalar_width, a.fusion_width)?,
        latent_fc: dense(draw, a.fusion_width, a.latent_dim)?,
    };

    // Generator.
    let head = cfg.head_width();
    let rev: Vec<usize> = a.conv_channels.iter().rev().copied().collect();
    let mut deconvs = Vec::new();
    let mut gbns = Vec::new();
    for (i, &cin) in rev.iter().enumerate() {
        let cout = if i + 1 < rev.len() { rev[i + 1] } else { head };
        deconvs.push(ConvLayer {
            w: draw(cin * GEN_KERNEL * GEN_KERNEL, &[cin, cout, GEN_KERNEL, GEN_KERNEL])?,
            b: if a.gen_image_bias {
                Some(zero_bias(cout)?)
            } else {
                None
            },
        });
        if a.gen_batch_norm {
            gbns.push(BnLayer::new(cout)?);
        }
    }
    let generator = Generator {
        seed_fc: dense_nb(draw, a.latent_dim, flat, a.gen_image_bias)?,
        deconvs,
        bns: gbns,
        out_conv: ConvLayer {
            w: draw(head, &[shape.channels, head, 1, 1])?,
            b: if a.gen_image_bias {
                Some(zero_bias(shape.channels)?)
            } else {
                None
            },
        },
        scalar_fc1: dense(draw, a.latent_dim, a.scalar_width)?,
        scalar_fc2: dense(draw, a.scalar_width, shape.n_scalars)?,
    };

    // Discriminator.
    let mut layers = Vec::new();
    let mut d_in = a.latent_dim;
    for &w in &a.disc_widths {
        layers.push(dense(draw, d_in, w)?);
        d_in = w;
    }
    layers.push(dense(draw, d_in, 1)?);
    let discriminator = Discriminator { layers };

    Ok(ModelParams {
        encoder,
        generator,
        discriminator,
    })
}

/// He-style fan-in scaled uniform initialization; zero biases, BN gamma=1
/// beta=0. Weight draws come from the init substream of `seed` in a fixed
/// traversal order.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    let mut stream = Stream::named(seed, Component::Init);
    build_params(cfg, &mut |fan_in, shape| {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| T::from_f64(stream.uniform_in(-bound, bound)))
            .collect();
        Tensor::param(data, shape)
    })
}

fn zero_params<T: Real>(cfg: &ModelConfig) -> Result<ModelParams<T>> {
    build_params(cfg, &mut |_, shape| {
        Tensor::param(vec![T::ZERO; shape.iter().product()], shape)
    })
}

impl<T: Real> ModelParams<T> {
    /// Stable (name, tensor) listing; checkpoint order and diff order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        fn push<T: Real>(out: &mut Vec<(String, Tensor<T>)>, name: String, t: &Tensor<T>) {
            out.push((name, t.clone()));
        }
        fn push_opt<T: Real>(
            out: &mut Vec<(String, Tensor<T>)>,
            name: String,
            t: &Option<Tensor<T>>,
        ) {
            if let Some(t) = t {
                out.push((name, t.clone()));
            }
        }
        let mut out: Vec<(String, Tensor<T>)> = Vec::new();

        for (i, (conv, bn)) in self.encoder.convs.iter().zip(&self.encoder.bns).enumerate() {
            push(&mut out, format!("encoder.conv{i}.weight"), &conv.w);
            push_opt(&mut out, format!("encoder.conv{i}.bias"), &conv.b);
            push(&mut out, format!("encoder.bn{i}.gamma"), &bn.gamma);
            push(&mut out, format!("encoder.bn{i}.beta"), &bn.beta);
            push(&mut out, format!("encoder.bn{i}.running_mean"), &bn.running_mean);
            push(&mut out, format!("encoder.bn{i}.running_var"), &bn.running_var);
        }
        for (name, d) in [
            ("scalar_fc", &self.encoder.scalar_fc),
            ("fusion_fc", &self.encoder.fusion_fc),
            ("latent_fc", &self.encoder.latent_fc),
        ] {
            push(&mut out, format!("encoder.{name}.weight"), &d.w);
            push_opt(&mut out, format!("encoder.{name}.bias"), &d.b);
        }

        push(&mut out, "generator.seed_fc.weight".into(), &self.generator.seed_fc.w);
        push_opt(&mut out, "generator.seed_fc.bias".into(), &self.generator.seed_fc.b);
        for (i, deconv) in self.generator.deconvs.iter().enumerate() {
            push(&mut out, format!("generator.deconv{i}.weight"), &deconv.w);
            push_opt(&mut out, format!("generator.deconv{i}.bias"), &deconv.b);
            if let Some(bn) = self.generator.bns.get(i) {
                push(&mut out, format!("generator.bn{i}.gamma"), &bn.gamma);
                push(&mut out, format!("generator.bn{i}.beta"), &bn.beta);
                push(&mut out, format!("generator.bn{i}.running_mean"), &bn.running_mean);
                push(&mut out, format!("generator.bn{i}.running_var"), &bn.running_var);
            }
        }
        push(&mut out, "generator.out_conv.weight".into(), &self.generator.out_conv.w);
        push_opt(&mut out, "generator.out_conv.bias".into(), &self.generator.out_conv.b);
        for (name, d) in [
            ("scalar_fc1", &self.generator.scalar_fc1),
            ("scalar_fc2", &self.generator.scalar_fc2),
        ] {
            push(&mut out, format!("generator.{name}.weight"), &d.w);
            push_opt(&mut out, format!("generator.{name}.bias"), &d.b);
        }

        for (i, d) in self.discriminator.layers.iter().enumerate() {
            push(&mut out, format!("discriminator.fc{i}.weight"), &d.w);
            push_opt(&mut out, format!("discriminator.fc{i}.bias"), &d.b);
        }
        out
    }

    /// Trainable autoencoder-side parameters (encoder + generator, without
    /// batch-norm running statistics).
    pub fn ae_params(&self) -> Vec<Tensor<T>> {
        self.named_tensors()
            .into_iter()
            .filter(|(n, _)| {
                !n.starts_with("discriminator") && !n.contains("running_")
            })
            .map(|(_, t)| t)
            .collect()
    }

    pub fn disc_params(&self) -> Vec<Tensor<T>> {
        self.named_tensors()
            .into_iter()
            .filter(|(n, _)| n.starts_with("discriminator"))
            .map(|(_, t)| t)
            .collect()
    }
}

// ── forward passes ───────────────────────────────────────────────────

fn check_batch<T: Real>(
    cfg: &ModelConfig,
    images: &Tensor<T>,
    scalars: &Tensor<T>,
) -> Result<()> {
    let s = cfg.data_shape;
    let want = [usize::MAX, s.channels, s.height, s.width];
    if images.ndim() != 4
        || images.shape()[1..] != want[1..]
        || scalars.ndim() != 2
        || scalars.shape()[1] != s.n_scalars
        || scalars.shape()[0] != images.shape()[0]
    {
        return Err(Error::ShapeMismatch {
            op: "encode",
            lhs: format!("images {:?} scalars {:?}", images.shape(), scalars.shape()),
            rhs: format!("expected (B,{},{},{}) and (B,{})", s.channels, s.height, s.width, s.n_scalars),
        });
    }
    Ok(())
}

/// Encoder E: (images, scalars) -> pre-projection latent z of shape (B, d).
pub fn encode<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    images: &Tensor<T>,
    scalars: &Tensor<T>,
    mode: BnMode,
) -> Result<Tensor<T>> {
    check_batch(cfg, images, scalars)?;
    let enc = &params.encoder;
    let mut h = images.clone();
    for (conv, bn) in enc.convs.iter().zip(&enc.bns) {
        h = h.conv2d(&conv.w, conv.b.as_ref(), 2, 1)?;
        h = bn.forward(&h, mode)?.relu()?;
    }
    let h = h.flatten()?;
    let s = enc.scalar_fc.forward(scalars)?.relu()?;
    let fused = Tensor::concat(&[&h, &s])?;
    let fused = enc.fusion_fc.forward(&fused)?.relu()?;
    // No activation: z stays in Euclidean space for Gaussian matching.
    enc.latent_fc.forward(&fused)
}

/// Projection P: z -> z / ||z||, rows on the unit sphere.
pub fn project_to_sphere<T: Real>(z: &Tensor<T>) -> Result<Tensor<T>> {
    z.normalize_rows(T::from_f64(NORM_FLOOR))
}

/// Generator G: latent (unit sphere during training; any finite vector at
/// test time, e.g. radius-scaled) -> (images in [0,1], scalars).
pub fn generate<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    z: &Tensor<T>,
    mode: BnMode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if z.ndim() != 2 || z.shape()[1] != cfg.arch.latent_dim {
        return Err(Error::ShapeMismatch {
            op: "generate",
            lhs: format!("{:?}", z.shape()),
            rhs: format!("expected (B,{})", cfg.arch.latent_dim),
        });
    }
    let gen = &params.generator;
    let (sh, sw) = cfg.seed_spatial();
    let c_last = *cfg.arch.conv_channels.last().unwrap();
    let b = z.shape()[0];

    let mut h = gen
        .seed_fc
        .forward(z)?
        .reshape(&[b, c_last, sh, sw])?;
    for (i, deconv) in gen.deconvs.iter().enumerate() {
        h = h.conv_transpose2d(&deconv.w, deconv.b.as_ref(), 2, 0)?;
        if let Some(bn) = gen.bns.get(i) {
            h = bn.forward(&h, mode)?;
        }
        h = h.relu()?;
    }
    let images = h
        .conv2d(&gen.out_conv.w, gen.out_conv.b.as_ref(), 1, 0)?
        .sigmoid()?;
    let scalars = gen.scalar_fc2.forward(&gen.scalar_fc1.forward(z)?.relu()?)?;
    Ok((images, scalars))
}

/// Discriminator on pre-projection latents / prior draws: (B, d) -> (B, 1)
/// probabilities. Rejects sphere-projected input; it must never see z~.
pub fn discriminate<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    z: &Tensor<T>,
) -> Result<Tensor<T>> {
    if z.is_sphere_projected() {
        return Err(Error::InvalidInput(
            "discriminator received a sphere-projected latent".into(),
        ));
    }
    if z.ndim() != 2 || z.shape()[1] != cfg.arch.latent_dim {
        return Err(Error::ShapeMismatch {
            op: "discriminate",
            lhs: format!("{:?}", z.shape()),
            rhs: format!("expected (B,{})", cfg.arch.latent_dim),
        });
    }
    let slope = T::from_f64(cfg.arch.leaky_relu_slope);
    let layers = &params.discriminator.layers;
    let mut h = z.clone();
    for layer in &layers[..layers.len() - 1] {
        h = layer.forward(&h)?.leaky_relu(slope)?;
    }
    layers[layers.len() - 1].forward(&h)?.sigmoid()
}

/// Pack sample records into (images, scalars) batch tensors.
pub fn batch_from_records<T: Real>(
    shape: DataShape,
    records: &[&SampleRecord],
) -> Result<(Tensor<T>, Tensor<T>)> {
    if records.is_empty() {
        return Err(Error::Empty("batch_from_records"));
    }
    let b = records.len();
    let mut images = Vec::with_capacity(b * shape.image_len());
    let mut scalars = Vec::with_capacity(b * shape.n_scalars);
    for rec in records {
        images.extend(rec.image.iter().map(|&v| T::from_f64(v as f64)));
        scalars.extend(rec.scalars.iter().map(|&v| T::from_f64(v as f64)));
    }
    Ok((
        Tensor::from_vec(images, &[b, shape.channels, shape.height, shape.width])?,
        Tensor::from_vec(scalars, &[b, shape.n_scalars])?,
    ))
}

// ── checkpointing ────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    scientific_line: Option<ScientificLine>,
}

/// A trained (or freshly initialized) model with its training-set
/// statistics: the scalar standardizer and the fitted scientific line.
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams<f32>,
    pub standardizer: Option<Standardizer>,
    pub line: Option<ScientificLine>,
}

/// Blob layout: magic "SWAE", version u32, length-prefixed JSON meta
/// (config + optional line), u32 tensor count, then per tensor:
/// length-prefixed name, u32 rank, u32 dims, little-endian f32 payload.
/// The standardizer rides along as two extra named tensors.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let w32 = |out: &mut BufWriter<File>, v: u32| out.write_all(&v.to_le_bytes()).map_err(io_err(path));

    out.write_all(&CKPT_MAGIC).map_err(io_err(path))?;
    w32(&mut out, CKPT_VERSION)?;
    let meta = serde_json::to_vec(&CheckpointMeta {
        model: ckpt.config.clone(),
        scientific_line: ckpt.line.clone(),
    })
    .map_err(|e| Error::Config(format!("serialize checkpoint meta: {e}")))?;
    w32(&mut out, meta.len() as u32)?;
    out.write_all(&meta).map_err(io_err(path))?;

    let mut tensors = ckpt.params.named_tensors();
    let std_tensors: Vec<(String, Tensor<f32>)> = match &ckpt.standardizer {
        Some(s) => vec![
            (
                "standardizer.mean".into(),
                Tensor::from_vec(s.mean.clone(), &[s.mean.len()])?,
            ),
            (
                "standardizer.std".into(),
                Tensor::from_vec(s.std.clone(), &[s.std.len()])?,
            ),
        ],
        None => vec![],
    };
    tensors.extend(std_tensors);

    w32(&mut out, tensors.len() as u32)?;
    for (name, t) in &tensors {
        w32(&mut out, name.len() as u32)?;
        out.write_all(name.as_bytes()).map_err(io_err(path))?;
        w32(&mut out, t.ndim() as u32)?;
        for &d in t.shape() {
            w32(&mut out, d as u32)?;
        }
        for &v in t.data().iter() {
            out.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
        }
    }
    out.flush().map_err(io_err(path))
}

struct BlobReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> BlobReader<R> {
    fn take(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| Error::Format {
            offset: self.offset,
            msg: format!("truncated checkpoint while reading {what}"),
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BlobReader {
        inner: BufReader::new(file),
        offset: 0,
    };

    let magic = r.take(4, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let meta_len = r.u32("meta length")? as usize;
    let meta_bytes = r.take(meta_len, "meta")?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::Config(format!("checkpoint meta: {e}")))?;

    let n_tensors = r.u32("tensor count")? as usize;
    let mut stored: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?).map_err(|_| Error::Format {
            offset: r.offset,
            msg: "tensor name is not UTF-8".into(),
        })?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 4, "payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        stored.push((name, shape, data));
    }

    // Rebuild the parameter structure from the stored config, then fill
    // each tensor by name.
    let params = zero_params::<f32>(&meta.model)?;
    let mut lookup: std::collections::HashMap<String, (Vec<usize>, Vec<f32>)> = stored
        .into_iter()
        .map(|(n, s, d)| (n, (s, d)))
        .collect();
    for (name, t) in params.named_tensors() {
        let Some((shape, data)) = lookup.remove(&name) else {
            return Err(Error::ArchMismatch {
                name,
                detail: "missing from checkpoint".into(),
            });
        };
        if shape != t.shape() {
            return Err(Error::ArchMismatch {
                name,
                detail: format!("checkpoint {:?} vs config {:?}", shape, t.shape()),
            });
        }
        t.set_data(&data)?;
    }

    let standardizer = match (
        lookup.remove("standardizer.mean"),
        lookup.remove("standardizer.std"),
    ) {
        (Some((_, mean)), Some((_, std))) => Some(Standardizer { mean, std }),
        _ => None,
    };

    Ok(Checkpoint {
        config: meta.model,
        params,
        standardizer,
        line: meta.scientific_line,
    })
}

impl Checkpoint {
    /// Verify this checkpoint matches an expected configuration, reporting
    /// the first differing tensor by name.
    pub fn check_compat(&self, expected: &ModelConfig) -> Result<()> {
        let want = zero_params::<f32>(expected)?.named_tensors();
        let have = self.params.named_tensors();
        for ((wn, wt), (hn, ht)) in want.iter().zip(have.iter()) {
            if wn != hn || wt.shape() != ht.shape() {
                return Err(Error::ArchMismatch {
                    name: wn.clone(),
                    detail: format!(
                        "expected {:?}, checkpoint has {} {:?}",
                        wt.shape(),
                        hn,
                        ht.shape()
                    ),
                });
            }
        }
        if want.len() != have.len() {
            return Err(Error::ArchMismatch {
                name: "(tensor count)".into(),
                detail: format!("{} vs {}", want.len(), have.len()),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
#[path = "model_tests.rs"]
mod tests;
