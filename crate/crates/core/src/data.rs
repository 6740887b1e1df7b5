//! Synthetic multimodal surrogate dataset.
//!
//! Each sample is a C-channel image volume plus S scalar diagnostics,
//! produced from five hidden parameters (blob amplitude, center, width,
//! tail angle). `scalars[0]` is the ion-temperature scalar and carries the
//! embedded scientific prior: a linear function of the image temperature
//! (mean brightness over all pixels and channels) plus Gaussian noise.
//! The remaining scalars are smooth deterministic functions of the hidden
//! parameters.
//!
//! Datasets persist as `.jags` files: a 32-byte header (magic "JAGS",
//! version, counts, 4 reserved bytes) followed by little-endian f32
//! payloads, images then scalars per record.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::rng::{Component, Stream};

pub const JAGS_MAGIC: [u8; 4] = *b"JAGS";
pub const JAGS_VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 32;

/// Per-channel brightness weights; cycled when there are more channels.
pub const CHANNEL_WEIGHTS: [f64; 4] = [1.0, 0.8, 0.6, 0.4];

/// One multimodal data point. Image is row-major (C, H, W) in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub image: Vec<f32>,
    pub scalars: Vec<f32>,
}

/// Shape shared by every record of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_scalars: usize,
}

impl DataShape {
    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub shape: DataShape,
    pub records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Generator settings for the synthetic surrogate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_scalars: usize,
    /// Slope of the embedded `t_ion = a * image_temperature + b` relation.
    pub constraint_slope: f64,
    pub constraint_intercept: f64,
    /// Standard deviation of the additive noise on `scalars[0]`.
    pub constraint_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_samples: 2000,
            height: 16,
            width: 16,
            channels: 4,
            n_scalars: 15,
            constraint_slope: 1.0,
            constraint_intercept: 0.0,
            constraint_noise: 0.01,
            seed: 42,
        }
    }
}

impl SyntheticConfig {
    pub fn shape(&self) -> DataShape {
        DataShape {
            channels: self.channels,
            height: self.height,
            width: self.width,
            n_scalars: self.n_scalars,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0
            || self.height == 0
            || self.width == 0
            || self.channels == 0
            || self.n_scalars == 0
        {
            return Err(Error::Config(
                "synthetic config: all counts must be >= 1".into(),
            ));
        }
        if self.constraint_noise < 0.0 {
            return Err(Error::Config(
                "synthetic config: constraint_noise must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Hidden physical parameters behind one sample.
struct Hidden {
    amplitude: f64,
    cx: f64,
    cy: f64,
    sigma: f64,
    theta: f64,
}

impl Hidden {
    fn draw(stream: &mut Stream) -> Hidden {
        Hidden {
            amplitude: stream.uniform_in(0.2, 1.0),
            cx: stream.uniform_in(0.3, 0.7),
            cy: stream.uniform_in(0.3, 0.7),
            sigma: stream.uniform_in(0.08, 0.2),
            theta: stream.uniform_in(0.0, std::f64::consts::TAU),
        }
    }

    /// Smooth deterministic functions filling `scalars[1..]`, cycled.
    fn derived_scalars(&self, n: usize) -> Vec<f32> {
        let Hidden {
            amplitude: a,
            cx,
            cy,
            sigma: s,
            theta,
        } = *self;
        let base = [
            a,
            cx,
            cy,
            s,
            theta.sin(),
            theta.cos(),
            a * s,
            a * a,
            cx * cy,
            s * s,
            a * theta.sin(),
            a * theta.cos(),
            cx * cx,
            cy * cy,
        ];
        (0..n).map(|i| base[i % base.len()] as f32).collect()
    }
}

/// Render the shared (blob + oriented tail) intensity plane before
/// amplitude and channel weighting.
fn render_plane(h: usize, w: usize, hid: &Hidden) -> Vec<f64> {
    let (sin_t, cos_t) = hid.theta.sin_cos();
    // Tail lobe: elongated Gaussian offset from the blob center along theta.
    let tx = hid.cx + 1.8 * hid.sigma * cos_t;
    let ty = hid.cy + 1.8 * hid.sigma * sin_t;
    let su = 2.0 * hid.sigma;
    let sv = 0.6 * hid.sigma;
    let mut plane = vec![0.0f64; h * w];
    for r in 0..h {
        let y = (r as f64 + 0.5) / h as f64;
        for c in 0..w {
            let x = (c as f64 + 0.5) / w as f64;
            let dx = x - hid.cx;
            let dy = y - hid.cy;
            let blob = (-(dx * dx + dy * dy) / (2.0 * hid.sigma * hid.sigma)).exp();
            let u = (x - tx) * cos_t + (y - ty) * sin_t;
            let v = -(x - tx) * sin_t + (y - ty) * cos_t;
            let tail = (-(u * u / (2.0 * su * su) + v * v / (2.0 * sv * sv))).exp();
            plane[r * w + c] = blob + 0.3 * tail;
        }
    }
    plane
}

fn render_sample(cfg: &SyntheticConfig, hid: &Hidden, noise: f64) -> SampleRecord {
    let (h, w) = (cfg.height, cfg.width);
    let plane = render_plane(h, w, hid);
    let mut image = Vec::with_capacity(cfg.channels * h * w);
    for ch in 0..cfg.channels {
        let gain = hid.amplitude * CHANNEL_WEIGHTS[ch % CHANNEL_WEIGHTS.len()];
        for &p in plane.iter() {
            image.push((gain * p).clamp(0.0, 1.0) as f32);
        }
    }
    // Image temperature = mean brightness; summed in f64 over the stored
    // f32 values so it matches the evaluation-side definition bit for bit.
    let temp = image.iter().map(|&v| v as f64).sum::<f64>() / image.len() as f64;
    let t_ion = cfg.constraint_slope * temp + cfg.constraint_intercept + noise;

    let mut scalars = Vec::with_capacity(cfg.n_scalars);
    scalars.push(t_ion as f32);
    scalars.extend(hid.derived_scalars(cfg.n_scalars - 1));
    SampleRecord { image, scalars }
}

/// Generate the synthetic dataset. Each sample draws from its own
/// (seed, sample index) substream, so output is independent of ordering.
pub fn generate_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let records = (0..cfg.n_samples)
        .map(|i| {
            let mut stream = Stream::new(cfg.seed, Component::Data, i as u64);
            let hid = Hidden::draw(&mut stream);
            let noise = if cfg.constraint_noise > 0.0 {
                cfg.constraint_noise * stream.normal()
            } else {
                0.0
            };
            render_sample(cfg, &hid, noise)
        })
        .collect();
    Ok(Dataset {
        shape: cfg.shape(),
        records,
    })
}

// ── .jags binary format ──────────────────────────────────────────────

fn format_err(offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Empty("write_dataset"));
    }
    let shape = dataset.shape;
    for rec in &dataset.records {
        if rec.image.len() != shape.image_len() || rec.scalars.len() != shape.n_scalars {
            return Err(Error::ShapeMismatch {
                op: "write_dataset",
                lhs: format!("{shape:?}"),
                rhs: format!(
                    "record image {} scalars {}",
                    rec.image.len(),
                    rec.scalars.len()
                ),
            });
        }
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let header: Vec<u32> = vec![
        JAGS_VERSION,
        dataset.len() as u32,
        shape.height as u32,
        shape.width as u32,
        shape.channels as u32,
        shape.n_scalars as u32,
        0, // reserved, pads the header to 32 bytes
    ];
    out.write_all(&JAGS_MAGIC).map_err(io_err(path))?;
    for v in header {
        out.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
    }
    for rec in &dataset.records {
        for &v in rec.image.iter().chain(rec.scalars.iter()) {
            out.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
        }
    }
    out.flush().map_err(io_err(path))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let mut header = [0u8; HEADER_LEN as usize];
    reader
        .read_exact(&mut header)
        .map_err(|_| format_err(0, "truncated header"))?;
    if header[0..4] != JAGS_MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != JAGS_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let n_samples = u32_at(8) as usize;
    let shape = DataShape {
        height: u32_at(12) as usize,
        width: u32_at(16) as usize,
        channels: u32_at(20) as usize,
        n_scalars: u32_at(24) as usize,
    };
    let rec_len = shape.image_len() + shape.n_scalars;
    if n_samples == 0 || rec_len == 0 {
        return Err(format_err(8, "empty dataset"));
    }

    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(io_err(path))?;
    let expect = n_samples * rec_len * 4;
    if payload.len() != expect {
        return Err(format_err(
            HEADER_LEN + payload.len().min(expect) as u64,
            format!("payload length {} != expected {expect}", payload.len()),
        ));
    }

    let mut records = Vec::with_capacity(n_samples);
    let mut floats = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()));
    for _ in 0..n_samples {
        let image: Vec<f32> = floats.by_ref().take(shape.image_len()).collect();
        let scalars: Vec<f32> = floats.by_ref().take(shape.n_scalars).collect();
        records.push(SampleRecord { image, scalars });
    }
    Ok(Dataset { shape, records })
}

/// Deterministic seeded shuffle, then split at `floor(n * train_fraction)`.
pub fn split_dataset(
    dataset: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if dataset.is_empty() {
        return Err(Error::Empty("split_dataset"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    Stream::named(seed, Component::Split).shuffle(&mut order);
    let n_train = (n as f64 * train_fraction).floor() as usize;
    let take = |idx: &[usize]| Dataset {
        shape: dataset.shape,
        records: idx.iter().map(|&i| dataset.records[i].clone()).collect(),
    };
    Ok((take(&order[..n_train]), take(&order[n_train..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            n_samples: 50,
            height: 8,
            width: 8,
            channels: 2,
            n_scalars: 5,
            seed: 9,
            ..Default::default()
        }
    }

    fn mean_of(image: &[f32]) -> f64 {
        image.iter().map(|&v| v as f64).sum::<f64>() / image.len() as f64
    }

    #[test]
    fn noise_free_constraint_is_exact() {
        let cfg = SyntheticConfig {
            constraint_noise: 0.0,
            ..small_cfg()
        };
        let ds = generate_dataset(&cfg).unwrap();
        for rec in &ds.records {
            assert_eq!(rec.scalars[0], mean_of(&rec.image) as f32);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a.records, b.records);
    }

    #[test]
    fn image_values_stay_in_unit_range() {
        let ds = generate_dataset(&small_cfg()).unwrap();
        for rec in &ds.records {
            assert!(rec.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(rec.scalars.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn ols_recovers_embedded_slope() {
        // Independent OLS straight from the formula.
        let cfg = SyntheticConfig {
            n_samples: 2000,
            ..SyntheticConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let pts: Vec<(f64, f64)> = ds
            .records
            .iter()
            .map(|r| (mean_of(&r.image), r.scalars[0] as f64))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        let slope = sxy / sxx;
        assert!((slope - 1.0).abs() < 0.05, "slope {slope}");
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jags");
        let ds = generate_dataset(&small_cfg()).unwrap();
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.shape, ds.shape);
        for (a, b) in ds.records.iter().zip(back.records.iter()) {
            assert!(a
                .image
                .iter()
                .zip(b.image.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a
                .scalars
                .iter()
                .zip(b.scalars.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn file_size_matches_format_definition() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jags");
        let cfg = SyntheticConfig {
            n_samples: 100,
            ..SyntheticConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        write_dataset(&path, &ds).unwrap();
        let expect = 32 + 100 * (16 * 16 * 4 + 15) * 4;
        assert_eq!(std::fs::metadata(&path).unwrap().len(), expect as u64);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jags");
        std::fs::write(&path, b"XXXX0000000000000000000000000000").unwrap();
        match read_dataset(&path) {
            Err(Error::Format { offset: 0, msg }) => assert!(msg.contains("bad magic")),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jags");
        let ds = generate_dataset(&small_cfg()).unwrap();
        write_dataset(&path, &ds).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_seeded() {
        let ds = generate_dataset(&small_cfg()).unwrap();
        let (tr, te) = split_dataset(&ds, 0.8, 5).unwrap();
        assert_eq!(tr.len(), 40);
        assert_eq!(te.len(), 10);
        let (tr2, te2) = split_dataset(&ds, 0.8, 5).unwrap();
        assert_eq!(tr.records, tr2.records);
        assert_eq!(te.records, te2.records);

        // floor rule: 101 records at 0.5 -> 50 train
        let mut big = ds.clone();
        while big.len() < 101 {
            let r = big.records[big.len() % 50].clone();
            big.records.push(r);
        }
        big.records.truncate(101);
        let (tr3, te3) = split_dataset(&big, 0.5, 1).unwrap();
        assert_eq!((tr3.len(), te3.len()), (50, 51));
    }
}
