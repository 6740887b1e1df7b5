//! Command-line driver for the full experiment lifecycle: data generation,
//! training, evaluation, sampling, interpolation, radius ablation, and
//! local neighbourhood sampling.
//!
//! Every run resolves its configuration (file, then flag overrides, then
//! defaults), derives all randomness from the single root seed, and writes
//! the resolved config next to its outputs. Failures exit with
//! `code: message` on stderr; codes are 2 (config), 3 (IO/format),
//! 4 (shape/arch mismatch), 5 (numerical).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use swae::config::RunConfig;
use swae::data::{generate_dataset, read_dataset, split_dataset, write_dataset, Dataset};
use swae::error::{Error, Result};
use swae::evaluation as eval;
use swae::evaluation::ScientificLine;
use swae::model::{load_checkpoint, save_checkpoint, Checkpoint};
use swae::training::{train, Standardizer};

#[derive(Parser)]
#[command(
    name = "swae",
    about = "Sphere-projected Wasserstein autoencoder for multimodal fusion diagnostics",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (JSON). Defaults apply for missing fields or when
    /// the flag is omitted entirely.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArg {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it as a .jags file.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        /// Output .jags path.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured sample count.
        #[arg(long)]
        n_samples: Option<usize>,
    },
    /// Train a model on a dataset; writes checkpoint.swae, trainlog.csv and
    /// resolved-config.json into the output directory.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Input .jags dataset.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Reconstruction metrics, scientific line, and image grids on the test
    /// split.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample from the prior through the generator; writes samples.jags and
    /// residuals.csv scored against the checkpoint's scientific line.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear latent interpolation between two dataset samples; writes
    /// interp_path.csv and per-channel PGM strips.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index_a: usize,
        #[arg(long)]
        index_b: usize,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validity counts across hypersphere radii; writes validity_curve.csv.
    AblateRadius {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated radius list.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.25, 0.5, 1.0, 2.0, 4.0])]
        radii: Vec<f64>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample around encoded training points; writes local_sampling.csv.
    LocalSample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated dataset indices used as centers.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0, 1, 2, 3, 4])]
        centers: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        n_per_center: usize,
        #[arg(long, default_value_t = 1.0)]
        variance: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli.command) {
        eprintln!("{}: {err}", err.exit_code());
        std::process::exit(err.exit_code());
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Load a checkpoint and require the pieces inference needs.
fn load_inference_checkpoint(path: &Path) -> Result<(Checkpoint, Standardizer, ScientificLine)> {
    let ckpt = load_checkpoint(path)?;
    let std = ckpt
        .standardizer
        .clone()
        .ok_or_else(|| Error::Config(format!("{}: checkpoint has no standardizer", path.display())))?;
    let line = ckpt
        .line
        .clone()
        .ok_or_else(|| Error::Config(format!("{}: checkpoint has no scientific line", path.display())))?;
    Ok((ckpt, std, line))
}

fn check_data_compat(ckpt: &Checkpoint, data: &Dataset) -> Result<()> {
    if ckpt.config.data_shape != data.shape {
        return Err(Error::ArchMismatch {
            name: "(data shape)".into(),
            detail: format!(
                "checkpoint {:?} vs dataset {:?}",
                ckpt.config.data_shape, data.shape
            ),
        });
    }
    Ok(())
}

fn thresholds_from_line(line: &ScientificLine, sigmas: &[f64]) -> Vec<f64> {
    sigmas.iter().map(|s| s * line.train_residual_std).collect()
}

fn fit_train_line(cfg: &RunConfig, data: &Dataset) -> Result<(Dataset, Dataset, ScientificLine)> {
    let (train_set, test_set) = split_dataset(data, cfg.data.train_fraction, cfg.seed)?;
    let pts: Vec<(f64, f64)> = train_set
        .records
        .iter()
        .map(|r| (r.scalars[0] as f64, eval::image_temperature(&r.image)))
        .collect();
    let line = eval::fit_scientific_line(&pts)?;
    Ok((train_set, test_set, line))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            config,
            out,
            n_samples,
        } => {
            let cfg = config.resolve()?;
            let mut synth = cfg.synthetic();
            if let Some(n) = n_samples {
                synth.n_samples = n;
            }
            let dataset = generate_dataset(&synth)?;
            write_dataset(&out, &dataset)?;
            println!(
                "wrote {} samples ({}x{}x{} + {} scalars) to {}",
                dataset.len(),
                synth.channels,
                synth.height,
                synth.width,
                synth.n_scalars,
                out.display()
            );
            Ok(())
        }

        Command::Train {
            config,
            data,
            out,
            epochs,
        } => {
            let mut cfg = config.resolve()?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let dataset = read_dataset(&data)?;
            ensure_dir(&out)?;
            let (train_set, _, line) = fit_train_line(&cfg, &dataset)?;
            let model_cfg = cfg.model_config(dataset.shape);
            let (params, log, standardizer) =
                train(&train_set, &model_cfg, &cfg.train, cfg.seed)?;
            log.write_csv(&out.join("trainlog.csv"))?;
            cfg.write_resolved(&out.join("resolved-config.json"))?;
            save_checkpoint(
                &out.join("checkpoint.swae"),
                &Checkpoint {
                    config: model_cfg,
                    params,
                    standardizer: Some(standardizer),
                    line: Some(line),
                },
            )?;
            println!(
                "trained {} epochs on {} samples; artifacts in {}",
                cfg.train.epochs,
                train_set.len(),
                out.display()
            );
            Ok(())
        }

        Command::Eval {
            config,
            checkpoint,
            data,
            out,
        } => {
            let cfg = config.resolve()?;
            let dataset = read_dataset(&data)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            check_data_compat(&ckpt, &dataset)?;
            ckpt.check_compat(&cfg.model_config(dataset.shape))?;
            let std = ckpt.standardizer.clone().ok_or_else(|| {
                Error::Config("checkpoint has no standardizer; cannot evaluate".into())
            })?;
            ensure_dir(&out)?;

            let (_, test_set, fresh_line) = fit_train_line(&cfg, &dataset)?;
            let line = ckpt.line.clone().unwrap_or(fresh_line);
            let metrics = eval::recon_metrics(&ckpt.params, &ckpt.config, &std, &test_set)?;
            eval::write_recon_metrics_json(&out.join("recon_metrics.json"), &metrics)?;
            std::fs::write(
                out.join("scientific-line.json"),
                serde_json::to_string_pretty(&line)
                    .map_err(|e| Error::Config(format!("serialize line: {e}")))?,
            )
            .map_err(|e| Error::Io {
                path: out.join("scientific-line.json"),
                source: e,
            })?;
            cfg.write_resolved(&out.join("resolved-config.json"))?;

            // Original vs reconstruction grids on the first test samples.
            let k = cfg.eval.grid_samples.min(test_set.len());
            let head = Dataset {
                shape: test_set.shape,
                records: test_set.records[..k].to_vec(),
            };
            let recons = eval::reconstruct(&ckpt.params, &ckpt.config, &std, &head)?;
            let rows: Vec<Vec<&[f32]>> = vec![
                head.records.iter().map(|r| r.image.as_slice()).collect(),
                recons.iter().map(|r| r.image.as_slice()).collect(),
            ];
            eval::write_channel_grids(&out, test_set.shape, &rows)?;

            println!(
                "test image MSE {:.6}; mean R2 {}; artifacts in {}",
                metrics.image_mse,
                metrics
                    .r2_mean
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "undefined".into()),
                out.display()
            );
            Ok(())
        }

        Command::Sample {
            checkpoint,
            n,
            radius,
            seed,
            out,
        } => {
            let (ckpt, std, line) = load_inference_checkpoint(&checkpoint)?;
            ensure_dir(&out)?;
            let samples = eval::generate_samples(&ckpt.params, &ckpt.config, &std, n, radius, seed)?;
            write_dataset(&out.join("samples.jags"), &samples)?;
            let residuals = eval::residuals_of(&line, &samples);
            let mut csv = String::from("index,residual,image_temp,t_ion\n");
            for (i, (rec, res)) in samples.records.iter().zip(residuals.iter()).enumerate() {
                csv.push_str(&format!(
                    "{i},{res},{},{}\n",
                    eval::image_temperature(&rec.image),
                    rec.scalars[0]
                ));
            }
            std::fs::write(out.join("residuals.csv"), csv).map_err(|e| Error::Io {
                path: out.join("residuals.csv"),
                source: e,
            })?;
            println!(
                "generated {n} samples at radius {radius}; artifacts in {}",
                out.display()
            );
            Ok(())
        }

        Command::Interpolate {
            checkpoint,
            data,
            index_a,
            index_b,
            steps,
            out,
        } => {
            let (ckpt, std, line) = load_inference_checkpoint(&checkpoint)?;
            let dataset = read_dataset(&data)?;
            check_data_compat(&ckpt, &dataset)?;
            for (what, idx) in [("--index-a", index_a), ("--index-b", index_b)] {
                if idx >= dataset.len() {
                    return Err(Error::InvalidInput(format!(
                        "{what} {idx} out of range (dataset has {} samples)",
                        dataset.len()
                    )));
                }
            }
            ensure_dir(&out)?;
            let points = eval::interpolate_latent(
                &ckpt.params,
                &ckpt.config,
                &std,
                &line,
                &dataset.records[index_a],
                &dataset.records[index_b],
                steps,
            )?;
            eval::write_interp_csv(&out.join("interp_path.csv"), &points)?;
            let strip: Vec<Vec<&[f32]>> =
                vec![points.iter().map(|p| p.image.as_slice()).collect()];
            eval::write_channel_grids(&out, dataset.shape, &strip)?;
            println!(
                "interpolated {} steps between #{index_a} and #{index_b}; artifacts in {}",
                steps,
                out.display()
            );
            Ok(())
        }

        Command::AblateRadius {
            checkpoint,
            data,
            radii,
            n,
            seed,
            out,
        } => {
            let cfg = RunConfig::default();
            let (ckpt, std, line) = load_inference_checkpoint(&checkpoint)?;
            let dataset = read_dataset(&data)?;
            check_data_compat(&ckpt, &dataset)?;
            ensure_dir(&out)?;
            let thresholds = thresholds_from_line(&line, &cfg.eval.thresholds_sigma);
            let mut rows = Vec::new();
            for &radius in &radii {
                rows.extend(eval::generate_and_score(
                    &ckpt.params,
                    &ckpt.config,
                    &std,
                    &line,
                    n,
                    radius,
                    &thresholds,
                    seed,
                )?);
            }
            eval::write_validity_csv(&out.join("validity_curve.csv"), &rows)?;
            println!(
                "scored {} radii x {} thresholds on {n} samples each; artifacts in {}",
                radii.len(),
                thresholds.len(),
                out.display()
            );
            Ok(())
        }

        Command::LocalSample {
            checkpoint,
            data,
            centers,
            n_per_center,
            variance,
            seed,
            out,
        } => {
            let (ckpt, std, line) = load_inference_checkpoint(&checkpoint)?;
            let dataset = read_dataset(&data)?;
            check_data_compat(&ckpt, &dataset)?;
            for &idx in &centers {
                if idx >= dataset.len() {
                    return Err(Error::InvalidInput(format!(
                        "--centers index {idx} out of range (dataset has {} samples)",
                        dataset.len()
                    )));
                }
            }
            ensure_dir(&out)?;
            let center_recs: Vec<&swae::data::SampleRecord> =
                centers.iter().map(|&i| &dataset.records[i]).collect();
            let spreads = eval::local_sample(
                &ckpt.params,
                &ckpt.config,
                &std,
                &line,
                &center_recs,
                n_per_center,
                variance,
                seed,
            )?;
            eval::write_local_csv(&out.join("local_sampling.csv"), &spreads)?;
            println!(
                "sampled {n_per_center} around {} centers; artifacts in {}",
                centers.len(),
                out.display()
            );
            Ok(())
        }
    }
}
