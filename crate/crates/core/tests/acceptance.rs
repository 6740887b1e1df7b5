//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line (run with `cargo test --test acceptance -- --nocapture` to see
//! them). Criteria 4-8 share three desk-scale models trained once in a
//! process-wide fixture.

use std::path::PathBuf;
use std::time::Instant;

use once_cell::sync::Lazy;

use swae::autodiff::{grad_check, no_grad, BnMode, Tensor};
use swae::data::{
    generate_dataset, read_dataset, split_dataset, write_dataset, Dataset, SyntheticConfig,
};
use swae::evaluation as eval;
use swae::evaluation::ScientificLine;
use swae::model::{
    discriminate, encode, generate, init_params, load_checkpoint, project_to_sphere,
    save_checkpoint, ArchConfig, Checkpoint, ModelConfig, ModelParams,
};
use swae::rng::{Component, Stream};
use swae::training::{sample_prior, train, Standardizer, TrainConfig, Trainer};

/// Desk-scale training epochs for the shared fixture (criterion cap: 200).
const FIXTURE_EPOCHS: usize = 150;
const FIXTURE_SEEDS: [u64; 3] = [1, 2, 3];

fn pass_line(criterion: u32, name: &str, pass: bool, details: &str) -> bool {
    println!(
        "[criterion {criterion:02}] {name}: {} ({details})",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

// ── shared trained fixture ───────────────────────────────────────────

struct SeedRun {
    seed: u64,
    checkpoint: PathBuf,
    image_mse: f64,
    r2_t_ion: f64,
    recon_slope: f64,
    valid_by_radius: Vec<(f64, usize)>,
}

struct Fixture {
    _dir: tempfile::TempDir,
    dataset_path: PathBuf,
    raw_oracle_slope: f64,
    runs: Vec<SeedRun>,
}

/// Train one desk-scale model and measure everything criteria 4-7 need.
/// Runs on its own thread; tensors never cross threads, only plain data
/// and checkpoint files do.
fn train_one(seed: u64, dir: PathBuf) -> SeedRun {
    let synth = SyntheticConfig::default(); // 2000 x (16x16x4 + 15), sigma_n 0.01
    let dataset = generate_dataset(&synth).unwrap();
    let (train_set, test_set) = split_dataset(&dataset, 0.9, synth.seed).unwrap();
    let model_cfg = ModelConfig {
        data_shape: dataset.shape,
        arch: ArchConfig::default(), // d = 16
    };
    let train_cfg = TrainConfig {
        epochs: FIXTURE_EPOCHS,
        // paper optimizer settings: Adam(0.5, 0.999), lr 1e-3
        ..TrainConfig::default()
    };
    let (params, _log, standardizer) = train(&train_set, &model_cfg, &train_cfg, seed).unwrap();

    let metrics = eval::recon_metrics(&params, &model_cfg, &standardizer, &test_set).unwrap();
    let line = fit_line_on(&train_set);

    let recons = eval::reconstruct(&params, &model_cfg, &standardizer, &train_set).unwrap();
    let recon_pts: Vec<(f64, f64)> = recons
        .iter()
        .map(|r| (r.scalars[0] as f64, eval::image_temperature(&r.image)))
        .collect();
    let recon_slope = eval::fit_scientific_line(&recon_pts).unwrap().slope;

    let sigma = line.train_residual_std;
    let valid_by_radius: Vec<(f64, usize)> = [0.25, 1.0, 4.0]
        .iter()
        .map(|&radius| {
            let rows = eval::generate_and_score(
                &params,
                &model_cfg,
                &standardizer,
                &line,
                1000,
                radius,
                &[sigma],
                seed,
            )
            .unwrap();
            (radius, rows[0].n_valid)
        })
        .collect();

    let checkpoint = dir.join(format!("seed{seed}.swae"));
    save_checkpoint(
        &checkpoint,
        &Checkpoint {
            config: model_cfg,
            params,
            standardizer: Some(standardizer),
            line: Some(line),
        },
    )
    .unwrap();

    SeedRun {
        seed,
        checkpoint,
        image_mse: metrics.image_mse,
        r2_t_ion: metrics.r2_per_scalar[0].unwrap(),
        recon_slope,
        valid_by_radius,
    }
}

fn fit_line_on(train_set: &Dataset) -> ScientificLine {
    let pts: Vec<(f64, f64)> = train_set
        .records
        .iter()
        .map(|r| (r.scalars[0] as f64, eval::image_temperature(&r.image)))
        .collect();
    eval::fit_scientific_line(&pts).unwrap()
}

static FIXTURE: Lazy<Fixture> = Lazy::new(|| {
    let dir = tempfile::tempdir().unwrap();
    let synth = SyntheticConfig::default();
    let dataset = generate_dataset(&synth).unwrap();
    let dataset_path = dir.path().join("desk.jags");
    write_dataset(&dataset_path, &dataset).unwrap();

    // Oracle: OLS straight on the raw synthetic training data.
    let (train_set, _) = split_dataset(&dataset, 0.9, synth.seed).unwrap();
    let raw_oracle_slope = fit_line_on(&train_set).slope;

    let runs: Vec<SeedRun> = std::thread::scope(|scope| {
        let handles: Vec<_> = FIXTURE_SEEDS
            .iter()
            .map(|&seed| {
                let dir = dir.path().to_path_buf();
                scope.spawn(move || train_one(seed, dir))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });

    Fixture {
        _dir: dir,
        dataset_path,
        raw_oracle_slope,
        runs,
    }
});

/// Reload a fixture checkpoint on the calling thread.
fn load_run(run: &SeedRun) -> (ModelParams<f32>, ModelConfig, Standardizer, ScientificLine) {
    let ckpt = load_checkpoint(&run.checkpoint).unwrap();
    (
        ckpt.params,
        ckpt.config,
        ckpt.standardizer.unwrap(),
        ckpt.line.unwrap(),
    )
}

// ── criterion 1: gradient correctness ────────────────────────────────

fn randn_tensor(stream: &mut Stream, shape: &[usize], tracked: bool) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| stream.normal()).collect();
    if tracked {
        Tensor::param(data, shape).unwrap()
    } else {
        Tensor::from_vec(data, shape).unwrap()
    }
}

/// Random values nudged off the relu/leaky hinge so the two-sided
/// difference stays on one branch.
fn randn_off_kink(stream: &mut Stream, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v = stream.normal();
            if v.abs() < 0.05 {
                v + 0.1f64.copysign(v)
            } else {
                v
            }
        })
        .collect();
    Tensor::param(data, shape).unwrap()
}

#[test]
fn criterion_01_gradient_correctness() {
    let started = Instant::now();
    const EPS: f64 = 1e-3;
    const TOL: f64 = 1e-4;
    const TOL_BN: f64 = 1e-3;
    const INSTANCES: u64 = 20;

    type Case = (&'static str, f64, fn(&mut Stream) -> (Tensor<f64>, Box<dyn Fn(&Tensor<f64>) -> swae::Result<Tensor<f64>>>));

    // Every op in the catalog, checked against central differences w.r.t.
    // a tracked input; constant cofactors give non-uniform output grads.
    let cases: Vec<Case> = vec![
        ("add", TOL, |s| {
            let b = randn_tensor(s, &[3, 4], false);
            let w = randn_tensor(s, &[3, 4], false);
            (randn_tensor(s, &[3, 4], true), Box::new(move |x| x.add(&b)?.mul(&w)?.sum()))
        }),
        ("add_broadcast_bias", TOL, |s| {
            let x = randn_tensor(s, &[4, 3], false);
            let w = randn_tensor(s, &[4, 3], false);
            (randn_tensor(s, &[3], true), Box::new(move |b| x.add(b)?.mul(&w)?.sum()))
        }),
        ("subtract", TOL, |s| {
            let b = randn_tensor(s, &[2, 5], false);
            let w = randn_tensor(s, &[2, 5], false);
            (randn_tensor(s, &[2, 5], true), Box::new(move |x| x.sub(&b)?.mul(&w)?.sum()))
        }),
        ("multiply", TOL, |s| {
            let b = randn_tensor(s, &[2, 6], false);
            (randn_tensor(s, &[2, 6], true), Box::new(move |x| x.mul(&b)?.sum()))
        }),
        ("multiply_broadcast", TOL, |s| {
            let x = randn_tensor(s, &[4, 5], false);
            (randn_tensor(s, &[5], true), Box::new(move |m| x.mul(m)?.sum()))
        }),
        ("scalar_multiply", TOL, |s| {
            (randn_tensor(s, &[7], true), Box::new(move |x| x.scalar_mul(1.7)?.sum()))
        }),
        ("matmul_lhs", TOL, |s| {
            let b = randn_tensor(s, &[4, 3], false);
            let w = randn_tensor(s, &[2, 3], false);
            (randn_tensor(s, &[2, 4], true), Box::new(move |a| a.matmul(&b)?.mul(&w)?.sum()))
        }),
        ("matmul_rhs", TOL, |s| {
            let a = randn_tensor(s, &[3, 4], false);
            let w = randn_tensor(s, &[3, 2], false);
            (randn_tensor(s, &[4, 2], true), Box::new(move |b| a.matmul(b)?.mul(&w)?.sum()))
        }),
        ("conv2d_input", TOL, |s| {
            let k = randn_tensor(s, &[2, 2, 3, 3], false);
            let b = randn_tensor(s, &[2], false);
            (
                randn_tensor(s, &[1, 2, 5, 5], true),
                Box::new(move |x| x.conv2d(&k, Some(&b), 2, 1)?.sum()),
            )
        }),
        ("conv2d_kernel", TOL, |s| {
            let x = randn_tensor(s, &[2, 2, 5, 5], false);
            (
                randn_tensor(s, &[3, 2, 3, 3], true),
                Box::new(move |k| x.conv2d(k, None, 1, 1)?.sum()),
            )
        }),
        ("conv2d_bias", TOL, |s| {
            let x = randn_tensor(s, &[2, 2, 4, 4], false);
            let k = randn_tensor(s, &[3, 2, 3, 3], false);
            let w = randn_tensor(s, &[2 * 3 * 4 * 4], false);
            (
                randn_tensor(s, &[3], true),
                Box::new(move |b| {
                    x.conv2d(&k, Some(b), 1, 1)?
                        .flatten()?
                        .reshape(&[2 * 3 * 4 * 4])?
                        .mul(&w)?
                        .sum()
                }),
            )
        }),
        ("conv_transpose2d_input", TOL, |s| {
            let k = randn_tensor(s, &[3, 2, 2, 2], false);
            (
                randn_tensor(s, &[1, 3, 4, 4], true),
                Box::new(move |x| x.conv_transpose2d(&k, None, 2, 0)?.sum()),
            )
        }),
        ("conv_transpose2d_kernel", TOL, |s| {
            let x = randn_tensor(s, &[2, 3, 3, 3], false);
            let b = randn_tensor(s, &[2], false);
            (
                randn_tensor(s, &[3, 2, 2, 2], true),
                Box::new(move |k| x.conv_transpose2d(k, Some(&b), 2, 0)?.sum()),
            )
        }),
        ("relu", TOL, |s| {
            let w = randn_tensor(s, &[12], false);
            (randn_off_kink(s, &[12]), Box::new(move |x| x.relu()?.mul(&w)?.sum()))
        }),
        ("leaky_relu", TOL, |s| {
            let w = randn_tensor(s, &[12], false);
            (
                randn_off_kink(s, &[12]),
                Box::new(move |x| x.leaky_relu(0.2)?.mul(&w)?.sum()),
            )
        }),
        ("sigmoid", TOL, |s| {
            let w = randn_tensor(s, &[10], false);
            (randn_tensor(s, &[10], true), Box::new(move |x| x.sigmoid()?.mul(&w)?.sum()))
        }),
        ("tanh", TOL, |s| {
            let w = randn_tensor(s, &[10], false);
            (randn_tensor(s, &[10], true), Box::new(move |x| x.tanh()?.mul(&w)?.sum()))
        }),
        ("batch_norm_train_x", TOL_BN, |s| {
            let gamma = randn_tensor(s, &[3], false);
            let beta = randn_tensor(s, &[3], false);
            let w = randn_tensor(s, &[4, 12], false);
            (
                randn_tensor(s, &[4, 3, 2, 2], true),
                Box::new(move |x| {
                    let rm = Tensor::zeros(&[3]);
                    let rv = Tensor::ones(&[3]);
                    x.batch_norm(&gamma, &beta, &rm, &rv, BnMode::Train, 0.1, 1e-5)?
                        .flatten()?
                        .mul(&w)?
                        .sum()
                }),
            )
        }),
        ("batch_norm_train_gamma", TOL_BN, |s| {
            let x = randn_tensor(s, &[4, 3, 2, 2], false);
            let beta = randn_tensor(s, &[3], false);
            let w = randn_tensor(s, &[4, 12], false);
            (
                randn_tensor(s, &[3], true),
                Box::new(move |g| {
                    let rm = Tensor::zeros(&[3]);
                    let rv = Tensor::ones(&[3]);
                    x.batch_norm(g, &beta, &rm, &rv, BnMode::Train, 0.1, 1e-5)?
                        .flatten()?
                        .mul(&w)?
                        .sum()
                }),
            )
        }),
        ("batch_norm_eval_x", TOL_BN, |s| {
            let gamma = randn_tensor(s, &[3], false);
            let beta = randn_tensor(s, &[3], false);
            let w = randn_tensor(s, &[2, 12], false);
            (
                randn_tensor(s, &[2, 3, 2, 2], true),
                Box::new(move |x| {
                    let rm = Tensor::from_vec(vec![0.1, -0.2, 0.3], &[3]).unwrap();
                    let rv = Tensor::from_vec(vec![0.9, 1.1, 1.4], &[3]).unwrap();
                    x.batch_norm(&gamma, &beta, &rm, &rv, BnMode::Eval, 0.1, 1e-5)?
                        .flatten()?
                        .mul(&w)?
                        .sum()
                }),
            )
        }),
        ("reshape", TOL, |s| {
            let w = randn_tensor(s, &[3, 4], false);
            (
                randn_tensor(s, &[2, 6], true),
                Box::new(move |x| x.reshape(&[3, 4])?.mul(&w)?.sum()),
            )
        }),
        ("flatten", TOL, |s| {
            let w = randn_tensor(s, &[2, 12], false);
            (
                randn_tensor(s, &[2, 3, 2, 2], true),
                Box::new(move |x| x.flatten()?.mul(&w)?.sum()),
            )
        }),
        ("concat", TOL, |s| {
            let other = randn_tensor(s, &[3, 4], false);
            let w = randn_tensor(s, &[3, 6], false);
            (
                randn_tensor(s, &[3, 2], true),
                Box::new(move |x| Tensor::concat(&[x, &other])?.mul(&w)?.sum()),
            )
        }),
        ("mean", TOL, |s| {
            (randn_tensor(s, &[9], true), Box::new(move |x| x.mean()))
        }),
        ("sum", TOL, |s| {
            (randn_tensor(s, &[9], true), Box::new(move |x| x.sum()))
        }),
        ("l2_norm", TOL, |s| {
            let w = randn_tensor(s, &[4], false);
            (
                randn_tensor(s, &[4, 6], true),
                Box::new(move |x| x.l2_norm()?.reshape(&[1, 4])?.mul(&w.reshape(&[1, 4])?)?.sum()),
            )
        }),
        ("sphere_projection", TOL, |s| {
            let w = randn_tensor(s, &[3, 8], false);
            (
                randn_tensor(s, &[3, 8], true),
                Box::new(move |x| x.normalize_rows(1e-8)?.mul(&w)?.sum()),
            )
        }),
        ("mse_loss", TOL, |s| {
            let t = randn_tensor(s, &[11], false);
            (randn_tensor(s, &[11], true), Box::new(move |x| x.mse_loss(&t)))
        }),
        ("bce_loss", TOL, |s| {
            let t: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
            let t = Tensor::from_vec(t, &[10]).unwrap();
            // p away from 0/1: the difference quotient's truncation error
            // grows as 1/p^3 and would swamp the tolerance below 0.1.
            let mut p = Vec::with_capacity(10);
            for _ in 0..10 {
                p.push(0.1 + 0.8 * s.uniform());
            }
            (
                Tensor::param(p, &[10]).unwrap(),
                Box::new(move |x| x.bce_loss(&t)),
            )
        }),
    ];

    let mut all_pass = true;
    let mut worst = (String::new(), 0.0f64);
    for (name, tol, build) in &cases {
        for instance in 0..INSTANCES {
            let mut stream = Stream::new(instance, Component::Init, 900 + instance);
            let (x, f) = build(&mut stream);
            let rep = grad_check(|x| f(x), &x, EPS, *tol).unwrap();
            if rep.max_rel_err > worst.1 {
                worst = (format!("{name}#{instance}"), rep.max_rel_err);
            }
            if !rep.pass {
                all_pass = false;
                println!("  {name} instance {instance}: max_rel_err {}", rep.max_rel_err);
            }
        }
    }

    // Full encoder -> project -> generate -> loss composite at f64.
    let cfg = ModelConfig {
        data_shape: swae::data::DataShape {
            channels: 2,
            height: 8,
            width: 8,
            n_scalars: 5,
        },
        arch: ArchConfig {
            latent_dim: 8,
            conv_channels: vec![4, 8],
            scalar_width: 8,
            fusion_width: 16,
            disc_widths: vec![8],
            ..Default::default()
        },
    };
    let params = init_params::<f64>(&cfg, 31).unwrap();
    let mut stream = Stream::new(31, Component::Init, 1000);
    let scalars = randn_tensor(&mut stream, &[2, 5], false);
    let img_target = Tensor::full(&[2, 2, 8, 8], 0.4);
    let sc_target = randn_tensor(&mut stream, &[2, 5], false);
    let images = {
        let data: Vec<f64> = (0..2 * 2 * 8 * 8).map(|_| stream.uniform()).collect();
        Tensor::param(data, &[2, 2, 8, 8]).unwrap()
    };
    let composite = |x: &Tensor<f64>| -> swae::Result<Tensor<f64>> {
        let z = encode(&params, &cfg, x, &scalars, BnMode::Train)?;
        let zt = project_to_sphere(&z)?;
        let (ih, sh) = generate(&params, &cfg, &zt, BnMode::Train)?;
        ih.mse_loss(&img_target)?.add(&sh.mse_loss(&sc_target)?)
    };
    let rep = grad_check(composite, &images, EPS, 1e-3).unwrap();
    let composite_pass = rep.pass;
    if !composite_pass {
        println!("  composite: max_rel_err {}", rep.max_rel_err);
    }

    let elapsed = started.elapsed();
    let within_time = elapsed.as_secs() < 60;
    let pass = all_pass && composite_pass && within_time;
    assert!(
        pass_line(
            1,
            "gradient correctness",
            pass,
            &format!(
                "{} ops x {INSTANCES} instances, worst {} = {:.2e}; composite {:.2e}; {elapsed:.2?}",
                cases.len(),
                worst.0,
                worst.1,
                rep.max_rel_err
            )
        ),
        "gradient check failed"
    );
}

// ── criterion 2: projection invariants ───────────────────────────────

#[test]
fn criterion_02_projection_invariants() {
    let d = 16;
    let n = 100_000;
    let mut stream = Stream::named(2024, Component::Prior);
    let z = sample_prior(n, d, &mut stream).unwrap();
    let zt = project_to_sphere(&z).unwrap();
    let data = zt.data();
    let mut max_norm_dev = 0.0f64;
    for row in data.chunks_exact(d) {
        let norm: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        max_norm_dev = max_norm_dev.max((norm - 1.0).abs());
    }
    drop(data);

    let mut max_scale_dev = 0.0f64;
    for &k in &[1e-3f32, 1.0, 1e3] {
        let zk = z.scalar_mul(k).unwrap();
        let ztk = project_to_sphere(&zk).unwrap();
        for (a, b) in zt.data().iter().zip(ztk.data().iter()) {
            max_scale_dev = max_scale_dev.max((a - b).abs() as f64);
        }
    }

    let pass = max_norm_dev <= 1e-6 && max_scale_dev <= 1e-6;
    assert!(
        pass_line(
            2,
            "projection invariants",
            pass,
            &format!(
                "n={n}: max |norm-1| = {max_norm_dev:.2e}, max scale deviation = {max_scale_dev:.2e}"
            )
        ),
        "projection invariants failed"
    );
}

// ── criterion 3: projected-prior uniformity ──────────────────────────

#[test]
fn criterion_03_projected_prior_uniformity() {
    let n = 10_000;
    let mut details = Vec::new();
    let mut pass = true;
    for d in [3usize, 16, 64] {
        let mut stream = Stream::new(3003, Component::Prior, d as u64);
        let z = sample_prior(n, d, &mut stream).unwrap();
        let zt = project_to_sphere(&z).unwrap();
        let rows: Vec<f64> = zt.to_vec().iter().map(|&v| v as f64).collect();
        let r_bar = eval::uniformity_statistic(&rows, d).unwrap();
        pass &= r_bar < 0.03;
        details.push(format!("d={d}: R_bar={r_bar:.4}"));
    }
    assert!(
        pass_line(
            3,
            "projected-prior uniformity",
            pass,
            &format!("{} (bound 3/sqrt(n) = 0.03)", details.join(", "))
        ),
        "uniformity failed"
    );
}

// ── criterion 4: desk-scale training ─────────────────────────────────

#[test]
fn criterion_04_desk_scale_training() {
    let fixture = &*FIXTURE;
    let mut ok = 0;
    let mut details = Vec::new();
    for run in &fixture.runs {
        let good = run.image_mse < 0.01 && run.r2_t_ion > 0.9;
        ok += good as u32;
        details.push(format!(
            "seed {}: mse={:.5}, R2={:.3}{}",
            run.seed,
            run.image_mse,
            run.r2_t_ion,
            if good { "" } else { " <-miss" }
        ));
    }
    let pass = ok >= 2;
    assert!(
        pass_line(
            4,
            "desk-scale training (mse<0.01, R2>0.9, 2 of 3 seeds)",
            pass,
            &details.join("; ")
        ),
        "desk-scale training failed"
    );
}

// ── criterion 5: scientific-line recovery ────────────────────────────

#[test]
fn criterion_05_scientific_line_recovery() {
    let fixture = &*FIXTURE;
    let oracle_ok = (fixture.raw_oracle_slope - 1.0).abs() < 0.05;
    let mut ok = 0;
    let mut details = vec![format!("raw-data oracle slope {:.4}", fixture.raw_oracle_slope)];
    for run in &fixture.runs {
        let good = (run.recon_slope - 1.0).abs() <= 0.1;
        ok += good as u32;
        details.push(format!(
            "seed {}: recon slope {:.4}{}",
            run.seed,
            run.recon_slope,
            if good { "" } else { " <-miss" }
        ));
    }
    let pass = oracle_ok && ok >= 2;
    assert!(
        pass_line(5, "scientific-line recovery (slope 1.0 +/- 0.1)", pass, &details.join("; ")),
        "line recovery failed"
    );
}

// ── criterion 6: validity monotonicity ───────────────────────────────

#[test]
fn criterion_06_validity_monotonicity() {
    let fixture = &*FIXTURE;
    let (params, cfg, std, line) = load_run(&fixture.runs[0]);
    let sigma = line.train_residual_std;
    let thresholds: Vec<f64> = [0.5, 1.0, 2.0, 3.0].iter().map(|s| s * sigma).collect();
    let mut pass = true;
    let mut details = Vec::new();
    for &radius in &[0.25, 1.0, 4.0] {
        let rows = eval::generate_and_score(
            &params, &cfg, &std, &line, 500, radius, &thresholds, 99,
        )
        .unwrap();
        let counts: Vec<usize> = rows.iter().map(|r| r.n_valid).collect();
        let monotone = counts.windows(2).all(|w| w[0] <= w[1]);
        pass &= monotone;
        details.push(format!("r={radius}: {counts:?}"));
    }
    assert!(
        pass_line(
            6,
            "validity monotonicity in threshold (exact)",
            pass,
            &details.join("; ")
        ),
        "monotonicity failed"
    );
}

// ── criterion 7: radius ablation shape ───────────────────────────────

#[test]
fn criterion_07_radius_ablation_shape() {
    let fixture = &*FIXTURE;
    let mut ok = 0;
    let mut details = Vec::new();
    for run in &fixture.runs {
        let by_radius: std::collections::HashMap<u64, usize> = run
            .valid_by_radius
            .iter()
            .map(|&(r, n)| (r.to_bits(), n))
            .collect();
        let at = |r: f64| by_radius[&r.to_bits()];
        let good = at(1.0) >= at(0.25) && at(1.0) >= at(4.0);
        ok += good as u32;
        details.push(format!(
            "seed {}: r0.25={} r1={} r4={}{}",
            run.seed,
            at(0.25),
            at(1.0),
            at(4.0),
            if good { "" } else { " <-miss" }
        ));
    }
    let pass = ok >= 2;
    assert!(
        pass_line(
            7,
            "radius ablation shape at 1 sigma (2 of 3 seeds)",
            pass,
            &details.join("; ")
        ),
        "radius ablation shape failed"
    );
}

// ── criterion 8: interpolation endpoint identity ─────────────────────

#[test]
fn criterion_08_interpolation_endpoints() {
    let fixture = &*FIXTURE;
    let (params, cfg, std, line) = load_run(&fixture.runs[0]);
    let dataset = read_dataset(&fixture.dataset_path).unwrap();
    let (train_set, _) = split_dataset(&dataset, 0.9, 42).unwrap();

    let mut pass = true;
    let mut residual_summaries = Vec::new();
    for pair in 0..5usize {
        let a = &train_set.records[2 * pair];
        let b = &train_set.records[2 * pair + 1];
        let points =
            eval::interpolate_latent(&params, &cfg, &std, &line, a, b, 9).unwrap();

        // Direct eval-mode pipeline for both endpoints.
        for (rec, point) in [(a, &points[0]), (b, &points[8])] {
            let shape = cfg.data_shape;
            let images = Tensor::from_vec(
                rec.image.clone(),
                &[1, shape.channels, shape.height, shape.width],
            )
            .unwrap();
            let scalars =
                Tensor::from_vec(std.transform(&rec.scalars), &[1, shape.n_scalars]).unwrap();
            let (img, sc) = no_grad(|| -> swae::Result<_> {
                let z = encode(&params, &cfg, &images, &scalars, BnMode::Eval)?;
                let zt = project_to_sphere(&z)?;
                generate(&params, &cfg, &zt, BnMode::Eval)
            })
            .unwrap();
            let img = img.to_vec();
            let sc = std.inverse(&sc.to_vec());
            let image_match = img
                .iter()
                .zip(point.image.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            let scalar_match = sc
                .iter()
                .zip(point.scalars.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            pass &= image_match && scalar_match;
        }
        let interior: Vec<String> = points[1..8]
            .iter()
            .map(|p| format!("{:.4}", p.residual))
            .collect();
        residual_summaries.push(format!("pair {pair}: [{}]", interior.join(", ")));
    }
    println!("  interior residuals per pair:");
    for s in &residual_summaries {
        println!("    {s}");
    }
    assert!(
        pass_line(
            8,
            "interpolation endpoint identity (bit-exact, 5 pairs)",
            pass,
            "endpoints bit-match direct encode->project->generate"
        ),
        "endpoint identity failed"
    );
}

// ── criterion 9: determinism and formats ─────────────────────────────

#[test]
fn criterion_09_determinism_and_formats() {
    let dir = tempfile::tempdir().unwrap();

    // (a) same-seed training runs: identical logs modulo the wall_ms
    // column (wall time is the one nondeterministic field in the schema).
    let synth = SyntheticConfig {
        n_samples: 300,
        height: 8,
        width: 8,
        channels: 2,
        n_scalars: 5,
        seed: 9,
        ..Default::default()
    };
    let dataset = generate_dataset(&synth).unwrap();
    let (train_set, _) = split_dataset(&dataset, 0.9, 9).unwrap();
    let cfg = ModelConfig {
        data_shape: dataset.shape,
        arch: ArchConfig {
            latent_dim: 8,
            conv_channels: vec![8, 16],
            scalar_width: 16,
            fusion_width: 32,
            disc_widths: vec![32, 32],
            ..Default::default()
        },
    };
    let tcfg = TrainConfig {
        epochs: 5,
        batch_size: 64,
        ..Default::default()
    };
    let mut logs = Vec::new();
    let mut curves = Vec::new();
    for i in 0..2 {
        let (params, log, std) = train(&train_set, &cfg, &tcfg, 9).unwrap();
        let log_path = dir.path().join(format!("trainlog{i}.csv"));
        log.write_csv(&log_path).unwrap();
        logs.push(std::fs::read(&log_path).unwrap());

        let line = fit_line_on(&train_set);
        let rows = eval::generate_and_score(
            &params,
            &cfg,
            &std,
            &line,
            100,
            1.0,
            &[line.train_residual_std],
            9,
        )
        .unwrap();
        let curve_path = dir.path().join(format!("validity{i}.csv"));
        eval::write_validity_csv(&curve_path, &rows).unwrap();
        curves.push(std::fs::read(&curve_path).unwrap());
    }
    let strip_wall = |bytes: &[u8]| -> String {
        String::from_utf8_lossy(bytes)
            .lines()
            .map(|l| l.rsplit_once(',').map(|(a, _)| a.to_string()).unwrap_or_default())
            .collect::<Vec<_>>()
            .join("\n")
    };
    let logs_match = strip_wall(&logs[0]) == strip_wall(&logs[1]);
    let curves_match = curves[0] == curves[1];

    // (b) .jags roundtrip bitwise + pinned size of the desk-scale file.
    let fixture = &*FIXTURE;
    let ds = read_dataset(&fixture.dataset_path).unwrap();
    let rt = dir.path().join("rt.jags");
    write_dataset(&rt, &ds).unwrap();
    let jags_roundtrip =
        std::fs::read(&rt).unwrap() == std::fs::read(&fixture.dataset_path).unwrap();
    let size = std::fs::metadata(&fixture.dataset_path).unwrap().len();
    let size_ok = size == 8_312_032;

    // (c) checkpoint roundtrip bitwise.
    let ckpt = load_checkpoint(&fixture.runs[0].checkpoint).unwrap();
    let rt_ckpt = dir.path().join("rt.swae");
    save_checkpoint(&rt_ckpt, &ckpt).unwrap();
    let ckpt_roundtrip = std::fs::read(&rt_ckpt).unwrap()
        == std::fs::read(&fixture.runs[0].checkpoint).unwrap();

    let pass = logs_match && curves_match && jags_roundtrip && size_ok && ckpt_roundtrip;
    assert!(
        pass_line(
            9,
            "determinism & formats",
            pass,
            &format!(
                "trainlog (sans wall_ms) identical: {logs_match}; validity_curve byte-identical: {curves_match}; .jags roundtrip: {jags_roundtrip}; desk file {size} bytes (want 8312032); checkpoint roundtrip: {ckpt_roundtrip}"
            )
        ),
        "determinism/formats failed"
    );
}

// ── criterion 10: phase isolation ────────────────────────────────────

#[test]
fn criterion_10_phase_isolation() {
    let synth = SyntheticConfig {
        n_samples: 32,
        height: 8,
        width: 8,
        channels: 2,
        n_scalars: 5,
        seed: 10,
        ..Default::default()
    };
    let dataset = generate_dataset(&synth).unwrap();
    let cfg = ModelConfig {
        data_shape: dataset.shape,
        arch: ArchConfig {
            latent_dim: 8,
            conv_channels: vec![8, 16],
            scalar_width: 16,
            fusion_width: 32,
            disc_widths: vec![32, 32],
            ..Default::default()
        },
    };
    let params = init_params::<f32>(&cfg, 10).unwrap();
    let std = Standardizer::fit(&dataset).unwrap();
    let refs: Vec<&swae::data::SampleRecord> = dataset.records.iter().collect();
    let (images, _) = swae::model::batch_from_records::<f32>(dataset.shape, &refs).unwrap();
    let scalars = Tensor::from_vec(
        dataset
            .records
            .iter()
            .flat_map(|r| std.transform(&r.scalars))
            .collect(),
        &[32, 5],
    )
    .unwrap();

    let snapshot = |p: &ModelParams<f32>| -> Vec<(String, Vec<f32>)> {
        p.named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.to_vec()))
            .collect()
    };
    let changed_names = |a: &[(String, Vec<f32>)], b: &[(String, Vec<f32>)]| -> Vec<String> {
        a.iter()
            .zip(b.iter())
            .filter(|((_, x), (_, y))| x != y)
            .map(|((n, _), _)| n.clone())
            .collect()
    };

    let tcfg = TrainConfig::default();
    let mut trainer = Trainer::new(&params, &cfg, &tcfg);
    let mut prior = Stream::named(10, Component::Prior);

    let before_phase1 = snapshot(&params);
    trainer
        .disc_phase(&images, &scalars, &mut prior, "test")
        .unwrap();
    let after_phase1 = snapshot(&params);
    let phase1_changed = changed_names(&before_phase1, &after_phase1);
    // Trainable parameters: discriminator only. Encoder batch-norm running
    // statistics may move (train-mode encode side effect); nothing else.
    let phase1_disc_only = phase1_changed.iter().any(|n| n.starts_with("discriminator"))
        && phase1_changed.iter().all(|n| {
            n.starts_with("discriminator")
                || (n.starts_with("encoder") && n.contains("running_"))
        });

    trainer.ae_phase(&images, &scalars, "test").unwrap();
    let after_phase2 = snapshot(&params);
    let phase2_changed = changed_names(&after_phase1, &after_phase2);
    // Batch-norm running stats move as a forward side effect of encoding;
    // no discriminator weight may move.
    let phase2_ok = !phase2_changed.is_empty()
        && phase2_changed
            .iter()
            .all(|n| !n.starts_with("discriminator"))
        && phase2_changed.iter().any(|n| n.starts_with("encoder"))
        && phase2_changed.iter().any(|n| n.starts_with("generator"));

    // Generator training inputs are unit-norm; the discriminator rejects
    // projected latents outright.
    let z = no_grad(|| encode(&params, &cfg, &images, &scalars, BnMode::Train)).unwrap();
    let zt = project_to_sphere(&z).unwrap();
    let norms_ok = zt
        .to_vec()
        .chunks_exact(8)
        .all(|row| (row.iter().map(|v| v * v).sum::<f32>().sqrt() - 1.0).abs() <= 1e-6);
    let disc_rejects = discriminate(&params, &cfg, &zt).is_err();

    let pass = phase1_disc_only && phase2_ok && norms_ok && disc_rejects;
    assert!(
        pass_line(
            10,
            "phase isolation & feeding rules",
            pass,
            &format!(
                "phase1 changed {} tensors (disc only: {phase1_disc_only}); phase2 changed {} (no disc: {phase2_ok}); generator inputs unit-norm: {norms_ok}; discriminator rejects z~: {disc_rejects}",
                phase1_changed.len(),
                phase2_changed.len()
            )
        ),
        "phase isolation failed"
    );
}
