use swae::data::*;
use swae::evaluation::*;
use swae::model::*;
use swae::training::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lambda: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(10.0);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(60);
    let w_scalar: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1);

    let ds = generate_dataset(&SyntheticConfig { n_samples: 2000, seed: 42, ..Default::default() }).unwrap();
    let (train_set, test_set) = split_dataset(&ds, 0.9, 42).unwrap();
    let arch = ArchConfig { conv_channels: vec![16, 32], ..Default::default() };
    let cfg = ModelConfig { data_shape: ds.shape, arch };
    let tcfg = TrainConfig { epochs, lambda_adv: lambda, w_scalar, ..Default::default() };
    let t0 = std::time::Instant::now();
    let (params, log, std) = train(&train_set, &cfg, &tcfg, seed).unwrap();
    let train_time = t0.elapsed();

    let m = recon_metrics(&params, &cfg, &std, &test_set).unwrap();
    let pts: Vec<(f64, f64)> = train_set.records.iter()
        .map(|r| (r.scalars[0] as f64, image_temperature(&r.image))).collect();
    let line = fit_scientific_line(&pts).unwrap();
    let recons = reconstruct(&params, &cfg, &std, &train_set).unwrap();
    let rpts: Vec<(f64, f64)> = recons.iter()
        .map(|r| (r.scalars[0] as f64, image_temperature(&r.image))).collect();
    let rline = fit_scientific_line(&rpts).unwrap();

    let th = line.train_residual_std;
    let mut valid = vec![];
    for r in [0.25, 0.5, 1.0, 2.0, 4.0] {
        let rows = generate_and_score(&params, &cfg, &std, &line, 1000, r, &[th], 7).unwrap();
        valid.push((r, rows[0].n_valid));
    }
    let e = log.epochs.last().unwrap();
    println!("lambda={lambda} w_s={w_scalar} seed={seed} epochs={epochs}: {:.0}s", train_time.as_secs_f64());
    println!("  final train: img {:.5} scalar {:.4} adv {:.3} disc {:.3}", e.recon_image_mse, e.recon_scalar_mse, e.adv_loss, e.disc_loss);
    println!("  test image MSE {:.5}  R2[0] {:.3}  r2_mean {:.3}", m.image_mse, m.r2_per_scalar[0].unwrap(), m.r2_mean.unwrap());
    println!("  recon-line slope {:.3}  valid@1sigma {:?}", rline.slope, valid);
}
