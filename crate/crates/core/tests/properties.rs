//! Property tests for the structural invariants: projection geometry,
//! threshold nesting, and format roundtrips.

use proptest::prelude::*;

use swae::autodiff::Tensor;
use swae::data::{read_dataset, write_dataset, DataShape, Dataset, SampleRecord};
use swae::evaluation::{fit_scientific_line, valid_fraction, uniformity_statistic};
use swae::model::project_to_sphere;

fn finite_vec(len: usize, range: std::ops::Range<f32>) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(range, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// project(k*z) == project(z) for any positive scale, and outputs are
    /// unit-norm.
    #[test]
    fn projection_is_positive_scale_invariant(
        z in finite_vec(24, -10.0f32..10.0),
        k in prop::sample::select(vec![1e-3f32, 0.1, 1.0, 7.5, 1e3]),
    ) {
        let t = Tensor::from_vec(z, &[3, 8]).unwrap();
        // skip degenerate rows (projection errors on them by contract)
        let Ok(p) = project_to_sphere(&t) else { return Ok(()) };
        let pk = project_to_sphere(&t.scalar_mul(k).unwrap()).unwrap();
        for (a, b) in p.data().iter().zip(pk.data().iter()) {
            prop_assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
        for row in p.data().chunks_exact(8) {
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-6);
        }
    }

    /// Acceptance sets are nested: valid_fraction never decreases as the
    /// threshold grows.
    #[test]
    fn valid_fraction_is_monotone_in_threshold(
        ts in finite_vec(20, -1.0f32..1.0),
        mut thresholds in prop::collection::vec(0.0f64..2.0, 5),
    ) {
        let pts: Vec<(f64, f64)> = ts
            .iter()
            .enumerate()
            .map(|(i, &t)| (t as f64, i as f64 * 0.05))
            .collect();
        let line = fit_scientific_line(&pts).unwrap();
        thresholds.sort_by(f64::total_cmp);
        let mut prev = 0.0;
        for th in thresholds {
            let f = valid_fraction(&line, &pts, th).unwrap();
            prop_assert!(f >= prev);
            prev = f;
        }
    }

    /// write -> read is the identity, bit for bit.
    #[test]
    fn jags_roundtrip_is_identity(
        images in prop::collection::vec(finite_vec(2 * 3 * 3, 0.0f32..1.0), 1..5),
        scalars in prop::collection::vec(finite_vec(4, -100.0f32..100.0), 1..5),
    ) {
        let n = images.len().min(scalars.len());
        let records: Vec<SampleRecord> = images
            .into_iter()
            .zip(scalars)
            .take(n)
            .map(|(image, scalars)| SampleRecord { image, scalars })
            .collect();
        let ds = Dataset {
            shape: DataShape { channels: 2, height: 3, width: 3, n_scalars: 4 },
            records,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jags");
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        prop_assert_eq!(back.shape, ds.shape);
        for (a, b) in ds.records.iter().zip(back.records.iter()) {
            prop_assert!(a.image.iter().zip(b.image.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            prop_assert!(a.scalars.iter().zip(b.scalars.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    /// The mean resultant length of unit vectors is in [0, 1].
    #[test]
    fn uniformity_statistic_is_bounded(raw in finite_vec(40, -5.0f32..5.0)) {
        let t = Tensor::from_vec(raw, &[5, 8]).unwrap();
        let Ok(p) = project_to_sphere(&t) else { return Ok(()) };
        let rows: Vec<f64> = p.to_vec().iter().map(|&v| v as f64).collect();
        let r = uniformity_statistic(&rows, 8).unwrap();
        prop_assert!((0.0..=1.0 + 1e-9).contains(&r), "R_bar = {r}");
    }
}
