use nflows::targets::{
    log_prob_base, log_prob_cmog, make_cmog, read_points_csv, sample_base, sample_cmog, CmogSpec,
};

#[test]
fn mixture_moments_within_five_standard_errors() {
    let spec = make_cmog(3, 3, 21).unwrap();
    let n = 100_000;
    let x = sample_cmog(&spec, n, 4).data;
    let (mu, cov) = (spec.mean(), spec.covariance());
    let d = spec.dim;
    let nf = n as f64;
    let col_mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.at(i, j)).sum::<f64>() / nf).collect();
    for j in 0..d {
        let se = (cov[j][j] / nf).sqrt();
        assert!((col_mean[j] - mu[j]).abs() < 5.0 * se, "mean {j}: {} vs {}", col_mean[j], mu[j]);
    }
    for a in 0..d {
        for b in 0..d {
            // Standard error of a sample covariance from the spread of the
            // centered products.
            let prods: Vec<f64> = (0..n)
                .map(|i| (x.at(i, a) - col_mean[a]) * (x.at(i, b) - col_mean[b]))
                .collect();
            let m = prods.iter().sum::<f64>() / nf;
            let var = prods.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / (nf - 1.0);
            let se = (var / nf).sqrt();
            assert!((m - cov[a][b]).abs() < 5.0 * se, "cov {a}{b}: {m} vs {}", cov[a][b]);
        }
    }
    // Mixing produces correlations even though every component is diagonal.
    assert!(cov[0][1].abs() > 1e-3);
}

#[test]
fn sampling_is_deterministic_in_seed() {
    let spec = make_cmog(4, 3, 1).unwrap();
    assert_eq!(sample_cmog(&spec, 50, 9), sample_cmog(&spec, 50, 9));
    assert_ne!(sample_cmog(&spec, 50, 9).data, sample_cmog(&spec, 50, 10).data);
    assert_eq!(sample_base(3, 20, 2), sample_base(3, 20, 2));
}

#[test]
fn one_dimensional_quadrature_normalizes() {
    for seed in 0..4 {
        let spec = make_cmog(1, 3, seed).unwrap();
        let (lo, hi, steps) = (-10.0, 20.0, 300_000);
        let h = (hi - lo) / steps as f64;
        let xs: Vec<f64> = (0..=steps).map(|i| lo + h * i as f64).collect();
        let lp = log_prob_cmog(&spec, &nflows::diffcore::Tensor::matrix(xs.len(), 1, xs)).unwrap();
        // Trapezoid rule.
        let d = lp.data();
        let total: f64 = h * (d.iter().map(|v| v.exp()).sum::<f64>() - 0.5 * (d[0].exp() + d[steps].exp()));
        assert!((total - 1.0).abs() < 1e-6, "seed {seed}: {total}");
    }
}

#[test]
fn base_density_matches_unit_mixture() {
    let x = sample_base(3, 200, 5).data;
    let unit = CmogSpec::new(vec![vec![0.0; 3]], vec![vec![1.0; 3]], vec![1.0], 0).unwrap();
    let a = log_prob_base(&x);
    let b = log_prob_cmog(&unit, &x).unwrap();
    for (u, v) in a.data().iter().zip(b.data()) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn spec_and_sample_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = make_cmog(4, 3, 77).unwrap();
    let path = dir.path().join("spec.json");
    spec.save(&path).unwrap();
    assert_eq!(CmogSpec::load(&path).unwrap(), spec);

    let batch = sample_cmog(&spec, 64, 3);
    let csv = dir.path().join("points.csv");
    batch.save_csv(&csv).unwrap();
    let header = std::fs::read_to_string(&csv).unwrap();
    assert!(header.starts_with("x1,x2,x3,x4\n"));
    assert_eq!(read_points_csv(&csv).unwrap(), batch.data);
}
