use std::path::Path;

use nflows::flows::{Architecture, FlowConfig, TrainReport};
use nflows::harness::{
    build_null, build_nulls, corner_histograms, emit_report, evaluate_model, run_grid,
    select_best, ConstantGenerator, DataSizes, EvalOutcome, GridPointResult, HarnessError,
    NullDistribution, ReplicaResult, ResultsTable, RunConfig, SigmaClass, SigmaLevel, TestOutcome,
};
use nflows::metrics::{sample_directions, Statistic};
use nflows::seeds::derive_seed;
use nflows::targets::{make_cmog, read_points_csv, sample_cmog};
use proptest::prelude::*;

#[test]
fn null_is_sorted_with_one_value_per_pseudo_experiment() {
    let spec = make_cmog(2, 3, 1).unwrap();
    let dirs = sample_directions(2, 1);
    let nulls = build_nulls(&spec, 200, 150, &dirs, 4).unwrap();
    for (null, stat) in nulls.iter().zip(Statistic::ALL) {
        assert_eq!(null.statistic, stat);
        assert_eq!(null.len(), 150);
        assert!(null.values.windows(2).all(|w| w[0] <= w[1]));
        assert!(null.threshold(SigmaLevel::One) <= null.threshold(SigmaLevel::Two));
        assert!(null.threshold(SigmaLevel::Two) <= null.threshold(SigmaLevel::Three));
    }
    assert_eq!(build_null(Statistic::Swd, &spec, 200, 150, &dirs, 4).unwrap(), nulls[1]);
    assert!(matches!(build_nulls(&spec, 200, 99, &dirs, 4), Err(HarnessError::Invalid(_))));
}

#[test]
fn fresh_null_draws_cover_the_two_sigma_threshold() {
    let spec = make_cmog(2, 3, 2).unwrap();
    let dirs = sample_directions(2, 3);
    // A long null makes the threshold's own sampling error small next to
    // the binomial spread of the trials.
    let n = 100;
    let nulls = build_nulls(&spec, n, 8000, &dirs, 10).unwrap();
    let trials = 600;
    let fresh = build_nulls(&spec, n, trials, &dirs, 11).unwrap();
    let bound = 3.0 * (0.05f64 * 0.95 / trials as f64).sqrt();
    for (null, f) in nulls.iter().zip(&fresh) {
        let t = null.threshold(SigmaLevel::Two);
        let rate = f.values.iter().filter(|&&v| v > t).count() as f64 / trials as f64;
        assert!((rate - 0.05).abs() < bound, "{}: rate {rate}", null.statistic);
    }
}

#[test]
fn resampling_the_target_gives_central_p_values() {
    let spec = make_cmog(2, 3, 3).unwrap();
    let dirs = sample_directions(2, 5);
    let nulls = build_nulls(&spec, 400, 400, &dirs, 6).unwrap();
    let evals = 120;
    let mut sums = [0.0; 3];
    for k in 0..evals {
        let out = evaluate_model(&spec, &spec, 400, 1, &nulls, &dirs, derive_seed(99, "self-test", k)).unwrap();
        for (s, o) in sums.iter_mut().zip(&out.outcomes) {
            *s += o.p_value;
        }
    }
    for (s, stat) in sums.iter().zip(Statistic::ALL) {
        let mean = s / evals as f64;
        assert!(mean > 0.3 && mean < 0.7, "{stat}: mean p {mean}");
    }
}

#[test]
fn collapsed_model_is_rejected() {
    let spec = make_cmog(3, 3, 4).unwrap();
    let dirs = sample_directions(3, 1);
    let nulls = build_nulls(&spec, 500, 200, &dirs, 2).unwrap();
    let constant = ConstantGenerator(spec.mean());
    let out = evaluate_model(&constant, &spec, 500, 3, &nulls, &dirs, 1).unwrap();
    let ks = out.outcome(Statistic::Ks);
    assert!(ks.mean > nulls[0].threshold(SigmaLevel::Three));
    assert_eq!(ks.sigma, SigmaClass::AboveThree);
    assert_eq!(ks.p_value, 0.0);
    assert_eq!(out.outcome(Statistic::Swd).sigma, SigmaClass::AboveThree);
    // A constant sample has no correlation matrix.
    assert!(out.outcome(Statistic::Fn).failure.is_some());
}

#[test]
fn outcome_summaries_recompute_from_values() {
    let spec = make_cmog(2, 3, 4).unwrap();
    let dirs = sample_directions(2, 1);
    let nulls = build_nulls(&spec, 300, 100, &dirs, 2).unwrap();
    let out = evaluate_model(&spec, &spec, 300, 4, &nulls, &dirs, 8).unwrap();
    for (o, null) in out.outcomes.iter().zip(&nulls) {
        assert_eq!(o.values.len(), 4);
        let mean = o.values.iter().sum::<f64>() / 4.0;
        let var = o.values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 3.0;
        assert_eq!(o.mean, mean);
        assert_eq!(o.std, var.sqrt());
        assert_eq!(o.p_value, null.p_value(mean));
        assert!((0.0..=1.0).contains(&o.p_value));
    }
    assert_eq!(out.repeats, 4);
    assert_eq!(out.discarded_repeats, 0);
}

#[test]
fn non_finite_generators_are_discarded() {
    let spec = make_cmog(2, 3, 4).unwrap();
    let dirs = sample_directions(2, 1);
    let nulls = build_nulls(&spec, 100, 100, &dirs, 2).unwrap();
    let broken = ConstantGenerator(vec![f64::NAN, 1.0]);
    match evaluate_model(&broken, &spec, 100, 2, &nulls, &dirs, 1) {
        Err(HarnessError::NonFiniteSamples { repeats, non_finite_points }) => {
            assert_eq!((repeats, non_finite_points), (2, 200));
        }
        other => panic!("{other:?}"),
    }
}

fn synthetic_null() -> NullDistribution {
    NullDistribution::from_values(Statistic::Ks, 2, 10, 0, 0, (1..=100).map(|v| v as f64 / 20.0).collect()).unwrap()
}

fn eval_with_ks(ks: f64) -> EvalOutcome {
    let null = synthetic_null();
    let outcomes = Statistic::ALL
        .iter()
        .map(|&s| {
            let mut null = null.clone();
            null.statistic = s;
            TestOutcome::from_values(vec![ks, ks], &null)
        })
        .collect();
    EvalOutcome {
        outcomes,
        repeats: 2,
        discarded_repeats: 0,
        non_finite_points: 0,
        generation_seconds: 0.0,
        metric_seconds: 0.0,
    }
}

fn replica(id: usize, ks: Option<f64>) -> ReplicaResult {
    let report = TrainReport {
        epochs: 3,
        best_epoch: Some(2),
        best_val_loss: 1.0,
        initial_val_loss: 2.0,
        train_curve: vec![1.0; 3],
        val_curve: vec![1.0; 3],
        lr_curve: vec![1e-3; 3],
        seconds: 0.0,
        retries: 0,
    };
    ReplicaResult {
        replica: id,
        model_seed: id as u64,
        train_seed: 0,
        eval_seed: 0,
        train: match ks {
            Some(_) => Ok(report),
            None => Err("diverged".into()),
        },
        evaluation: ks.map(eval_with_ks).ok_or_else(|| "not evaluated".to_string()),
        untrained: None,
    }
}

fn point(replicas: Vec<ReplicaResult>) -> GridPointResult {
    GridPointResult {
        config: FlowConfig::new(Architecture::Maf, 2, 1, vec![4]),
        replicas,
    }
}

#[test]
fn selection_cases() {
    let single = [point(vec![replica(0, Some(2.0))])];
    let s = select_best(&single).unwrap();
    assert_eq!((s.average_best, s.absolute_best), (0, 0));

    let two = [
        point(vec![replica(0, Some(1.4)), replica(1, Some(1.6))]),
        point(vec![replica(0, Some(1.3)), replica(1, Some(1.1))]),
    ];
    let s = select_best(&two).unwrap();
    assert_eq!((s.average_best, s.absolute_best), (1, 1));
    assert!((s.mean_ks - 1.2).abs() < 1e-12);

    let with_failure = [point(vec![replica(0, None), replica(1, Some(3.0)), replica(2, Some(2.5))])];
    assert_eq!(with_failure[0].failed_count(), 1);
    assert_eq!(select_best(&with_failure).unwrap().absolute_best, 2);

    let all_failed = [point(vec![replica(0, None), replica(1, None)])];
    assert!(matches!(select_best(&all_failed), Err(HarnessError::NoResult)));
}

proptest! {
    #[test]
    fn selection_ignores_replica_order(ks in prop::collection::vec(prop::option::of(0.5f64..3.0), 1..8), seed in 0u64..1000) {
        let replicas: Vec<_> = ks.iter().enumerate().map(|(i, k)| replica(i, *k)).collect();
        let mut shuffled = replicas.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut nflows::seeds::rng(seed));
        let a = select_best(&[point(replicas)]);
        let b = select_best(&[point(shuffled)]);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.absolute_best, b.absolute_best);
                prop_assert!((a.mean_ks - b.mean_ks).abs() < 1e-12);
            }
            (Err(_), Err(_)) => prop_assert!(ks.iter().all(Option::is_none)),
            _ => prop_assert!(false, "selection depends on order"),
        }
    }

    #[test]
    fn p_value_is_non_increasing(values in prop::collection::vec(-10.0f64..10.0, 1..60), a in -12.0f64..12.0, b in -12.0f64..12.0) {
        let null = NullDistribution::from_values(Statistic::Ks, 1, 2, 0, 0, values).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(null.p_value(lo) >= null.p_value(hi));
        prop_assert!(null.threshold(SigmaLevel::One) <= null.threshold(SigmaLevel::Two));
        prop_assert!(null.threshold(SigmaLevel::Two) <= null.threshold(SigmaLevel::Three));
    }
}

fn tiny_run(dir: Option<&Path>) -> RunConfig {
    let grid = vec![
        FlowConfig::new(Architecture::Maf, 2, 2, vec![8]),
        FlowConfig::new(Architecture::ARqs, 2, 1, vec![8]),
    ];
    let mut cfg = RunConfig::desk(2, grid, 17).unwrap();
    cfg.sizes = DataSizes {
        train: 600,
        validation: 200,
        test: 300,
        n_pseudo: 100,
        replicas: 2,
        repeats: 2,
    };
    cfg.max_epochs = Some(3);
    cfg.evaluate_untrained = true;
    cfg.output = dir.map(Path::to_path_buf);
    cfg
}

#[test]
fn desk_defaults() {
    let s = DataSizes::desk();
    assert_eq!((s.train, s.validation, s.test, s.n_pseudo, s.replicas, s.repeats), (10_000, 3_000, 10_000, 1_000, 3, 5));
    let cfg = RunConfig::desk(4, vec![], 1).unwrap();
    assert_eq!(cfg.target.dim, 4);
    assert_eq!(cfg.target.n_components, 3);
    assert!(cfg.validate().is_err());
}

#[test]
fn small_run_is_reproducible_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run(Some(dir.path()));
    let a = run_grid(&cfg, &mut |_| {}).unwrap();
    let b = run_grid(&tiny_run(None), &mut |_| {}).unwrap();
    let (ta, tb) = (ResultsTable::from_run(&a), ResultsTable::from_run(&b));
    assert_eq!(ta.to_csv(false), tb.to_csv(false));
    assert_eq!(ta.rows.len(), 3);
    for r in &a.points[0].replicas {
        assert!(r.untrained.is_some());
        assert!(cfg.model_path(&a.points[0].config, r.replica).unwrap().exists());
    }

    let out = dir.path().join("report");
    let best = a.best_model().unwrap().expect("a replica succeeded");
    let files = emit_report(&a, Some(&best), &out, 12).unwrap();
    assert_eq!(files.len(), 7);
    let results = std::fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = results.lines();
    assert!(lines.next().unwrap().starts_with("kind,dim,hidden_layers,bijectors,algorithm,spline_knots,ks_mean"));
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 22);
        let filled = [0, 1, 2, 3, 4, 6, 7, 8, 9, 10, 11, 13, 14, 15, 16, 17, 18];
        assert!(filled.iter().all(|&i| !f[i].is_empty()), "{line}");
    }

    // Re-binning the stored samples with the stored edges reproduces the
    // stored counts.
    let test = read_points_csv(&out.join("test_samples.csv")).unwrap();
    let flow = read_points_csv(&out.join("flow_samples.csv")).unwrap();
    let corner = std::fs::read_to_string(out.join("corner_1d.csv")).unwrap();
    let mut checked = 0;
    for line in corner.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (dim, bin): (usize, usize) = (f[0].parse().unwrap(), f[1].parse().unwrap());
        let (lo, hi): (f64, f64) = (f[2].parse().unwrap(), f[3].parse().unwrap());
        let last = bin == 11;
        let count = |t: &nflows::diffcore::Tensor| {
            (0..t.rows())
                .filter(|&i| {
                    let v = t.at(i, dim);
                    v >= lo && (v < hi || (last && v == hi))
                })
                .count()
        };
        assert_eq!(count(&test).to_string(), f[4]);
        assert_eq!(count(&flow).to_string(), f[5]);
        checked += 1;
    }
    assert_eq!(checked, 2 * 12);
    let corner2 = std::fs::read_to_string(out.join("corner_2d.csv")).unwrap();
    let total: u64 = corner2.lines().skip(1).map(|l| l.split(',').nth(8).unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(total as usize, test.rows());
}

#[test]
fn histogram_edges_and_counts() {
    let spec = make_cmog(3, 2, 1).unwrap();
    let t = sample_cmog(&spec, 1000, 1).data;
    let f = sample_cmog(&spec, 800, 2).data;
    let c = corner_histograms(&t, &f, 10).unwrap();
    assert_eq!(c.one_d.len(), 3);
    assert_eq!(c.two_d.len(), 3);
    for h in &c.one_d {
        assert_eq!(h.test.iter().sum::<u64>(), 1000);
        assert_eq!(h.flow.iter().sum::<u64>() + h.flow_outside, 800);
        assert_eq!(h.edges.len(), 11);
    }
}

#[test]
fn unwritable_report_path_names_the_path() {
    let cfg = tiny_run(None);
    let run = run_grid(&cfg, &mut |_| {}).unwrap();
    let file = tempfile::NamedTempFile::new().unwrap();
    let target = file.path().join("sub");
    match emit_report(&run, None, &target, 4) {
        Err(HarnessError::Io { path, .. }) => assert!(path.starts_with(file.path())),
        other => panic!("{other:?}"),
    }
}
