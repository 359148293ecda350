use super::*;
use crate::netmodel::load_ieee34_fixture;
use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

fn series(id: &str, xf: &str, kwh: &[f64], hours: f64) -> MeterReadingSeries {
    MeterReadingSeries {
        meter_id: id.into(),
        transformer_id: xf.into(),
        timestamps: (0..kwh.len()).map(|i| i.to_string()).collect(),
        energy_kwh: kwh.to_vec(),
        interval_hours: hours,
    }
}

fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = substream(seed, "test-normals", 0);
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

#[test]
fn energy_to_power_divides_by_interval() {
    assert_eq!(
        energy_to_power(&series("m", "t", &[5.0], 0.5)).unwrap(),
        vec![10.0]
    );
    assert_eq!(
        energy_to_power(&series("m", "t", &[0.0], 1.0)).unwrap(),
        vec![0.0]
    );
    assert_eq!(
        energy_to_power(&series("m", "t", &[1.2, 3.0, 0.6], 1.0)).unwrap(),
        vec![1.2, 3.0, 0.6]
    );
    assert!(matches!(
        energy_to_power(&series("m", "t", &[1.0], 0.0)),
        Err(LoadGenError::InvalidInterval(_))
    ));
    assert!(energy_to_power(&series("m", "t", &[1.0], -1.0)).is_err());
}

#[test]
fn aggregation_sums_per_transformer() {
    let agg = aggregate_to_transformer(&[
        series("a", "t", &[1.0, 2.0], 1.0),
        series("b", "t", &[3.0, 4.0], 1.0),
    ])
    .unwrap();
    assert_eq!(agg["t"].power_kw, vec![4.0, 6.0]);
    let single = aggregate_to_transformer(&[series("a", "t", &[1.5, 2.5], 1.0)]).unwrap();
    assert_eq!(single["t"].power_kw, vec![1.5, 2.5]);

    let mut off = series("b", "t", &[3.0, 4.0], 1.0);
    off.timestamps[1] = "x".into();
    assert!(matches!(
        aggregate_to_transformer(&[series("a", "t", &[1.0, 2.0], 1.0), off]),
        Err(LoadGenError::Misaligned(_))
    ));
}

#[test]
fn aggregation_matches_column_sums() {
    let mut rng = substream(5, "agg", 0);
    let rows: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..24).map(|_| rng.random_range(0.0..5.0)).collect())
        .collect();
    let meters: Vec<_> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| series(&format!("m{i}"), "t", r, 1.0))
        .collect();
    let agg = aggregate_to_transformer(&meters).unwrap();
    for t in 0..24 {
        let mut col = 0.0;
        for r in &rows {
            col += r[t];
        }
        assert!((agg["t"].power_kw[t] - col).abs() < 1e-12);
    }
}

#[test]
fn kde_matches_normal_interval() {
    let xs = normals(10_000, 1);
    let kde = fit_kde(&xs, 0.95).unwrap();
    let (a, b) = kde.central_interval(0.95);
    assert!(
        (a + 1.96).abs() < 0.10 && (b - 1.96).abs() < 0.10,
        "[{a}, {b}]"
    );
    let mut sorted = xs.clone();
    sorted.sort_by(f64::total_cmp);
    let emp = percentile(&sorted, 0.975) - percentile(&sorted, 0.025);
    assert!(((b - a) / emp - 1.0).abs() <= 0.01);
}

#[test]
fn kde_rejects_degenerate_and_small_inputs() {
    assert!(matches!(
        fit_kde(&[3.0; 100], 0.95),
        Err(LoadGenError::Degenerate)
    ));
    assert!(matches!(
        fit_kde(&[1.0, 2.0], 0.95),
        Err(LoadGenError::TooFewSamples { .. })
    ));
    assert!(fit_kde(&normals(100, 2), 1.0).is_err());
}

#[test]
fn kde_keeps_bimodality() {
    let mut xs = normals(1000, 3);
    for (i, x) in xs.iter_mut().enumerate() {
        *x += if i % 2 == 0 { -4.0 } else { 4.0 };
    }
    let kde = fit_kde(&xs, 0.95).unwrap();
    let grid: Vec<f64> = (0..=400).map(|i| -10.0 + 0.05 * i as f64).collect();
    let d: Vec<f64> = grid.iter().map(|&x| kde.pdf(x)).collect();
    // Ignore ripples in the empty trough between the modes.
    let floor = 0.1 * d.iter().cloned().fold(0.0, f64::max);
    let maxima: Vec<f64> = (1..d.len() - 1)
        .filter(|&i| d[i] > floor && d[i] > d[i - 1] && d[i] > d[i + 1])
        .map(|i| grid[i])
        .collect();
    assert_eq!(maxima.len(), 2, "{maxima:?}");
    assert!(maxima[0] < -3.0 && maxima[1] > 3.0);
}

#[test]
fn kde_density_integrates_to_one() {
    let kde = fit_kde(&normals(500, 4), 0.95).unwrap();
    let (lo, hi) = kde.support();
    let n = 20_000;
    let dx = (hi - lo) / n as f64;
    let mut area = 0.5 * (kde.pdf(lo) + kde.pdf(hi));
    for i in 1..n {
        area += kde.pdf(lo + dx * i as f64);
    }
    assert!((area * dx - 1.0).abs() < 1e-3);
}

#[test]
fn gaussian_variation_uses_three_sigma() {
    let net = load_ieee34_fixture();
    let d = gaussian_variation(&net, 0.5).unwrap();
    let i = net
        .load_points()
        .iter()
        .position(|lp| (lp.p_kw - 30.0).abs() < 1e-9);
    let nominal = net.load_points()[0].p_kw;
    match &d.points[0] {
        LoadDistribution::Gaussian {
            mean,
            std,
            lower,
            upper,
        } => {
            assert_eq!(*mean, nominal);
            assert!((std - nominal * 0.5 / 3.0).abs() < 1e-12);
            assert!((lower - nominal * 0.5).abs() < 1e-12 && (upper - nominal * 1.5).abs() < 1e-12);
        }
        _ => panic!(),
    }
    if let Some(i) = i {
        assert_eq!(
            d.points[i],
            LoadDistribution::Gaussian {
                mean: 30.0,
                std: 5.0,
                lower: 15.0,
                upper: 45.0
            }
        );
    }
    assert!(gaussian_variation(&net, 1.0).is_err());
    assert!(gaussian_variation(&net, 0.0).is_err());
}

#[test]
fn gaussian_draws_stay_in_bounds_and_center() {
    let dist = LoadDistribution::Gaussian {
        mean: 30.0,
        std: 5.0,
        lower: 15.0,
        upper: 45.0,
    };
    let mut rng = substream(9, "gauss", 0);
    let n = 100_000;
    let mut sum = 0.0;
    for _ in 0..n {
        let x = dist.sample(&mut rng);
        assert!((15.0..=45.0).contains(&x));
        sum += x;
    }
    assert!((sum / n as f64 - 30.0).abs() < 0.3);

    let tiny = LoadDistribution::Gaussian {
        mean: 30.0,
        std: 1e-12,
        lower: 30.0 - 1e-11,
        upper: 30.0 + 1e-11,
    };
    assert!((tiny.sample(&mut rng) - 30.0).abs() < 1e-10);
}

#[test]
fn unity_power_factor_gives_zero_q() {
    let net = load_ieee34_fixture();
    let d = gaussian_variation(&net, 0.5).unwrap();
    for sc in sample_scenarios(&d, PowerFactorRange::new(1.0, 1.0).unwrap(), 20, 1) {
        assert!(sc.q_kvar.iter().all(|&q| q.abs() < 1e-12));
    }
}

#[test]
fn reactive_power_identity() {
    let q = reactive_from_pf(100.0, 0.95);
    assert!((q - 100.0 * (1.0 - 0.95f64 * 0.95).sqrt() / 0.95).abs() < 1e-9);
    assert!((q - 32.87).abs() < 0.005);
}

#[test]
fn scenarios_are_deterministic_and_pf_bounded() {
    let net = load_ieee34_fixture();
    let d = gaussian_variation(&net, 0.5).unwrap();
    let pf = PowerFactorRange::default();
    let a = sample_scenarios(&d, pf, 50, 77);
    assert_eq!(a, sample_scenarios(&d, pf, 50, 77));
    assert_ne!(a, sample_scenarios(&d, pf, 50, 78));
    assert_eq!(a[10], sample_scenario(&d, pf, 77, 10));
    let max_ratio = 0.95f64.acos().tan();
    for sc in &a {
        for (p, q) in sc.p_kw.iter().zip(&sc.q_kvar) {
            let r = q / p;
            assert!((-1e-12..=max_ratio + 1e-12).contains(&r));
        }
    }
}

#[test]
fn different_seeds_agree_in_mean() {
    let net = load_ieee34_fixture();
    let d = gaussian_variation(&net, 0.5).unwrap();
    let n = 2000;
    let a = sample_scenarios(&d, PowerFactorRange::default(), n, 1);
    let b = sample_scenarios(&d, PowerFactorRange::default(), n, 2);
    for (k, dist) in d.points.iter().enumerate() {
        let LoadDistribution::Gaussian { std, .. } = dist else {
            panic!()
        };
        let ma = a.iter().map(|s| s.p_kw[k]).sum::<f64>() / n as f64;
        let mb = b.iter().map(|s| s.p_kw[k]).sum::<f64>() / n as f64;
        let se = std * (2.0 / n as f64).sqrt();
        assert!(
            (ma - mb).abs() <= 3.0 * se + 1e-12,
            "point {k}: {ma} vs {mb}"
        );
    }
}

#[test]
fn scenario_csv_roundtrip() {
    let net = load_ieee34_fixture();
    let d = gaussian_variation(&net, 0.5).unwrap();
    let sc = sample_scenarios(&d, PowerFactorRange::default(), 3, 4);
    let mut buf = Vec::new();
    write_scenarios_csv(&mut buf, &net, &sc).unwrap();
    assert!(String::from_utf8_lossy(&buf).starts_with("scenario_id,bus,phase,p_kw,q_kvar"));
    assert_eq!(read_scenarios_csv(buf.as_slice(), &net).unwrap(), sc);
}

#[test]
fn synthetic_meters_feed_kde_path() {
    let net = load_ieee34_fixture();
    let cfg = SyntheticMeterConfig {
        days: 30,
        ..Default::default()
    };
    let meters = synthetic_meters(&net, &cfg, 3).unwrap();
    let mut buf = Vec::new();
    write_meter_csv(&mut buf, &meters).unwrap();
    let back = read_meter_csv(buf.as_slice(), cfg.interval_hours).unwrap();
    assert_eq!(back.len(), meters.len());
    let agg = aggregate_to_transformer(&back).unwrap();
    let dists = kde_distributions(&net, &agg, 0.95).unwrap();
    assert_eq!(dists.points.len(), net.load_points().len());
    for (lp, d) in net.load_points().iter().zip(&dists.points) {
        let LoadDistribution::Kde(k) = d else {
            panic!()
        };
        let mean = k.centers.iter().sum::<f64>() / k.centers.len() as f64;
        assert!(
            (mean - lp.p_kw).abs() < 0.1 * lp.p_kw,
            "{mean} vs {}",
            lp.p_kw
        );
    }
    let empty = std::collections::BTreeMap::new();
    assert!(matches!(
        kde_distributions(&net, &empty, 0.95),
        Err(LoadGenError::MissingTransformer(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn truncated_sampler_respects_bounds(mean in -100.0f64..100.0, std in 0.0f64..50.0, w in 0.01f64..100.0, seed in any::<u64>()) {
        let mut rng = substream(seed, "prop", 0);
        for _ in 0..50 {
            let x = truncated_normal(&mut rng, mean, std, mean - w, mean + w);
            prop_assert!(x >= mean - w && x <= mean + w);
        }
    }

    #[test]
    fn sampled_pf_ratio_in_range(lo in 0.5f64..1.0, seed in any::<u64>()) {
        let pf = PowerFactorRange::new(lo, 1.0).unwrap();
        let mut rng = substream(seed, "pf", 0);
        for _ in 0..20 {
            let f = pf.sample(&mut rng);
            prop_assert!(f >= lo && f <= 1.0);
            let r = reactive_from_pf(1.0, f);
            prop_assert!(r >= 0.0 && r <= lo.acos().tan() + 1e-12);
        }
    }
}
