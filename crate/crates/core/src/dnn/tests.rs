use super::*;
use ndarray::{array, Array1};
use proptest::prelude::{prop_assert, proptest, ProptestConfig};
use rand::Rng;
use rand_distr::StandardNormal;

fn random_rows(seed: u64, label: &str, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rng = substream(seed, label, 0);
    (0..n)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Samples of `x = A z` for one fixed random `A`.
fn linear_dataset(n: usize, seed: u64) -> (Dataset, Vec<Vec<f64>>) {
    let a = random_rows(0, "A", 4, 8);
    let inputs = random_rows(seed, "z", n, 8);
    let targets = inputs
        .iter()
        .map(|z| {
            a.iter()
                .map(|row| row.iter().zip(z).map(|(p, q)| p * q).sum())
                .collect()
        })
        .collect();
    (Dataset { inputs, targets }, a)
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 50,
        learning_rate: 3e-2,
        plateau: PlateauConfig {
            patience: 3,
            min_lr: 1e-7,
            ..Default::default()
        },
        dropout: 0.0,
        hidden_layers: vec![64],
        seed: 4,
        ..Default::default()
    }
}

/// Straight nested-loop evaluation of the network.
fn naive_forward(mlp: &Mlp<f64>, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let last = mlp.layers.len() - 1;
    for (l, layer) in mlp.layers.iter().enumerate() {
        let mut z = vec![0.0; layer.b.len()];
        for (o, zo) in z.iter_mut().enumerate() {
            let mut acc = layer.b[o];
            for (i, ai) in a.iter().enumerate() {
                acc += layer.w[(o, i)] * ai;
            }
            *zo = if l == last { acc } else { acc.max(0.0) };
        }
        a = z;
    }
    a
}

fn finite_difference_check(seed: u64) -> f64 {
    let mut mlp: Mlp<f64> = Mlp::he_init(&[2, 3, 2], seed);
    let mut rng = substream(seed, "fd", 0);
    for l in &mut mlp.layers {
        l.b.mapv_inplace(|_| 0.1 * rng.sample::<f64, _>(StandardNormal));
    }
    let x = Array2::from_shape_fn((5, 2), |_| rng.sample::<f64, _>(StandardNormal));
    let y = Array2::from_shape_fn((5, 2), |_| rng.sample::<f64, _>(StandardNormal));
    let masks = DropoutMasks::sample(&mlp, 5, 0.3, &mut rng);
    let (_, g) = mlp
        .loss_and_gradient(x.view(), y.view(), Some(&masks))
        .unwrap();
    let h = 1e-5;
    let loss = |m: &Mlp<f64>| {
        m.loss_and_gradient(x.view(), y.view(), Some(&masks))
            .unwrap()
            .0
    };
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    for l in 0..mlp.layers.len() {
        for idx in 0..mlp.layers[l].w.len() {
            let (r, c) = (idx / mlp.layers[l].w.ncols(), idx % mlp.layers[l].w.ncols());
            let (mut up, mut dn) = (mlp.clone(), mlp.clone());
            up.layers[l].w[(r, c)] += h;
            dn.layers[l].w[(r, c)] -= h;
            worst = worst.max(rel(g.w[l][(r, c)], (loss(&up) - loss(&dn)) / (2.0 * h)));
        }
        for k in 0..mlp.layers[l].b.len() {
            let (mut up, mut dn) = (mlp.clone(), mlp.clone());
            up.layers[l].b[k] += h;
            dn.layers[l].b[k] -= h;
            worst = worst.max(rel(g.b[l][k], (loss(&up) - loss(&dn)) / (2.0 * h)));
        }
    }
    worst
}

#[test]
fn he_init_statistics() {
    let mlp: Mlp<f64> = Mlp::he_init(&[500, 500, 3], 7);
    let w = &mlp.layers[0].w;
    let n = w.len() as f64;
    let mean = w.sum() / n;
    let std = (w.mapv(|v| (v - mean) * (v - mean)).sum() / n).sqrt();
    let expected = (2.0f64 / 500.0).sqrt();
    assert!((expected - 0.06325).abs() < 1e-5);
    assert!((std / expected - 1.0).abs() < 0.05, "std {std}");
    assert!(mlp.layers.iter().all(|l| l.b.iter().all(|&b| b == 0.0)));
    assert_eq!(mlp, Mlp::he_init(&[500, 500, 3], 7));
    assert_ne!(mlp, Mlp::he_init(&[500, 500, 3], 8));
}

#[test]
fn forward_examples() {
    let zero: Mlp<f64> = Mlp::zeros(&[3, 4, 2]);
    let out = zero.forward(array![[1.0, -2.0, 3.0]].view(), None).unwrap();
    assert!(out.iter().all(|&v| v == 0.0));

    let mut unit: Mlp<f64> = Mlp::zeros(&[1, 1, 1]);
    unit.layers[0].w[(0, 0)] = 1.0;
    unit.layers[1].w[(0, 0)] = 1.0;
    assert_eq!(
        unit.forward(array![[-3.0]].view(), None).unwrap()[(0, 0)],
        0.0
    );
    assert_eq!(
        unit.forward(array![[2.0]].view(), None).unwrap()[(0, 0)],
        2.0
    );

    let mut mlp: Mlp<f64> = Mlp::he_init(&[3, 5, 4, 2], 3);
    let mut rng = substream(3, "bias", 0);
    for l in &mut mlp.layers {
        l.b.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
    }
    let x = random_rows(5, "x", 6, 3);
    let batch = Array2::from_shape_fn((6, 3), |(i, j)| x[i][j]);
    let out = mlp.forward(batch.view(), None).unwrap();
    for (i, row) in x.iter().enumerate() {
        for (j, v) in naive_forward(&mlp, row).iter().enumerate() {
            assert!((out[(i, j)] - v).abs() < 1e-12);
        }
    }
    assert!(matches!(
        mlp.forward(array![[1.0, 2.0]].view(), None),
        Err(DnnError::Shape { .. })
    ));
}

#[test]
fn gradient_examples() {
    let mlp: Mlp<f64> = Mlp::he_init(&[3, 6, 2], 1);
    let x = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
    let y = mlp.forward(x.view(), None).unwrap();
    let (loss, g) = mlp.loss_and_gradient(x.view(), y.view(), None).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(g.max_abs(), 0.0);

    let target = &y + 0.5;
    let doubled = &y - (&y - &target) * 2.0;
    let (_, g1) = mlp
        .loss_and_gradient(x.view(), target.view(), None)
        .unwrap();
    let (_, g2) = mlp
        .loss_and_gradient(x.view(), doubled.view(), None)
        .unwrap();
    let out = mlp.layers.len() - 1;
    for (a, b) in g1.b[out].iter().zip(g2.b[out].iter()) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
}

#[test]
fn gradient_matches_finite_differences_on_one_model() {
    assert!(finite_difference_check(0) <= 1e-4);
}

#[test]
fn adam_examples() {
    let mut mlp: Mlp<f64> = Mlp::zeros(&[2, 2]);
    let mut adam = Adam::new(AdamConfig::default(), &mlp);
    let mut g = Gradients::zeros_like(&mlp);
    g.w[0].fill(1.0);
    g.b[0].fill(1.0);
    adam.step(&mut mlp, &g, 0.1);
    let expected = -0.1 / (1.0 + 1e-8);
    assert!(mlp.layers[0]
        .w
        .iter()
        .chain(mlp.layers[0].b.iter())
        .all(|&p| (p - expected).abs() < 1e-15));

    let mut still: Mlp<f64> = Mlp::he_init(&[2, 2], 1);
    let before = still.clone();
    let mut adam = Adam::new(AdamConfig::default(), &still);
    let zero = Gradients::zeros_like(&still);
    adam.step(&mut still, &zero, 0.1);
    assert_eq!(still, before);

    let mut pair: Mlp<f64> = Mlp::zeros(&[1, 2]);
    let mut adam = Adam::new(AdamConfig::default(), &pair);
    let mut g = Gradients::zeros_like(&pair);
    g.w[0][(0, 0)] = 0.7;
    g.w[0][(1, 0)] = -0.7;
    for _ in 0..3 {
        adam.step(&mut pair, &g, 0.05);
    }
    assert_eq!(pair.layers[0].w[(0, 0)], -pair.layers[0].w[(1, 0)]);
    assert!(pair.layers[0].w[(0, 0)] < 0.0);
}

#[test]
fn plateau_halves_after_patience() {
    let cfg = PlateauConfig {
        factor: 0.5,
        patience: 4,
        min_lr: 0.02,
    };
    let mut s = PlateauScheduler::new(cfg, 0.1);
    assert_eq!(s.observe(1.0), 0.1);
    for _ in 0..3 {
        assert_eq!(s.observe(1.0), 0.1);
    }
    assert_eq!(s.observe(1.0), 0.05);
    for _ in 0..3 {
        assert_eq!(s.observe(1.0), 0.05);
    }
    assert_eq!(s.observe(1.0), 0.025);
    for _ in 0..4 {
        s.observe(1.0);
    }
    assert_eq!(s.lr, 0.02);
    assert_eq!(s.observe(0.5), 0.02);
}

#[test]
fn inverted_dropout_is_unbiased() {
    let mlp: Mlp<f64> = Mlp::he_init(&[3, 8, 2], 12);
    let x = array![[0.5, -1.0, 2.0]];
    let infer = mlp.forward(x.view(), None).unwrap();
    let mut rng = substream(12, "masks", 0);
    let draws = 100_000;
    let (mut sum, mut sum_sq) = (Array1::<f64>::zeros(2), Array1::<f64>::zeros(2));
    for _ in 0..draws {
        let masks = DropoutMasks::sample(&mlp, 1, 0.3, &mut rng);
        let out = mlp
            .forward(x.view(), Some(&masks))
            .unwrap()
            .row(0)
            .to_owned();
        sum += &out;
        sum_sq += &out.mapv(|v| v * v);
    }
    let n = draws as f64;
    for k in 0..2 {
        let mean = sum[k] / n;
        let se = ((sum_sq[k] / n - mean * mean) / n).sqrt();
        assert!(
            (mean - infer[(0, k)]).abs() < 4.0 * se + 1e-12,
            "output {k}: {mean} vs {}",
            infer[(0, k)]
        );
    }
}

#[test]
fn linear_target_is_learned() {
    let (data, a) = linear_dataset(2000, 1);
    let (model, history) = train(&data, &FeatureSpec::plain(8, 4), &small_cfg()).unwrap();
    assert_eq!(history.train_loss.len(), 50);
    assert_eq!(history.learning_rate.len(), 50);

    let (test, _) = linear_dataset(500, 2);
    let pred = model.predict_features(&test.inputs).unwrap();
    let mut mse = 0.0;
    for (p, t) in pred.iter().zip(&test.targets) {
        let (ps, ts) = (model.output_scaler.scale(p), model.output_scaler.scale(t));
        mse += ps
            .iter()
            .zip(&ts)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / 4.0;
    }
    mse /= test.len() as f64;
    assert!(mse <= 1e-3, "scaled test MSE {mse}");

    let range: Vec<f64> = (0..4)
        .map(|k| {
            let col = data.targets.iter().map(|t| t[k]);
            col.clone().fold(f64::MIN, f64::max) - col.fold(f64::MAX, f64::min)
        })
        .collect();
    let train_pred = model.predict_features(&data.inputs).unwrap();
    for k in 0..4 {
        let errs: Vec<f64> = train_pred
            .iter()
            .zip(&data.targets)
            .map(|(p, t)| (p[k] - t[k]).abs())
            .collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let worst = errs.iter().cloned().fold(0.0, f64::max);
        assert!(
            mean <= 0.001 * range[k],
            "output {k}: mean error {mean} (range {})",
            range[k]
        );
        assert!(
            worst <= 0.01 * range[k],
            "output {k}: worst error {worst} (range {})",
            range[k]
        );
    }
    assert_eq!(a.len(), 4);
}

#[test]
fn constant_target_converges() {
    let inputs = random_rows(3, "z", 2000, 5);
    let targets = vec![vec![2.5, -1.0]; 2000];
    let cfg = TrainConfig {
        epochs: 80,
        hidden_layers: vec![8],
        plateau: PlateauConfig {
            patience: 2,
            factor: 0.5,
            min_lr: 1e-8,
        },
        ..small_cfg()
    };
    let (model, history) = train(
        &Dataset { inputs, targets },
        &FeatureSpec::plain(5, 2),
        &cfg,
    )
    .unwrap();
    assert!(
        history.val_loss[history.best_epoch] <= 1e-6,
        "{}",
        history.val_loss[history.best_epoch]
    );
    let p = model.predict_features(&[vec![0.3; 5]]).unwrap();
    assert!((p[0][0] - 2.5).abs() < 1e-2 && (p[0][1] + 1.0).abs() < 1e-2);
}

#[test]
fn best_model_beats_initial_and_training_is_deterministic() {
    let (data, _) = linear_dataset(300, 5);
    let cfg = TrainConfig {
        epochs: 5,
        dropout: 0.3,
        ..small_cfg()
    };
    let (model, _) = train(&data, &FeatureSpec::plain(8, 4), &cfg).unwrap();
    let (again, _) = train(&data, &FeatureSpec::plain(8, 4), &cfg).unwrap();
    assert_eq!(model.to_json(), again.to_json());

    let x = to_matrix(
        &data
            .inputs
            .iter()
            .map(|z| model.input_scaler.scale(z))
            .collect::<Vec<_>>(),
    );
    let y = to_matrix(
        &data
            .targets
            .iter()
            .map(|t| model.output_scaler.scale(t))
            .collect::<Vec<_>>(),
    );
    let initial = init(8, &cfg.hidden_layers, 4, cfg.seed).unwrap();
    assert!(eval_mse(&model.mlp, x.view(), y.view()) <= eval_mse(&initial, x.view(), y.view()));
}

#[test]
fn output_permutation_permutes_predictions() {
    let (data, _) = linear_dataset(2000, 6);
    let perm = [2, 0, 3, 1];
    let permuted = Dataset {
        inputs: data.inputs.clone(),
        targets: data
            .targets
            .iter()
            .map(|t| perm.iter().map(|&k| t[k]).collect())
            .collect(),
    };
    let cfg = small_cfg();
    let (a, _) = train(&data, &FeatureSpec::plain(8, 4), &cfg).unwrap();
    let (b, _) = train(&permuted, &FeatureSpec::plain(8, 4), &cfg).unwrap();
    let (test, _) = linear_dataset(100, 7);
    let pa = a.predict_features(&test.inputs).unwrap();
    let pb = b.predict_features(&test.inputs).unwrap();
    for (ra, rb) in pa.iter().zip(&pb) {
        for (j, &k) in perm.iter().enumerate() {
            assert!(
                (rb[j] - ra[k]).abs() < 0.05 * a.output_scaler.std[k],
                "{} vs {}",
                rb[j],
                ra[k]
            );
        }
    }
}

#[test]
fn model_json_round_trip() {
    let (data, _) = linear_dataset(200, 8);
    let (model, _) = train(
        &data,
        &FeatureSpec::plain(8, 4),
        &TrainConfig {
            epochs: 2,
            ..small_cfg()
        },
    )
    .unwrap();
    let back = MlpModel::from_json(&model.to_json()).unwrap();
    assert_eq!(back, model);
    let z = &data.inputs[..3];
    assert_eq!(
        back.predict_features(z).unwrap(),
        model.predict_features(z).unwrap()
    );
    assert!(matches!(model.predict(&[1.0]), Err(DnnError::Shape { .. })));

    let mut v: serde_json::Value = serde_json::from_str(&model.to_json()).unwrap();
    v["layers"][0]["b"] = serde_json::json!([0.0]);
    assert!(MlpModel::from_json(&v.to_string()).is_err());
}

#[test]
fn config_and_data_validation() {
    let (data, _) = linear_dataset(50, 9);
    let spec = FeatureSpec::plain(8, 4);
    for bad in [
        TrainConfig {
            learning_rate: 0.0,
            ..small_cfg()
        },
        TrainConfig {
            dropout: 1.0,
            ..small_cfg()
        },
        TrainConfig {
            batch_size: 0,
            ..small_cfg()
        },
        TrainConfig {
            validation_fraction: 1.0,
            ..small_cfg()
        },
    ] {
        assert!(matches!(
            train(&data, &spec, &bad),
            Err(DnnError::Config(_))
        ));
    }
    let tiny = Dataset {
        inputs: data.inputs[..10].to_vec(),
        targets: data.targets[..10].to_vec(),
    };
    assert!(matches!(
        train(&tiny, &spec, &small_cfg()),
        Err(DnnError::Data(_))
    ));
    let cfg: TrainConfig = toml::from_str("epochs = 3\n[plateau]\npatience = 2\n").unwrap();
    assert_eq!(
        (
            cfg.epochs,
            cfg.plateau.patience,
            cfg.learning_rate,
            cfg.batch_size
        ),
        (3, 2, 0.1, 32)
    );
    assert!(toml::from_str::<TrainConfig>("epoch = 3").is_err());
}

#[test]
fn angle_offsets_round_trip() {
    assert_eq!(wrap_deg(190.0), -170.0);
    assert_eq!(wrap_deg(-180.0), 180.0);
    assert!((wrap_deg(-179.9 - 179.9) - 0.2).abs() < 1e-9);
    let off = AngleOffsets(vec![None, Some(-120.0), Some(120.0)]);
    let v = [1.02, -121.5, 119.0];
    let r = off.remove(&v);
    assert!((r[1] + 1.5).abs() < 1e-12 && (r[2] + 1.0).abs() < 1e-12);
    let back = off.restore(&r);
    for (a, b) in back.iter().zip(&v) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn prediction_throughput() {
    let mlp = init(24, &[500; 5], 170, 1).unwrap();
    let model = MlpModel {
        mlp,
        input_offsets: AngleOffsets::none(24),
        output_offsets: AngleOffsets::none(170),
        input_scaler: Scaler::identity(24),
        output_scaler: Scaler::identity(170),
        dropout: 0.3,
        metadata: ModelMetadata::default(),
    };
    let zs = random_rows(1, "z", 1000, 24);
    let start = std::time::Instant::now();
    for z in &zs {
        model.predict(z).unwrap();
    }
    let rate = 1000.0 / start.elapsed().as_secs_f64();
    assert!(rate >= 30.0, "{rate} predictions/s");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn gradient_agrees_with_finite_differences(seed in 0u64..1_000_000) {
        let worst = finite_difference_check(seed);
        prop_assert!(worst <= 1e-4, "relative error {worst}");
    }

    #[test]
    fn scaler_round_trip(rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 3), 2..30)) {
        let s = Scaler::fit(&rows);
        for r in &rows {
            let back = s.unscale(&s.scale(r));
            for (a, b) in back.iter().zip(r) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
