//! MLP regressor approximating the conditional mean `E[x | z]` of the state
//! given SMD measurements.

pub mod mlp;
pub mod optim;

use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::netmodel::NetworkModel;
use crate::powerflow::StateVector;
use crate::rng::substream;
use crate::smdsim::ChannelLayout;

pub use mlp::{DropoutMasks, FlushDenormals, Gradients, Layer, Mlp, Real};
pub use optim::{Adam, AdamConfig, PlateauConfig, PlateauScheduler};

#[derive(Debug, thiserror::Error)]
pub enum DnnError {
    #[error("{what} has {got} features, expected {expected}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid dataset: {0}")]
    Data(String),
    #[error("non-finite training loss at epoch {epoch}, batch {batch}, lr {lr}")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },
    #[error("model file: {0}")]
    Model(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Training budget used by experiment drivers when generating data.
    pub samples: usize,
    pub learning_rate: f64,
    pub plateau: PlateauConfig,
    /// Dropout rate on hidden layers.
    pub dropout: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub hidden_layers: Vec<usize>,
    /// Subtract nominal phase angles from angle features.
    pub detrend_angles: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            samples: 12_500,
            learning_rate: 0.1,
            plateau: PlateauConfig::default(),
            dropout: 0.3,
            adam: AdamConfig::default(),
            batch_size: 32,
            validation_fraction: 0.2,
            hidden_layers: vec![500; 5],
            detrend_angles: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DnnError> {
        let bad = |m: String| Err(DnnError::Config(m));
        if self.epochs == 0 || self.samples == 0 || self.batch_size == 0 {
            return bad("epochs, samples and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate < 1.0) {
            return bad(format!(
                "learning_rate {} not in (0, 1)",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!(
                "validation_fraction {} not in (0, 1)",
                self.validation_fraction
            ));
        }
        let p = &self.plateau;
        if !(p.factor > 0.0 && p.factor < 1.0) || p.patience == 0 || !(p.min_lr > 0.0) {
            return bad(format!("invalid plateau schedule {p:?}"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.epsilon > 0.0) {
            return bad(format!("invalid ADAM parameters {a:?}"));
        }
        if self.hidden_layers.contains(&0) {
            return bad("hidden layer of width 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub learning_rate: Vec<f64>,
    pub best_epoch: usize,
}

/// Per-feature z-score transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Fit on rows; constant features get std 1.
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|s| (s / n).sqrt())
            .map(|s| if s > 1e-12 { s } else { 1.0 })
            .collect();
        Scaler { mean, std }
    }

    pub fn identity(d: usize) -> Self {
        Scaler {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn scale(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn unscale(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| x * s + m)
            .collect()
    }
}

/// Wrap an angle in degrees to (−180, 180].
pub fn wrap_deg(a: f64) -> f64 {
    let w = (a + 180.0).rem_euclid(360.0) - 180.0;
    if w == -180.0 {
        180.0
    } else {
        w
    }
}

/// Nominal angle offset per feature; `None` for non-angle features.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AngleOffsets(pub Vec<Option<f64>>);

impl AngleOffsets {
    pub fn none(d: usize) -> Self {
        AngleOffsets(vec![None; d])
    }

    /// State features: magnitudes then angles, in state order.
    pub fn for_state(net: &NetworkModel) -> Self {
        let labels = net.state_labels();
        let mut v = vec![None; labels.len()];
        v.extend(labels.iter().map(|&(_, p)| Some(p.nominal_angle_deg())));
        AngleOffsets(v)
    }

    /// Measurement features: (magnitude, angle) per channel.
    pub fn for_layout(layout: &ChannelLayout) -> Self {
        AngleOffsets(
            layout
                .channels
                .iter()
                .flat_map(|c| [None, Some(c.phase.nominal_angle_deg())])
                .collect::<Vec<_>>(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn remove(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.0)
            .map(|(x, o)| o.map_or(*x, |o| wrap_deg(x - o)))
            .collect()
    }

    pub fn restore(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.0)
            .map(|(x, o)| o.map_or(*x, |o| wrap_deg(x + o)))
            .collect()
    }
}

/// Which input and output features are angles.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSpec {
    pub inputs: AngleOffsets,
    pub outputs: AngleOffsets,
}

impl FeatureSpec {
    pub fn plain(m: usize, n: usize) -> Self {
        FeatureSpec {
            inputs: AngleOffsets::none(m),
            outputs: AngleOffsets::none(n),
        }
    }

    pub fn for_estimation(net: &NetworkModel, layout: &ChannelLayout) -> Self {
        FeatureSpec {
            inputs: AngleOffsets::for_layout(layout),
            outputs: AngleOffsets::for_state(net),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub net_hash: String,
    pub placement_hash: String,
    pub seed: u64,
    /// Site labels the input layout was built from.
    #[serde(default)]
    pub sites: Vec<String>,
}

/// Trained estimator: network plus the feature transforms around it.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub mlp: Mlp<f32>,
    pub input_offsets: AngleOffsets,
    pub output_offsets: AngleOffsets,
    pub input_scaler: Scaler,
    pub output_scaler: Scaler,
    pub dropout: f64,
    pub metadata: ModelMetadata,
}

/// Untrained He-initialized network of sizes `[m, hidden…, n]`.
pub fn init(m: usize, hidden: &[usize], n: usize, seed: u64) -> Result<Mlp<f32>, DnnError> {
    if m == 0 || n == 0 {
        return Err(DnnError::Config(
            "input and output sizes must be positive".into(),
        ));
    }
    let mut sizes = vec![m];
    sizes.extend_from_slice(hidden);
    sizes.push(n);
    Ok(Mlp::he_init(&sizes, seed))
}

/// Measurement/state pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn validate(&self) -> Result<(usize, usize), DnnError> {
        if self.inputs.len() != self.targets.len() {
            return Err(DnnError::Data(format!(
                "{} inputs but {} targets",
                self.inputs.len(),
                self.targets.len()
            )));
        }
        let m = self.inputs.first().map_or(0, Vec::len);
        let n = self.targets.first().map_or(0, Vec::len);
        for (i, (z, x)) in self.inputs.iter().zip(&self.targets).enumerate() {
            if z.len() != m || x.len() != n {
                return Err(DnnError::Data(format!(
                    "sample {i} has shape ({}, {}), expected ({m}, {n})",
                    z.len(),
                    x.len()
                )));
            }
            if z.iter().chain(x).any(|v| !v.is_finite()) {
                return Err(DnnError::Data(format!("sample {i} has a non-finite value")));
            }
        }
        Ok((m, n))
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> Array2<f32> {
    let d = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j] as f32)
}

fn gather(a: &Array2<f32>, idx: &[usize]) -> Array2<f32> {
    a.select(ndarray::Axis(0), idx)
}

/// Batched inference-mode MSE in chunks, to bound memory.
fn eval_mse(mlp: &Mlp<f32>, x: ArrayView2<f32>, y: ArrayView2<f32>) -> f64 {
    const CHUNK: usize = 1024;
    let mut total = 0.0;
    let mut start = 0;
    while start < x.nrows() {
        let end = (start + CHUNK).min(x.nrows());
        let mse = mlp
            .mse(x.slice(s![start..end, ..]), y.slice(s![start..end, ..]))
            .expect("shapes checked");
        total += mse as f64 * (end - start) as f64;
        start = end;
    }
    total / x.nrows().max(1) as f64
}

/// Train on `data` with a seeded train/validation split, per-epoch shuffles
/// and dropout masks. Returns the weights with the best validation loss.
pub fn train(
    data: &Dataset,
    spec: &FeatureSpec,
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainHistory), DnnError> {
    cfg.validate()?;
    let (m, n) = data.validate()?;
    if data.len() < cfg.batch_size {
        return Err(DnnError::Data(format!(
            "{} samples is fewer than one batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    if m == 0 || n == 0 {
        return Err(DnnError::Data("empty feature vectors".into()));
    }
    let (input_offsets, output_offsets) = if cfg.detrend_angles {
        (spec.inputs.clone(), spec.outputs.clone())
    } else {
        (AngleOffsets::none(m), AngleOffsets::none(n))
    };
    if input_offsets.len() != m || output_offsets.len() != n {
        return Err(DnnError::Shape {
            what: "feature spec",
            expected: m + n,
            got: input_offsets.len() + output_offsets.len(),
        });
    }
    let xs: Vec<Vec<f64>> = data
        .inputs
        .iter()
        .map(|z| input_offsets.remove(z))
        .collect();
    let ys: Vec<Vec<f64>> = data
        .targets
        .iter()
        .map(|x| output_offsets.remove(x))
        .collect();

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut substream(cfg.seed, "dnn/split", 0));
    let n_val =
        ((data.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, data.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let pick =
        |rows: &[Vec<f64>], idx: &[usize]| idx.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>();
    let input_scaler = Scaler::fit(&pick(&xs, &train_idx));
    let output_scaler = Scaler::fit(&pick(&ys, &train_idx));
    let x_all = to_matrix(&xs.iter().map(|v| input_scaler.scale(v)).collect::<Vec<_>>());
    let y_all = to_matrix(
        &ys.iter()
            .map(|v| output_scaler.scale(v))
            .collect::<Vec<_>>(),
    );
    let (x_val, y_val) = (gather(&x_all, val_idx), gather(&y_all, val_idx));

    let _ftz = FlushDenormals::new();
    let mut mlp = init(m, &cfg.hidden_layers, n, cfg.seed)?;
    let mut adam = Adam::new(cfg.adam, &mlp);
    let mut sched = PlateauScheduler::new(cfg.plateau, cfg.learning_rate);
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, mlp.clone());
    let mut lr = cfg.learning_rate;
    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut substream(cfg.seed, "dnn/shuffle", epoch as u64));
        let mut mask_rng = substream(cfg.seed, "dnn/dropout", epoch as u64);
        let mut loss_sum = 0.0;
        for (bi, batch) in train_idx.chunks(cfg.batch_size).enumerate() {
            let (xb, yb) = (gather(&x_all, batch), gather(&y_all, batch));
            let masks = (cfg.dropout > 0.0)
                .then(|| DropoutMasks::sample(&mlp, batch.len(), cfg.dropout, &mut mask_rng));
            let (loss, grads) = mlp.loss_and_gradient(xb.view(), yb.view(), masks.as_ref())?;
            if !loss.is_finite() || !grads.max_abs().is_finite() {
                return Err(DnnError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    lr,
                });
            }
            loss_sum += loss as f64 * batch.len() as f64;
            adam.step(&mut mlp, &grads, lr);
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        let val_loss = eval_mse(&mlp, x_val.view(), y_val.view());
        if !val_loss.is_finite() {
            return Err(DnnError::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
                lr,
            });
        }
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        history.learning_rate.push(lr);
        if val_loss < best.0 {
            best = (val_loss, mlp.clone());
            history.best_epoch = epoch;
        }
        log::debug!("epoch {epoch}: train {train_loss:.3e} val {val_loss:.3e} lr {lr:.1e}");
        lr = sched.observe(val_loss);
    }
    let model = MlpModel {
        mlp: best.1,
        input_offsets,
        output_offsets,
        input_scaler,
        output_scaler,
        dropout: cfg.dropout,
        metadata: ModelMetadata {
            seed: cfg.seed,
            ..Default::default()
        },
    };
    Ok((model, history))
}

impl MlpModel {
    pub fn input_len(&self) -> usize {
        self.mlp.input_len()
    }

    pub fn output_len(&self) -> usize {
        self.mlp.output_len()
    }

    fn prepare(&self, z: &[f64]) -> Result<Vec<f64>, DnnError> {
        if z.len() != self.input_len() {
            return Err(DnnError::Shape {
                what: "measurement",
                expected: self.input_len(),
                got: z.len(),
            });
        }
        Ok(self.input_scaler.scale(&self.input_offsets.remove(z)))
    }

    /// Estimated state features for a batch of measurement vectors.
    pub fn predict_features(&self, zs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, DnnError> {
        let rows = zs
            .iter()
            .map(|z| self.prepare(z))
            .collect::<Result<Vec<_>, _>>()?;
        if rows.is_empty() {
            return Ok(vec![]);
        }
        let _ftz = FlushDenormals::new();
        let out = self.mlp.forward(to_matrix(&rows).view(), None)?;
        Ok(out
            .outer_iter()
            .map(|r| {
                let v: Vec<f64> = r.iter().map(|&x| x as f64).collect();
                self.output_offsets.restore(&self.output_scaler.unscale(&v))
            })
            .collect())
    }

    pub fn predict(&self, z: &[f64]) -> Result<StateVector, DnnError> {
        let f = self.predict_features(&[z.to_vec()])?;
        Ok(StateVector::from_features(&f[0]))
    }

    /// Batch prediction, chunked across worker threads.
    pub fn predict_batch(&self, zs: &[Vec<f64>]) -> Result<Vec<StateVector>, DnnError> {
        let chunks: Vec<&[Vec<f64>]> = zs.chunks(256).collect();
        let parts = crate::par::parallel_map(&chunks, |c| self.predict_features(c));
        let mut out = Vec::with_capacity(zs.len());
        for p in parts {
            out.extend(p?.iter().map(|f| StateVector::from_features(f)));
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            layer_sizes: self.mlp.sizes(),
            layers: self
                .mlp
                .layers
                .iter()
                .map(|l| LayerFile {
                    w: l.w.iter().copied().collect(),
                    b: l.b.to_vec(),
                })
                .collect(),
            input_offsets: self.input_offsets.clone(),
            output_offsets: self.output_offsets.clone(),
            input_scaler: self.input_scaler.clone(),
            output_scaler: self.output_scaler.clone(),
            dropout: self.dropout,
            metadata: self.metadata.clone(),
        };
        serde_json::to_string(&file).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DnnError> {
        let f: ModelFile = serde_json::from_str(text)?;
        let sizes = &f.layer_sizes;
        if sizes.len() < 2 || f.layers.len() != sizes.len() - 1 {
            return Err(DnnError::Model(format!(
                "{} layers for sizes {sizes:?}",
                f.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(f.layers.len());
        for (l, lf) in f.layers.into_iter().enumerate() {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let w = Array2::from_shape_vec((fan_out, fan_in), lf.w)
                .map_err(|e| DnnError::Model(format!("layer {l} weights: {e}")))?;
            if lf.b.len() != fan_out {
                return Err(DnnError::Model(format!(
                    "layer {l} has {} biases, expected {fan_out}",
                    lf.b.len()
                )));
            }
            layers.push(Layer {
                w,
                b: ndarray::Array1::from(lf.b),
            });
        }
        let (m, n) = (sizes[0], sizes[sizes.len() - 1]);
        let dims = [
            (f.input_offsets.len(), m),
            (f.input_scaler.mean.len(), m),
            (f.input_scaler.std.len(), m),
            (f.output_offsets.len(), n),
            (f.output_scaler.mean.len(), n),
            (f.output_scaler.std.len(), n),
        ];
        if dims.iter().any(|(a, b)| a != b) {
            return Err(DnnError::Model("scaler or offset length mismatch".into()));
        }
        if f.input_scaler
            .std
            .iter()
            .chain(&f.output_scaler.std)
            .any(|s| !(*s > 0.0))
        {
            return Err(DnnError::Model("scaler std must be positive".into()));
        }
        Ok(MlpModel {
            mlp: Mlp { layers },
            input_offsets: f.input_offsets,
            output_offsets: f.output_offsets,
            input_scaler: f.input_scaler,
            output_scaler: f.output_scaler,
            dropout: f.dropout,
            metadata: f.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DnnError> {
        Ok(std::fs::write(path, self.to_json())?)
    }

    pub fn load(path: &Path) -> Result<Self, DnnError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct LayerFile {
    /// Row-major `out × in`.
    #[serde(rename = "W")]
    w: Vec<f32>,
    b: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    layer_sizes: Vec<usize>,
    layers: Vec<LayerFile>,
    input_offsets: AngleOffsets,
    output_offsets: AngleOffsets,
    input_scaler: Scaler,
    output_scaler: Scaler,
    dropout: f64,
    metadata: ModelMetadata,
}

#[cfg(test)]
mod tests;
