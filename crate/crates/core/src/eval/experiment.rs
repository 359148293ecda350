//! Generate → solve → place → measure → estimate → evaluate, from one TOML file.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::plot::feature_mae_svg;
use super::{write_features_csv, write_summary_csv, EvalError, MetricsReport};
use crate::dnn::{self, Dataset, FeatureSpec, MlpModel, TrainConfig, TrainHistory};
use crate::loadgen::{
    aggregate_to_transformer, gaussian_variation_with, kde_distributions, read_meter_csv,
    sample_scenarios, synthetic_meters, LoadDistributions, PowerFactorRange, SyntheticMeterConfig,
};
use crate::lse::{self, build_linear_model, ChannelNoise, WlsEstimator};
use crate::netmodel::{load_ieee34_fixture, parse_network, NetworkModel};
use crate::par::parallel_map;
use crate::phase::Phase;
use crate::powerflow::{batch_solve, solve, LoadScenario, SolveOptions, StateVector};
use crate::rng::derive_seed;
use crate::select::{
    heatmap_svg, recommend_placement, spearman_matrix, FeatureKind, PlacementPlan, SelectOptions,
};
use crate::smdsim::{measure, ErrorModel, GmmErrorModel, MeasurementVector, SmdPlacement};

fn default_fraction() -> f64 {
    0.5
}
fn default_sigmas() -> f64 {
    3.0
}
fn default_pf_min() -> f64 {
    0.95
}
fn default_pf_max() -> f64 {
    1.0
}
fn default_confidence() -> f64 {
    0.95
}
fn default_interval() -> f64 {
    1.0
}
fn default_test_samples() -> usize {
    2500
}
fn default_threshold() -> f64 {
    0.9
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// How load scenarios are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LoadConfig {
    /// Truncated Gaussian around nominal: `fraction` of nominal is `sigmas`
    /// standard deviations.
    Gaussian {
        #[serde(default = "default_fraction")]
        fraction: f64,
        #[serde(default = "default_sigmas")]
        sigmas: f64,
        #[serde(default = "default_pf_min")]
        pf_min: f64,
        #[serde(default = "default_pf_max")]
        pf_max: f64,
    },
    /// KDE per load point, fitted to smart-meter readings. Without a meter
    /// file, synthetic readings are generated from the root seed.
    Kde {
        #[serde(default)]
        meters: Option<PathBuf>,
        #[serde(default = "default_interval")]
        interval_hours: f64,
        #[serde(default = "default_confidence")]
        confidence: f64,
        #[serde(default = "default_pf_min")]
        pf_min: f64,
        #[serde(default = "default_pf_max")]
        pf_max: f64,
        #[serde(default)]
        synthetic: SyntheticMeterConfig,
    },
}

impl Default for LoadConfig {
    fn default() -> Self {
        LoadConfig::Gaussian {
            fraction: 0.5,
            sigmas: 3.0,
            pf_min: 0.95,
            pf_max: 1.0,
        }
    }
}

impl LoadConfig {
    pub fn power_factor(&self) -> Result<PowerFactorRange, EvalError> {
        let (lo, hi) = match self {
            LoadConfig::Gaussian { pf_min, pf_max, .. }
            | LoadConfig::Kde { pf_min, pf_max, .. } => (*pf_min, *pf_max),
        };
        Ok(PowerFactorRange::new(lo, hi)?)
    }

    /// Per-load-point distributions; synthetic meter data is seeded from `seed`.
    pub fn distributions(
        &self,
        net: &NetworkModel,
        seed: u64,
    ) -> Result<LoadDistributions, EvalError> {
        match self {
            LoadConfig::Gaussian {
                fraction, sigmas, ..
            } => Ok(gaussian_variation_with(net, *fraction, *sigmas)?),
            LoadConfig::Kde {
                meters,
                interval_hours,
                confidence,
                synthetic,
                ..
            } => {
                let series = match meters {
                    Some(path) => read_meter_csv(
                        fs::File::open(path).map_err(EvalError::io(path))?,
                        *interval_hours,
                    )?,
                    None => synthetic_meters(net, synthetic, derive_seed(seed, "meters"))?,
                };
                Ok(kde_distributions(
                    net,
                    &aggregate_to_transformer(&series)?,
                    *confidence,
                )?)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PlacementSource {
    /// Site labels such as `808-812`.
    Explicit { sites: Vec<String> },
    /// Correlation-cluster recommendation from the training states; `k`
    /// defaults to the cluster count.
    Recommend {
        #[serde(default)]
        k: Option<usize>,
    },
    /// Greedy full-observability placement, padded with high-POI sites up to
    /// `min_sites`.
    GreedyFull {
        #[serde(default)]
        min_sites: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorPreset {
    TwoLevel,
    TveOnly,
    GmmOnly,
    Noiseless,
}

/// A named preset or a full error-model table.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ErrorSpec {
    Preset(ErrorPreset),
    Custom(ErrorModel),
}

impl Default for ErrorSpec {
    fn default() -> Self {
        ErrorSpec::Preset(ErrorPreset::TwoLevel)
    }
}

impl ErrorSpec {
    pub fn model(&self) -> ErrorModel {
        match self {
            ErrorSpec::Preset(ErrorPreset::TwoLevel) => ErrorModel::two_level(),
            ErrorSpec::Preset(ErrorPreset::TveOnly) => ErrorModel::tve_only(),
            ErrorSpec::Preset(ErrorPreset::GmmOnly) => ErrorModel {
                level1_gmm: Some(GmmErrorModel::default()),
                level2_tve: None,
            },
            ErrorSpec::Preset(ErrorPreset::Noiseless) => ErrorModel::noiseless(),
            ErrorSpec::Custom(m) => m.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    #[default]
    Dnn,
    Lse,
    /// Returns the true state; checks the plumbing.
    Oracle,
}

impl Estimator {
    fn tag(self) -> &'static str {
        match self {
            Estimator::Dnn => "DNN",
            Estimator::Lse => "LSE",
            Estimator::Oracle => "oracle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Used in report rows and artifact file names.
    pub name: String,
    #[serde(default)]
    pub estimator: Estimator,
    pub placement: PlacementSource,
    #[serde(default)]
    pub errors: ErrorSpec,
}

/// One experiment. Training scenarios number `train.samples` (validation
/// split included); test scenarios come from a separate seed stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Feeder JSON; the bundled IEEE 34 fixture when absent.
    #[serde(default)]
    pub network: Option<PathBuf>,
    /// Root of every random stream (loads, noise, init, shuffle, dropout).
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub loads: LoadConfig,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    /// Spearman threshold for clustering and recommendation.
    #[serde(default = "default_threshold")]
    pub cluster_threshold: f64,
    #[serde(default)]
    pub train: TrainConfig,
    pub runs: Vec<RunConfig>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, EvalError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| EvalError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, EvalError> {
        Self::from_toml_str(&fs::read_to_string(path).map_err(EvalError::io(path))?)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::Config(m));
        if self.runs.is_empty() {
            return bad("no runs".into());
        }
        let mut names = HashSet::new();
        for r in &self.runs {
            if r.name.is_empty()
                || !r
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
            {
                return bad(format!(
                    "run name {:?} must be non-empty ASCII letters, digits, '-' or '_'",
                    r.name
                ));
            }
            if !names.insert(&r.name) {
                return bad(format!("duplicate run name {}", r.name));
            }
            if let PlacementSource::Explicit { sites } = &r.placement {
                if sites.is_empty() {
                    return bad(format!("run {}: empty explicit placement", r.name));
                }
            }
            r.errors.model().validate()?;
        }
        if self.test_samples == 0 {
            return bad("test_samples must be positive".into());
        }
        if !(self.cluster_threshold > 0.0 && self.cluster_threshold <= 1.0) {
            return bad(format!(
                "cluster_threshold {} not in (0, 1]",
                self.cluster_threshold
            ));
        }
        self.train.validate()?;
        self.loads.power_factor()?;
        if let Some(p) = &self.network {
            if !p.exists() {
                return bad(format!("network file {} does not exist", p.display()));
            }
        }
        if let LoadConfig::Kde {
            meters: Some(p), ..
        } = &self.loads
        {
            if !p.exists() {
                return bad(format!("meter file {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    pub fn load_network(&self) -> Result<NetworkModel, EvalError> {
        match &self.network {
            Some(p) => Ok(parse_network(
                &fs::read_to_string(p).map_err(EvalError::io(p))?,
            )?),
            None => Ok(load_ieee34_fixture()),
        }
    }
}

/// Case (a)–(d) placements of the two-cluster study on IEEE 34.
pub fn placement_cases() -> Vec<(&'static str, Vec<&'static str>)> {
    vec![
        ("case-a", vec!["808-812"]),
        ("case-b", vec!["808-812", "830-854"]),
        ("case-c", vec!["808-812", "888-890"]),
        ("case-d", vec!["888-890"]),
    ]
}

/// `base` with its runs replaced by the four placement cases, all DNN with
/// the two-level error model.
pub fn placement_cases_config(base: &ExperimentConfig) -> ExperimentConfig {
    let runs = placement_cases()
        .into_iter()
        .map(|(name, sites)| RunConfig {
            name: name.into(),
            estimator: Estimator::Dnn,
            placement: PlacementSource::Explicit {
                sites: sites.into_iter().map(String::from).collect(),
            },
            errors: ErrorSpec::Preset(ErrorPreset::TwoLevel),
        })
        .collect();
    ExperimentConfig {
        runs,
        ..base.clone()
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub placement: SmdPlacement,
    pub model: Option<MlpModel>,
    pub history: Option<TrainHistory>,
    pub estimates: Vec<StateVector>,
    pub seconds: f64,
}

/// Wall-clock seconds per stage, for logs; never written to reports.
#[derive(Clone, Debug, Default)]
pub struct StageTiming {
    pub stages: Vec<(String, f64)>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub runs: Vec<RunOutput>,
    /// Recommendation plans by requested SMD count.
    pub recommendations: BTreeMap<Option<usize>, PlacementPlan>,
    pub test_truth: Vec<StateVector>,
    pub timing: StageTiming,
}

impl ExperimentOutput {
    pub fn reports(&self) -> Vec<MetricsReport> {
        self.runs.iter().map(|r| r.report.clone()).collect()
    }

    pub fn run(&self, name: &str) -> Option<&RunOutput> {
        self.runs.iter().find(|r| r.report.run == name)
    }
}

pub(super) fn leakage_guard(
    seed: u64,
    train: &[LoadScenario],
    test: &[LoadScenario],
) -> Result<(), EvalError> {
    let (a, b) = (
        derive_seed(seed, "loads/train"),
        derive_seed(seed, "loads/test"),
    );
    if a == b {
        return Err(EvalError::Leakage(format!(
            "train and test load streams share root {a}"
        )));
    }
    let key = |s: &LoadScenario| {
        s.p_kw
            .iter()
            .chain(&s.q_kvar)
            .map(|v| v.to_bits())
            .collect::<Vec<u64>>()
    };
    let seen: HashSet<Vec<u64>> = train.iter().map(key).collect();
    if let Some(i) = test.iter().position(|s| seen.contains(&key(s))) {
        return Err(EvalError::Leakage(format!(
            "test scenario {i} also appears in the training set"
        )));
    }
    Ok(())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), EvalError> {
    fs::write(path, bytes).map_err(EvalError::io(path))
}

struct Stopwatch {
    timing: StageTiming,
    last: Instant,
}

impl Stopwatch {
    fn lap(&mut self, stage: impl Into<String>) {
        let stage = stage.into();
        let s = self.last.elapsed().as_secs_f64();
        log::info!("{stage}: {s:.1} s");
        self.timing.stages.push((stage, s));
        self.last = Instant::now();
    }
}

fn measure_all(
    layout: &crate::smdsim::ChannelLayout,
    sols: &[crate::powerflow::PowerFlowSolution],
    errors: &ErrorModel,
    seed: u64,
) -> Vec<MeasurementVector> {
    let indexed: Vec<(usize, &crate::powerflow::PowerFlowSolution)> =
        sols.iter().enumerate().collect();
    parallel_map(&indexed, |&(i, s)| {
        measure(layout, s, errors, seed, i as u64)
    })
}

/// Run every configured estimator on shared training and test data and write
/// `summary.csv`, `features.csv`, `placements.json`, per-run model and
/// training-history files, the phase-A correlation heatmap and the phase-A
/// per-feature MAE plot into `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, EvalError> {
    cfg.validate()?;
    let mut clock = Stopwatch {
        timing: StageTiming::default(),
        last: Instant::now(),
    };
    let net = cfg.load_network()?;
    fs::create_dir_all(&cfg.out_dir).map_err(EvalError::io(&cfg.out_dir))?;

    let dist = cfg.loads.distributions(&net, cfg.seed)?;
    let pf = cfg.loads.power_factor()?;
    let train_sc = sample_scenarios(
        &dist,
        pf,
        cfg.train.samples,
        derive_seed(cfg.seed, "loads/train"),
    );
    let test_sc = sample_scenarios(
        &dist,
        pf,
        cfg.test_samples,
        derive_seed(cfg.seed, "loads/test"),
    );
    leakage_guard(cfg.seed, &train_sc, &test_sc)?;
    clock.lap("generate");

    let opts = SolveOptions::default();
    let train_sol = batch_solve(&net, &train_sc, &opts)?;
    let test_sol = batch_solve(&net, &test_sc, &opts)?;
    let train_states: Vec<StateVector> = train_sol.iter().map(|s| s.state.clone()).collect();
    let test_truth: Vec<StateVector> = test_sol.iter().map(|s| s.state.clone()).collect();
    clock.lap("solve");

    match spearman_matrix(&net, &train_states, FeatureKind::Angle, Some(Phase::A)) {
        Ok(corr) => write_file(
            &cfg.out_dir.join("correlation_phase_a.svg"),
            heatmap_svg(
                &corr,
                &format!(
                    "{}: Spearman correlation of phase-A voltage angles",
                    cfg.name
                ),
            ),
        )?,
        Err(e) => log::warn!("skipping correlation heatmap: {e}"),
    }

    let noise_train = derive_seed(cfg.seed, "noise/train");
    let noise_test = derive_seed(cfg.seed, "noise/test");
    let train_targets: Vec<Vec<f64>> = train_states.iter().map(StateVector::to_features).collect();
    let mut recommendations: BTreeMap<Option<usize>, PlacementPlan> = BTreeMap::new();
    let mut runs = Vec::with_capacity(cfg.runs.len());
    let mut placements: BTreeMap<String, Vec<String>> = BTreeMap::new();

    for run in &cfg.runs {
        let started = Instant::now();
        let placement = match &run.placement {
            PlacementSource::Explicit { sites } => {
                SmdPlacement::from_labels(&sites.iter().map(String::as_str).collect::<Vec<_>>())
            }
            PlacementSource::Recommend { k } => {
                if !recommendations.contains_key(k) {
                    let opts = SelectOptions {
                        threshold: cfg.cluster_threshold,
                        k: *k,
                        ..Default::default()
                    };
                    recommendations.insert(*k, recommend_placement(&net, &train_states, opts)?);
                }
                recommendations[k].placement.clone()
            }
            PlacementSource::GreedyFull { min_sites } => lse::pad_placement(
                &net,
                &lse::greedy_observability_placement(&net)?,
                *min_sites,
            )?,
        };
        let layout = placement.resolve(&net)?;
        let errors = run.errors.model();
        let z_test = measure_all(&layout, &test_sol, &errors, noise_test);

        let (estimates, model, history) = match run.estimator {
            Estimator::Oracle => (test_truth.clone(), None, None),
            Estimator::Lse => {
                let nominal = solve(&net, &LoadScenario::nominal(&net), &opts)?;
                let tve = errors.level2_tve.unwrap_or_default();
                let noise = ChannelNoise::from_solution(&tve, &layout, &nominal);
                let lin = build_linear_model(&net, &layout, &noise)?;
                let wls = WlsEstimator::new(&net, &lin)?;
                let est = parallel_map(&z_test, |z| wls.estimate(&lin, &z.phasors()));
                (est.into_iter().collect::<Result<Vec<_>, _>>()?, None, None)
            }
            Estimator::Dnn => {
                let z_train = measure_all(&layout, &train_sol, &errors, noise_train);
                let data = Dataset {
                    inputs: z_train.into_iter().map(|z| z.features).collect(),
                    targets: train_targets.clone(),
                };
                let tc = TrainConfig {
                    seed: derive_seed(cfg.seed, "dnn"),
                    ..cfg.train.clone()
                };
                let (mut model, history) =
                    dnn::train(&data, &FeatureSpec::for_estimation(&net, &layout), &tc)?;
                model.metadata.net_hash = net.content_hash();
                model.metadata.placement_hash = placement.content_hash();
                model.metadata.sites = placement.labels();
                let inputs: Vec<Vec<f64>> = z_test.iter().map(|z| z.features.clone()).collect();
                let est = model.predict_batch(&inputs)?;
                model.save(&cfg.out_dir.join(format!("model_{}.json", run.name)))?;
                write_history(
                    &cfg.out_dir.join(format!("history_{}.csv", run.name)),
                    &history,
                )?;
                (est, Some(model), Some(history))
            }
        };
        let report = MetricsReport::compute(
            &net,
            &run.name,
            run.estimator.tag(),
            errors.tag(),
            placement.sites.len(),
            &test_truth,
            &estimates,
        )?;
        log::info!(
            "{}: {} with {} SMDs, phase MAE {:.4} deg, magnitude MAPE {:.4} %",
            run.name,
            report.method,
            report.smd_count,
            report.phase_mae_deg,
            report.magnitude_mape_pct
        );
        placements.insert(run.name.clone(), placement.labels());
        runs.push(RunOutput {
            report,
            placement,
            model,
            history,
            estimates,
            seconds: started.elapsed().as_secs_f64(),
        });
        clock.lap(format!("run {}", run.name));
    }

    let reports: Vec<MetricsReport> = runs.iter().map(|r| r.report.clone()).collect();
    let mut buf = vec![];
    write_summary_csv(&mut buf, &reports)?;
    write_file(&cfg.out_dir.join("summary.csv"), &buf)?;
    buf.clear();
    write_features_csv(&mut buf, &reports)?;
    write_file(&cfg.out_dir.join("features.csv"), &buf)?;
    write_file(
        &cfg.out_dir.join("placements.json"),
        serde_json::to_string_pretty(&placements).expect("string map serializes"),
    )?;
    if !recommendations.is_empty() {
        let plans: BTreeMap<String, &PlacementPlan> = recommendations
            .iter()
            .map(|(k, p)| (k.map_or("clusters".to_string(), |k| k.to_string()), p))
            .collect();
        write_file(
            &cfg.out_dir.join("recommendation.json"),
            serde_json::to_string_pretty(&plans).expect("plan serializes"),
        )?;
    }
    write_file(
        &cfg.out_dir.join("phase_mae_phase_a.svg"),
        feature_mae_svg(
            &reports,
            Phase::A,
            &format!("{}: phase-A voltage angle MAE", cfg.name),
        ),
    )?;
    clock.lap("report");
    Ok(ExperimentOutput {
        runs,
        recommendations,
        test_truth,
        timing: clock.timing,
    })
}

fn write_history(path: &Path, h: &TrainHistory) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(vec![]);
    w.write_record(["epoch", "train_loss", "val_loss", "learning_rate"])?;
    for (e, ((t, v), lr)) in h
        .train_loss
        .iter()
        .zip(&h.val_loss)
        .zip(&h.learning_rate)
        .enumerate()
    {
        w.write_record([e.to_string(), t.to_string(), v.to_string(), lr.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Io {
        path: path.into(),
        source: e.into_error(),
    })?;
    write_file(path, bytes)
}
