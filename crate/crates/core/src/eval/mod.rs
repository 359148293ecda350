//! Accuracy metrics, experiment orchestration and report files.

mod experiment;
mod plot;

use std::io::{Read, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dnn::DnnError;
use crate::loadgen::LoadGenError;
use crate::lse::LseError;
use crate::netmodel::{NetworkError, NetworkModel};
use crate::phase::Phase;
use crate::powerflow::{BatchSolveError, PowerFlowError, StateVector};
use crate::select::SelectError;
use crate::smdsim::SmdError;

pub use experiment::{
    placement_cases, placement_cases_config, run_experiment, ErrorPreset, ErrorSpec, Estimator,
    ExperimentConfig, ExperimentOutput, LoadConfig, PlacementSource, RunConfig, RunOutput,
    StageTiming,
};
pub use plot::feature_mae_svg;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("estimate/truth mismatch: {0}")]
    Mismatch(String),
    #[error("scenario {scenario}: true magnitude of feature {feature} is zero")]
    ZeroMagnitude { scenario: usize, feature: usize },
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("train/test leakage: {0}")]
    Leakage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("report csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("network: {0}")]
    Network(#[from] NetworkError),
    #[error("load generation: {0}")]
    LoadGen(#[from] LoadGenError),
    #[error("power flow: {0}")]
    PowerFlow(#[from] BatchSolveError),
    #[error("power flow: {0}")]
    Solve(#[from] PowerFlowError),
    #[error("measurement: {0}")]
    Smd(#[from] SmdError),
    #[error("placement: {0}")]
    Select(#[from] SelectError),
    #[error("training: {0}")]
    Dnn(#[from] DnnError),
    #[error("linear estimation: {0}")]
    Lse(#[from] LseError),
}

impl EvalError {
    /// Non-convergence, non-finite values or singular systems, as opposed to
    /// bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            EvalError::PowerFlow(e) => e.failures.iter().any(|(_, f)| numerical_pf(f)),
            EvalError::Solve(f) => numerical_pf(f),
            EvalError::Dnn(DnnError::NonFiniteLoss { .. }) => true,
            EvalError::Lse(LseError::SingularBranch(_) | LseError::NonFinite(_)) => true,
            _ => false,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> EvalError {
        let path = path.into();
        move |source| EvalError::Io { path, source }
    }
}

fn numerical_pf(e: &PowerFlowError) -> bool {
    matches!(
        e,
        PowerFlowError::NonConvergence { .. }
            | PowerFlowError::Collapse { .. }
            | PowerFlowError::Singular
    )
}

/// Absolute angle difference in degrees, taking the shorter way round.
pub fn wrapped_abs_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

fn check_aligned(truth: &[StateVector], est: &[StateVector]) -> Result<usize, EvalError> {
    if truth.len() != est.len() {
        return Err(EvalError::Mismatch(format!(
            "{} true states but {} estimates",
            truth.len(),
            est.len()
        )));
    }
    let n = truth.first().map_or(0, StateVector::len);
    for (s, (t, e)) in truth.iter().zip(est).enumerate() {
        if t.len() != n || e.len() != n || t.vang_deg.len() != n || e.vang_deg.len() != n {
            return Err(EvalError::Mismatch(format!(
                "scenario {s}: {} true and {} estimated features, expected {n}",
                t.len(),
                e.len()
            )));
        }
    }
    Ok(n)
}

/// Per-feature phase MAE (degrees) and magnitude MAPE (percent), averaged over
/// scenarios.
pub fn per_feature_errors(
    truth: &[StateVector],
    est: &[StateVector],
) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    let n = check_aligned(truth, est)?;
    let mut mae = vec![0.0; n];
    let mut mape = vec![0.0; n];
    for (s, (t, e)) in truth.iter().zip(est).enumerate() {
        for j in 0..n {
            if t.vmag_pu[j] == 0.0 {
                return Err(EvalError::ZeroMagnitude {
                    scenario: s,
                    feature: j,
                });
            }
            mae[j] += wrapped_abs_diff(e.vang_deg[j], t.vang_deg[j]);
            mape[j] += 100.0 * (e.vmag_pu[j] - t.vmag_pu[j]).abs() / t.vmag_pu[j].abs();
        }
    }
    let k = truth.len().max(1) as f64;
    mae.iter_mut().chain(mape.iter_mut()).for_each(|v| *v /= k);
    Ok((mae, mape))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Mean over scenarios and angle features of the wrap-aware angle error.
pub fn phase_mae(truth: &[StateVector], est: &[StateVector]) -> Result<f64, EvalError> {
    let n = check_aligned(truth, est)?;
    let total: f64 = truth
        .iter()
        .zip(est)
        .flat_map(|(t, e)| (0..n).map(move |j| wrapped_abs_diff(e.vang_deg[j], t.vang_deg[j])))
        .sum();
    Ok(total / (truth.len() * n).max(1) as f64)
}

/// Mean over scenarios and magnitude features of `100·|v̂ − v|/v`.
pub fn magnitude_mape(truth: &[StateVector], est: &[StateVector]) -> Result<f64, EvalError> {
    let (_, mape) = per_feature_errors(truth, est)?;
    Ok(mean(&mape))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMetrics {
    pub bus: String,
    pub phase: Phase,
    pub phase_mae_deg: f64,
    pub magnitude_mape_pct: f64,
}

/// One estimator run, as one row of the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub run: String,
    pub method: String,
    pub error_model: String,
    pub smd_count: usize,
    pub scenarios: usize,
    /// Means of the per-feature columns.
    pub phase_mae_deg: f64,
    pub magnitude_mape_pct: f64,
    pub features: Vec<FeatureMetrics>,
}

impl MetricsReport {
    pub fn compute(
        net: &NetworkModel,
        run: &str,
        method: &str,
        error_model: &str,
        smd_count: usize,
        truth: &[StateVector],
        est: &[StateVector],
    ) -> Result<Self, EvalError> {
        let (mae, mape) = per_feature_errors(truth, est)?;
        if mae.len() != net.phase_count() {
            return Err(EvalError::Mismatch(format!(
                "{} state features for a network with {} bus-phases",
                mae.len(),
                net.phase_count()
            )));
        }
        let features = net
            .state_labels()
            .iter()
            .zip(mae.iter().zip(&mape))
            .map(|(&(bus, phase), (&a, &m))| FeatureMetrics {
                bus: net.bus_id(bus).to_string(),
                phase,
                phase_mae_deg: a,
                magnitude_mape_pct: m,
            })
            .collect();
        Ok(MetricsReport {
            run: run.into(),
            method: method.into(),
            error_model: error_model.into(),
            smd_count,
            scenarios: truth.len(),
            phase_mae_deg: mean(&mae),
            magnitude_mape_pct: mean(&mape),
            features,
        })
    }

    /// Mean per-feature phase MAE over the features selected by `keep`.
    pub fn phase_mae_where(&self, keep: impl Fn(&FeatureMetrics) -> bool) -> f64 {
        let v: Vec<f64> = self
            .features
            .iter()
            .filter(|f| keep(f))
            .map(|f| f.phase_mae_deg)
            .collect();
        mean(&v)
    }

    pub fn phase_mae_on_buses(&self, buses: &[&str]) -> f64 {
        self.phase_mae_where(|f| buses.contains(&f.bus.as_str()))
    }

    pub fn phase_mae_off_buses(&self, buses: &[&str]) -> f64 {
        self.phase_mae_where(|f| !buses.contains(&f.bus.as_str()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SummaryRow {
    run: String,
    method: String,
    smd_count: usize,
    error_model: String,
    scenarios: usize,
    phase_mae_deg: f64,
    magnitude_mape_pct: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureRow {
    run: String,
    bus: String,
    phase: Phase,
    phase_mae_deg: f64,
    magnitude_mape_pct: f64,
}

/// Header of the summary report.
pub const SUMMARY_HEADER: &str =
    "run,method,smd_count,error_model,scenarios,phase_mae_deg,magnitude_mape_pct";
/// Header of the per-feature report.
pub const FEATURE_HEADER: &str = "run,bus,phase,phase_mae_deg,magnitude_mape_pct";

pub fn write_summary_csv<W: Write>(writer: W, reports: &[MetricsReport]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in reports {
        w.serialize(SummaryRow {
            run: r.run.clone(),
            method: r.method.clone(),
            smd_count: r.smd_count,
            error_model: r.error_model.clone(),
            scenarios: r.scenarios,
            phase_mae_deg: r.phase_mae_deg,
            magnitude_mape_pct: r.magnitude_mape_pct,
        })?;
    }
    w.flush().map_err(EvalError::io("summary"))?;
    Ok(())
}

pub fn write_features_csv<W: Write>(writer: W, reports: &[MetricsReport]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in reports {
        for f in &r.features {
            w.serialize(FeatureRow {
                run: r.run.clone(),
                bus: f.bus.clone(),
                phase: f.phase,
                phase_mae_deg: f.phase_mae_deg,
                magnitude_mape_pct: f.magnitude_mape_pct,
            })?;
        }
    }
    w.flush().map_err(EvalError::io("features"))?;
    Ok(())
}

/// Rebuild reports from a summary and a per-feature file.
pub fn read_reports_csv<R1: Read, R2: Read>(
    summary: R1,
    features: R2,
) -> Result<Vec<MetricsReport>, EvalError> {
    let mut reports: Vec<MetricsReport> = csv::Reader::from_reader(summary)
        .deserialize::<SummaryRow>()
        .map(|row| {
            let r = row?;
            Ok(MetricsReport {
                run: r.run,
                method: r.method,
                error_model: r.error_model,
                smd_count: r.smd_count,
                scenarios: r.scenarios,
                phase_mae_deg: r.phase_mae_deg,
                magnitude_mape_pct: r.magnitude_mape_pct,
                features: vec![],
            })
        })
        .collect::<Result<_, EvalError>>()?;
    for row in csv::Reader::from_reader(features).deserialize::<FeatureRow>() {
        let f = row?;
        let report = reports
            .iter_mut()
            .find(|r| r.run == f.run)
            .ok_or_else(|| EvalError::Mismatch(format!("feature row for unknown run {}", f.run)))?;
        report.features.push(FeatureMetrics {
            bus: f.bus,
            phase: f.phase,
            phase_mae_deg: f.phase_mae_deg,
            magnitude_mape_pct: f.magnitude_mape_pct,
        });
    }
    Ok(reports)
}

#[derive(Debug, Serialize, Deserialize)]
struct StateRow {
    scenario_id: usize,
    bus: String,
    phase: Phase,
    vmag_pu: f64,
    vang_deg: f64,
}

/// Long-format state file: one row per scenario and bus-phase.
pub fn write_states_csv<W: Write>(
    writer: W,
    net: &NetworkModel,
    states: &[StateVector],
) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    for (s, x) in states.iter().enumerate() {
        if x.len() != net.phase_count() {
            return Err(EvalError::Mismatch(format!(
                "state {s} has {} features, expected {}",
                x.len(),
                net.phase_count()
            )));
        }
        for (j, &(bus, phase)) in net.state_labels().iter().enumerate() {
            w.serialize(StateRow {
                scenario_id: s,
                bus: net.bus_id(bus).to_string(),
                phase,
                vmag_pu: x.vmag_pu[j],
                vang_deg: x.vang_deg[j],
            })?;
        }
    }
    w.flush().map_err(EvalError::io("states"))?;
    Ok(())
}

/// Inverse of [`write_states_csv`]; every scenario must list every bus-phase.
pub fn read_states_csv<R: Read>(
    reader: R,
    net: &NetworkModel,
) -> Result<Vec<StateVector>, EvalError> {
    let n = net.phase_count();
    let mut states: Vec<StateVector> = vec![];
    let mut seen: Vec<Vec<bool>> = vec![];
    for row in csv::Reader::from_reader(reader).deserialize::<StateRow>() {
        let r = row?;
        let bus = net
            .bus_index(&r.bus)
            .ok_or_else(|| EvalError::Mismatch(format!("unknown bus {}", r.bus)))?;
        let j = net.state_index(bus, r.phase).ok_or_else(|| {
            EvalError::Mismatch(format!("bus {} has no phase {}", r.bus, r.phase))
        })?;
        while states.len() <= r.scenario_id {
            states.push(StateVector {
                vmag_pu: vec![0.0; n],
                vang_deg: vec![0.0; n],
            });
            seen.push(vec![false; n]);
        }
        states[r.scenario_id].vmag_pu[j] = r.vmag_pu;
        states[r.scenario_id].vang_deg[j] = r.vang_deg;
        seen[r.scenario_id][j] = true;
    }
    if let Some(s) = seen.iter().position(|row| row.iter().any(|x| !x)) {
        return Err(EvalError::Mismatch(format!(
            "scenario {s} is missing bus-phases"
        )));
    }
    Ok(states)
}
