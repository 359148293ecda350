//! Load distributions and Monte Carlo load scenarios.

mod kde;
mod meters;

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::netmodel::NetworkModel;
use crate::phase::Phase;
use crate::powerflow::LoadScenario;
use crate::rng::substream;

pub use kde::{fit_kde, percentile, silverman_bandwidth, Kde};
pub use meters::{
    aggregate_to_transformer, energy_to_power, load_point_label, read_meter_csv, synthetic_meters,
    write_meter_csv, MeterReadingSeries, SyntheticMeterConfig, TransformerSeries,
};

#[derive(Debug, thiserror::Error)]
pub enum LoadGenError {
    #[error("interval length must be positive, got {0} h")]
    InvalidInterval(f64),
    #[error("meter {0} is not aligned with the other series")]
    Misaligned(String),
    #[error("samples have zero variance")]
    Degenerate,
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { got: usize, need: usize },
    #[error("no meter data for transformer {0}")]
    MissingTransformer(String),
    #[error("{0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Marginal distribution of active power at one load point, kW.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LoadDistribution {
    Kde(Kde),
    Gaussian {
        mean: f64,
        std: f64,
        lower: f64,
        upper: f64,
    },
}

impl LoadDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            LoadDistribution::Kde(k) => k.sample(rng),
            LoadDistribution::Gaussian {
                mean,
                std,
                lower,
                upper,
            } => truncated_normal(rng, *mean, *std, *lower, *upper),
        }
    }
}

/// Rejection sampler; a zero std or collapsed bounds returns the mean clamped
/// to the bounds.
pub fn truncated_normal<R: Rng + ?Sized>(
    rng: &mut R,
    mean: f64,
    std: f64,
    lower: f64,
    upper: f64,
) -> f64 {
    if std <= 0.0 || lower >= upper {
        return mean.clamp(lower, upper.max(lower));
    }
    loop {
        let z: f64 = rng.sample(StandardNormal);
        let x = mean + std * z;
        if (lower..=upper).contains(&x) {
            return x;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerFactorRange {
    pub lower: f64,
    pub upper: f64,
}

impl Default for PowerFactorRange {
    fn default() -> Self {
        PowerFactorRange {
            lower: 0.95,
            upper: 1.0,
        }
    }
}

impl PowerFactorRange {
    pub fn new(lower: f64, upper: f64) -> Result<Self, LoadGenError> {
        if !(lower > 0.0 && lower <= upper && upper <= 1.0) {
            return Err(LoadGenError::InvalidParameter(format!(
                "power factor range [{lower}, {upper}]"
            )));
        }
        Ok(PowerFactorRange { lower, upper })
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lower == self.upper {
            self.lower
        } else {
            rng.random_range(self.lower..=self.upper)
        }
    }
}

/// Reactive power for active power `p` at power factor `pf` (lagging).
pub fn reactive_from_pf(p: f64, pf: f64) -> f64 {
    p * pf.acos().tan()
}

/// One distribution per load point, in [`NetworkModel::load_points`] order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadDistributions {
    pub points: Vec<LoadDistribution>,
}

/// Gaussian variation around nominal: `fraction` of nominal maps to `sigmas`
/// standard deviations, and draws are truncated at ±`fraction`.
pub fn gaussian_variation_with(
    net: &NetworkModel,
    fraction: f64,
    sigmas: f64,
) -> Result<LoadDistributions, LoadGenError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(LoadGenError::InvalidParameter(format!(
            "variation fraction {fraction} not in (0, 1)"
        )));
    }
    if !(sigmas > 0.0) {
        return Err(LoadGenError::InvalidParameter(format!(
            "sigma count {sigmas} must be positive"
        )));
    }
    let points = net
        .load_points()
        .iter()
        .map(|lp| {
            let m = lp.p_kw;
            let (a, b) = (m * (1.0 - fraction), m * (1.0 + fraction));
            LoadDistribution::Gaussian {
                mean: m,
                std: fraction * m.abs() / sigmas,
                lower: a.min(b),
                upper: a.max(b),
            }
        })
        .collect();
    Ok(LoadDistributions { points })
}

pub fn gaussian_variation(
    net: &NetworkModel,
    fraction: f64,
) -> Result<LoadDistributions, LoadGenError> {
    gaussian_variation_with(net, fraction, 3.0)
}

/// Fit a KDE per load point from transformer series keyed by
/// [`load_point_label`].
pub fn kde_distributions(
    net: &NetworkModel,
    transformers: &BTreeMap<String, TransformerSeries>,
    confidence: f64,
) -> Result<LoadDistributions, LoadGenError> {
    let points = (0..net.load_points().len())
        .map(|i| {
            let label = load_point_label(net, i);
            let series = transformers
                .get(&label)
                .ok_or(LoadGenError::MissingTransformer(label))?;
            Ok(LoadDistribution::Kde(fit_kde(
                &series.power_kw,
                confidence,
            )?))
        })
        .collect::<Result<_, LoadGenError>>()?;
    Ok(LoadDistributions { points })
}

/// Draw `n` scenarios. Scenario `i` uses its own substream, so any prefix or
/// subset is reproducible in isolation.
pub fn sample_scenarios(
    dist: &LoadDistributions,
    pf: PowerFactorRange,
    n: usize,
    seed: u64,
) -> Vec<LoadScenario> {
    (0..n)
        .map(|i| sample_scenario(dist, pf, seed, i as u64))
        .collect()
}

pub fn sample_scenario(
    dist: &LoadDistributions,
    pf: PowerFactorRange,
    seed: u64,
    index: u64,
) -> LoadScenario {
    let mut rng = substream(seed, "scenario", index);
    let mut p_kw = Vec::with_capacity(dist.points.len());
    let mut q_kvar = Vec::with_capacity(dist.points.len());
    for d in &dist.points {
        let p = d.sample(&mut rng);
        let f = pf.sample(&mut rng);
        p_kw.push(p);
        q_kvar.push(reactive_from_pf(p, f));
    }
    LoadScenario {
        p_kw,
        q_kvar,
        taps: None,
        capacitors_on: None,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ScenarioRow {
    scenario_id: usize,
    bus: String,
    phase: Phase,
    p_kw: f64,
    q_kvar: f64,
}

pub fn write_scenarios_csv<W: Write>(
    writer: W,
    net: &NetworkModel,
    scenarios: &[LoadScenario],
) -> Result<(), LoadGenError> {
    let mut w = csv::Writer::from_writer(writer);
    for (s, sc) in scenarios.iter().enumerate() {
        for (i, lp) in net.load_points().iter().enumerate() {
            w.serialize(ScenarioRow {
                scenario_id: s,
                bus: net.bus_id(lp.bus).to_string(),
                phase: lp.phase,
                p_kw: sc.p_kw[i],
                q_kvar: sc.q_kvar[i],
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_scenarios_csv<R: Read>(
    reader: R,
    net: &NetworkModel,
) -> Result<Vec<LoadScenario>, LoadGenError> {
    let index: BTreeMap<(usize, Phase), usize> = net
        .load_points()
        .iter()
        .enumerate()
        .map(|(i, lp)| ((lp.bus, lp.phase), i))
        .collect();
    let n = index.len();
    let mut out: Vec<LoadScenario> = Vec::new();
    let mut seen: Vec<Vec<bool>> = Vec::new();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    for row in rdr.deserialize() {
        let row: ScenarioRow = row?;
        let bus = net
            .bus_index(&row.bus)
            .ok_or_else(|| LoadGenError::InvalidParameter(format!("unknown bus {}", row.bus)))?;
        let &i = index.get(&(bus, row.phase)).ok_or_else(|| {
            LoadGenError::InvalidParameter(format!("{}.{} is not a load point", row.bus, row.phase))
        })?;
        while out.len() <= row.scenario_id {
            out.push(LoadScenario {
                p_kw: vec![0.0; n],
                q_kvar: vec![0.0; n],
                taps: None,
                capacitors_on: None,
            });
            seen.push(vec![false; n]);
        }
        out[row.scenario_id].p_kw[i] = row.p_kw;
        out[row.scenario_id].q_kvar[i] = row.q_kvar;
        seen[row.scenario_id][i] = true;
    }
    if let Some(s) = seen.iter().position(|v| v.iter().any(|x| !x)) {
        return Err(LoadGenError::InvalidParameter(format!(
            "scenario {s} is missing load points"
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
