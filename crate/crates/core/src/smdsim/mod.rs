//! Synchrophasor measurement simulation: true channel extraction plus a
//! two-level error model (instrumentation-channel mixture, then Gaussian TVE).

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cmat::{angle_deg, polar_deg, C64};
use crate::netmodel::NetworkModel;
use crate::phase::Phase;
use crate::powerflow::PowerFlowSolution;
use crate::rng::{substream, StreamRng};

#[derive(Debug, thiserror::Error)]
pub enum SmdError {
    #[error("unknown bus {0}")]
    UnknownBus(String),
    #[error("site {site}: no branch between {a} and {b}")]
    UnknownBranch { site: String, a: String, b: String },
    #[error("site {site}: branch is not incident to the metered bus")]
    NotIncident { site: String },
    #[error("duplicate site {0}")]
    DuplicateSite(String),
    #[error("invalid error model: {0}")]
    InvalidModel(String),
    #[error("measurement data: {0}")]
    Data(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One SMD: voltages at `bus` plus currents on the branch to `branch_to`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Site {
    pub bus: String,
    /// Far end of the metered branch; `None` for a voltage-only device.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_to: Option<String>,
}

impl Site {
    pub fn new(bus: &str, branch_to: &str) -> Self {
        Site {
            bus: bus.into(),
            branch_to: Some(branch_to.into()),
        }
    }

    pub fn voltage_only(bus: &str) -> Self {
        Site {
            bus: bus.into(),
            branch_to: None,
        }
    }

    /// `808-812` style label, metered bus first.
    pub fn label(&self) -> String {
        match &self.branch_to {
            Some(to) => format!("{}-{}", self.bus, to),
            None => self.bus.clone(),
        }
    }

    /// Parse a `bus-bus` or `bus` label.
    pub fn parse(label: &str) -> Self {
        match label.split_once('-') {
            Some((a, b)) => Site::new(a.trim(), b.trim()),
            None => Site::voltage_only(label.trim()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmdPlacement {
    pub sites: Vec<Site>,
}

impl SmdPlacement {
    pub fn from_labels(labels: &[&str]) -> Self {
        SmdPlacement {
            sites: labels.iter().map(|l| Site::parse(l)).collect(),
        }
    }

    pub fn labels(&self) -> Vec<String> {
        self.sites.iter().map(Site::label).collect()
    }

    pub fn resolve(&self, net: &NetworkModel) -> Result<ChannelLayout, SmdError> {
        ChannelLayout::new(net, self)
    }

    /// SHA-256 over the ordered site labels.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.labels().join(",").as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChannelKind {
    #[serde(rename = "V")]
    Voltage,
    #[serde(rename = "I")]
    Current,
}

impl ChannelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelKind::Voltage => "V",
            ChannelKind::Current => "I",
        }
    }
}

/// One phasor channel. Currents are taken flowing from the metered bus into
/// the branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Channel {
    pub site: usize,
    pub kind: ChannelKind,
    pub phase: Phase,
    pub bus: usize,
    pub branch: Option<usize>,
    /// True when the metered bus is the branch's sending end.
    pub at_from: bool,
}

/// Placement resolved against a network: the canonical channel order.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelLayout {
    pub sites: Vec<Site>,
    pub channels: Vec<Channel>,
}

impl ChannelLayout {
    pub fn new(net: &NetworkModel, placement: &SmdPlacement) -> Result<Self, SmdError> {
        let mut seen = BTreeSet::new();
        let mut channels = Vec::new();
        for (si, site) in placement.sites.iter().enumerate() {
            if !seen.insert(site.clone()) {
                return Err(SmdError::DuplicateSite(site.label()));
            }
            let bus = net
                .bus_index(&site.bus)
                .ok_or_else(|| SmdError::UnknownBus(site.bus.clone()))?;
            for p in net.bus(bus).phases.iter() {
                channels.push(Channel {
                    site: si,
                    kind: ChannelKind::Voltage,
                    phase: p,
                    bus,
                    branch: None,
                    at_from: true,
                });
            }
            if let Some(to) = &site.branch_to {
                let other = net
                    .bus_index(to)
                    .ok_or_else(|| SmdError::UnknownBus(to.clone()))?;
                let bi = net
                    .branch_between(bus, other)
                    .ok_or_else(|| SmdError::UnknownBranch {
                        site: site.label(),
                        a: site.bus.clone(),
                        b: to.clone(),
                    })?;
                let br = &net.branches()[bi];
                if br.from != bus && br.to != bus {
                    return Err(SmdError::NotIncident { site: site.label() });
                }
                for p in br.phases.iter() {
                    channels.push(Channel {
                        site: si,
                        kind: ChannelKind::Current,
                        phase: p,
                        bus,
                        branch: Some(bi),
                        at_from: br.from == bus,
                    });
                }
            }
        }
        Ok(ChannelLayout {
            sites: placement.sites.clone(),
            channels,
        })
    }

    pub fn feature_len(&self) -> usize {
        2 * self.channels.len()
    }

    /// Feature labels such as `808-812/V/A/mag`.
    pub fn feature_labels(&self) -> Vec<String> {
        self.channels
            .iter()
            .flat_map(|c| {
                let base = format!(
                    "{}/{}/{}",
                    self.sites[c.site].label(),
                    c.kind.as_str(),
                    c.phase
                );
                [format!("{base}/mag"), format!("{base}/ang")]
            })
            .collect()
    }

    /// Channel indices belonging to each site, in order.
    pub fn site_channels(&self, site: usize) -> impl Iterator<Item = usize> + '_ {
        self.channels
            .iter()
            .enumerate()
            .filter(move |(_, c)| c.site == site)
            .map(|(i, _)| i)
    }
}

/// Exact channel phasors in layout order.
pub fn extract_true_channels(layout: &ChannelLayout, sol: &PowerFlowSolution) -> Vec<C64> {
    layout
        .channels
        .iter()
        .map(|c| {
            let k = c.phase.index();
            match (c.kind, c.branch) {
                (ChannelKind::Voltage, _) => sol.voltages[c.bus][k],
                (ChannelKind::Current, Some(bi)) if c.at_from => sol.flows.from[bi][k],
                (ChannelKind::Current, Some(bi)) => -sol.flows.to[bi][k],
                (ChannelKind::Current, None) => unreachable!("current channel without branch"),
            }
        })
        .collect()
}

/// Feature vector: `(magnitude, angle in degrees)` per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementVector {
    pub features: Vec<f64>,
    /// Channels whose TVE noise was skipped because the phasor was zero.
    pub flagged: Vec<usize>,
}

impl MeasurementVector {
    pub fn from_phasors(phasors: &[C64]) -> Self {
        let features = phasors
            .iter()
            .flat_map(|p| [p.norm(), angle_deg(*p)])
            .collect();
        MeasurementVector {
            features,
            flagged: vec![],
        }
    }

    pub fn phasors(&self) -> Vec<C64> {
        self.features
            .chunks_exact(2)
            .map(|f| polar_deg(f[0], f[1]))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Three-component Gaussian mixture, truncated to `[-bound, bound]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mixture {
    pub weights: [f64; 3],
    pub means: [f64; 3],
    pub stds: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
}

impl Mixture {
    /// Components centered at −b/2, 0, +b/2 with std b/6, truncated at ±b.
    pub fn for_bound(b: f64) -> Self {
        Mixture {
            weights: [0.3, 0.4, 0.3],
            means: [-b / 2.0, 0.0, b / 2.0],
            stds: [b / 6.0; 3],
            bound: Some(b),
        }
    }

    pub fn zero() -> Self {
        Mixture {
            weights: [1.0 / 3.0; 3],
            means: [0.0; 3],
            stds: [0.0; 3],
            bound: None,
        }
    }

    pub fn validate(&self) -> Result<(), SmdError> {
        let sum: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|w| !(*w > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(SmdError::InvalidModel(format!(
                "mixture weights {:?} must be positive and sum to 1",
                self.weights
            )));
        }
        if self.stds.iter().any(|s| !(*s >= 0.0)) || self.means.iter().any(|m| !m.is_finite()) {
            return Err(SmdError::InvalidModel(
                "mixture stds must be ≥ 0 and means finite".into(),
            ));
        }
        if let Some(b) = self.bound {
            if !(b >= 0.0) {
                return Err(SmdError::InvalidModel(format!("bound {b} must be ≥ 0")));
            }
            for k in 0..3 {
                if self.stds[k] == 0.0 && self.means[k].abs() > b {
                    return Err(SmdError::InvalidModel(format!(
                        "component {k} lies entirely outside ±{b}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .map(|(w, m)| w * m)
            .sum()
    }

    /// Draw by rejection over the whole mixture.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let u: f64 = rng.random();
            let k = if u < self.weights[0] {
                0
            } else if u < self.weights[0] + self.weights[1] {
                1
            } else {
                2
            };
            let z: f64 = rng.sample(StandardNormal);
            let x = self.means[k] + self.stds[k] * z;
            match self.bound {
                Some(b) if x.abs() > b => continue,
                _ => return x,
            }
        }
    }
}

/// Instrumentation-channel error: magnitudes as fractions, angles in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmErrorModel {
    pub voltage_magnitude: Mixture,
    pub voltage_angle: Mixture,
    pub current_magnitude: Mixture,
    pub current_angle: Mixture,
}

impl Default for GmmErrorModel {
    fn default() -> Self {
        GmmErrorModel {
            voltage_magnitude: Mixture::for_bound(0.012),
            voltage_angle: Mixture::for_bound(1.0),
            current_magnitude: Mixture::for_bound(0.024),
            current_angle: Mixture::for_bound(2.0),
        }
    }
}

impl GmmErrorModel {
    pub fn zero() -> Self {
        GmmErrorModel {
            voltage_magnitude: Mixture::zero(),
            voltage_angle: Mixture::zero(),
            current_magnitude: Mixture::zero(),
            current_angle: Mixture::zero(),
        }
    }

    pub fn validate(&self) -> Result<(), SmdError> {
        for m in [
            &self.voltage_magnitude,
            &self.voltage_angle,
            &self.current_magnitude,
            &self.current_angle,
        ] {
            m.validate()?;
        }
        Ok(())
    }

    fn for_kind(&self, kind: ChannelKind) -> (&Mixture, &Mixture) {
        match kind {
            ChannelKind::Voltage => (&self.voltage_magnitude, &self.voltage_angle),
            ChannelKind::Current => (&self.current_magnitude, &self.current_angle),
        }
    }
}

/// How the TVE limit maps to the std of each rectangular noise component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaRule {
    /// The 2-D noise radius stays within the limit with probability 0.997:
    /// σ = limit / sqrt(−2 ln 0.003).
    #[default]
    Radial,
    /// σ = limit / 3 per component (the radius then exceeds the limit about
    /// 1.1% of the time).
    PerComponent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TveModel {
    pub tve_limit: f64,
    #[serde(default)]
    pub sigma_rule: SigmaRule,
}

impl Default for TveModel {
    fn default() -> Self {
        TveModel {
            tve_limit: 0.01,
            sigma_rule: SigmaRule::Radial,
        }
    }
}

/// Probability mass of the TVE noise radius inside the limit.
pub const TVE_COVERAGE: f64 = 0.997;

impl TveModel {
    pub fn new(tve_limit: f64) -> Self {
        TveModel {
            tve_limit,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), SmdError> {
        if !(self.tve_limit >= 0.0 && self.tve_limit.is_finite()) {
            return Err(SmdError::InvalidModel(format!(
                "tve_limit {} must be ≥ 0",
                self.tve_limit
            )));
        }
        Ok(())
    }

    /// Std of each rectangular component for a phasor of magnitude `mag`.
    pub fn sigma(&self, mag: f64) -> f64 {
        let divisor = match self.sigma_rule {
            SigmaRule::Radial => (-2.0 * (1.0 - TVE_COVERAGE).ln()).sqrt(),
            SigmaRule::PerComponent => 3.0,
        };
        self.tve_limit / divisor * mag
    }
}

/// Total vector error `|measured − truth| / |truth|`.
pub fn tve(truth: C64, measured: C64) -> f64 {
    (measured - truth).norm() / truth.norm()
}

/// Both error levels; either may be omitted.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorModel {
    #[serde(default)]
    pub level1_gmm: Option<GmmErrorModel>,
    #[serde(default)]
    pub level2_tve: Option<TveModel>,
}

impl ErrorModel {
    pub fn two_level() -> Self {
        ErrorModel {
            level1_gmm: Some(GmmErrorModel::default()),
            level2_tve: Some(TveModel::default()),
        }
    }

    pub fn tve_only() -> Self {
        ErrorModel {
            level1_gmm: None,
            level2_tve: Some(TveModel::default()),
        }
    }

    pub fn noiseless() -> Self {
        ErrorModel::default()
    }

    pub fn validate(&self) -> Result<(), SmdError> {
        if let Some(g) = &self.level1_gmm {
            g.validate()?;
        }
        if let Some(t) = &self.level2_tve {
            t.validate()?;
        }
        Ok(())
    }

    /// Short tag for reports.
    pub fn tag(&self) -> &'static str {
        match (&self.level1_gmm, &self.level2_tve) {
            (Some(_), Some(_)) => "two-level GMM",
            (Some(_), None) => "GMM only",
            (None, Some(_)) => "Gaussian TVE",
            (None, None) => "noiseless",
        }
    }
}

/// Apply the mixture error to the channels of one site.
pub fn apply_instrumentation_error<R: Rng + ?Sized>(
    layout: &ChannelLayout,
    channels: impl IntoIterator<Item = usize>,
    phasors: &mut [C64],
    gmm: &GmmErrorModel,
    rng: &mut R,
) {
    for c in channels {
        let (mag_m, ang_m) = gmm.for_kind(layout.channels[c].kind);
        let em = mag_m.sample(rng);
        let ea = ang_m.sample(rng);
        let p = phasors[c];
        phasors[c] = polar_deg(p.norm() * (1.0 + em), angle_deg(p) + ea);
    }
}

/// Add rectangular Gaussian noise; returns channels skipped for zero magnitude.
pub fn apply_tve<R: Rng + ?Sized>(
    channels: impl IntoIterator<Item = usize>,
    phasors: &mut [C64],
    tve: &TveModel,
    rng: &mut R,
) -> Vec<usize> {
    let mut flagged = vec![];
    for c in channels {
        let p = phasors[c];
        let mag = p.norm();
        if mag == 0.0 {
            flagged.push(c);
            continue;
        }
        let s = tve.sigma(mag);
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        phasors[c] = p + C64::new(s * re, s * im);
    }
    flagged
}

fn site_stream(seed: u64, level: &str, site: &Site, scenario: u64) -> StreamRng {
    substream(seed, &format!("smd/{level}/{}", site.label()), scenario)
}

/// Full measurement of one scenario. Noise for each site comes from a stream
/// keyed by the site label and the scenario index, so a site's features do
/// not depend on which other sites are deployed.
pub fn measure(
    layout: &ChannelLayout,
    sol: &PowerFlowSolution,
    errors: &ErrorModel,
    seed: u64,
    scenario: u64,
) -> MeasurementVector {
    let mut phasors = extract_true_channels(layout, sol);
    let mut flagged = vec![];
    for (si, site) in layout.sites.iter().enumerate() {
        if let Some(g) = &errors.level1_gmm {
            let mut rng = site_stream(seed, "gmm", site, scenario);
            apply_instrumentation_error(
                layout,
                layout.site_channels(si),
                &mut phasors,
                g,
                &mut rng,
            );
        }
        if let Some(t) = &errors.level2_tve {
            let mut rng = site_stream(seed, "tve", site, scenario);
            flagged.extend(apply_tve(
                layout.site_channels(si),
                &mut phasors,
                t,
                &mut rng,
            ));
        }
    }
    if !flagged.is_empty() {
        log::debug!(
            "scenario {scenario}: {} zero-magnitude channels left without TVE noise",
            flagged.len()
        );
    }
    let mut out = MeasurementVector::from_phasors(&phasors);
    out.flagged = flagged;
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct MeasurementRow {
    scenario_id: usize,
    site: String,
    channel: usize,
    kind: ChannelKind,
    phase: Phase,
    mag: f64,
    ang_deg: f64,
}

pub fn write_measurements_csv<W: Write>(
    writer: W,
    layout: &ChannelLayout,
    rows: &[MeasurementVector],
) -> Result<(), SmdError> {
    let mut w = csv::Writer::from_writer(writer);
    for (s, z) in rows.iter().enumerate() {
        let mut within: BTreeMap<usize, usize> = BTreeMap::new();
        for (c, ch) in layout.channels.iter().enumerate() {
            let n = within.entry(ch.site).or_default();
            w.serialize(MeasurementRow {
                scenario_id: s,
                site: layout.sites[ch.site].label(),
                channel: *n,
                kind: ch.kind,
                phase: ch.phase,
                mag: z.features[2 * c],
                ang_deg: z.features[2 * c + 1],
            })?;
            *n += 1;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read measurement rows back into feature vectors in `layout` order.
pub fn read_measurements_csv<R: Read>(
    reader: R,
    layout: &ChannelLayout,
) -> Result<Vec<MeasurementVector>, SmdError> {
    let mut slot: BTreeMap<(String, usize), usize> = BTreeMap::new();
    let mut within: BTreeMap<usize, usize> = BTreeMap::new();
    for (c, ch) in layout.channels.iter().enumerate() {
        let n = within.entry(ch.site).or_default();
        slot.insert((layout.sites[ch.site].label(), *n), c);
        *n += 1;
    }
    let m = layout.channels.len();
    let mut out: Vec<MeasurementVector> = vec![];
    let mut filled: Vec<usize> = vec![];
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    for row in rdr.deserialize() {
        let row: MeasurementRow = row?;
        let &c = slot.get(&(row.site.clone(), row.channel)).ok_or_else(|| {
            SmdError::Data(format!("unknown channel {}#{}", row.site, row.channel))
        })?;
        let ch = &layout.channels[c];
        if ch.kind != row.kind || ch.phase != row.phase {
            return Err(SmdError::Data(format!(
                "channel {}#{} kind/phase mismatch",
                row.site, row.channel
            )));
        }
        while out.len() <= row.scenario_id {
            out.push(MeasurementVector {
                features: vec![f64::NAN; 2 * m],
                flagged: vec![],
            });
            filled.push(0);
        }
        out[row.scenario_id].features[2 * c] = row.mag;
        out[row.scenario_id].features[2 * c + 1] = row.ang_deg;
        filled[row.scenario_id] += 1;
    }
    if let Some(s) = filled.iter().position(|&n| n != m) {
        return Err(SmdError::Data(format!(
            "scenario {s} has {} of {m} channels",
            filled[s]
        )));
    }
    Ok(out)
}
