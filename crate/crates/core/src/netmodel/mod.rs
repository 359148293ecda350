//! Radial unbalanced three-phase feeder model.
//!
//! [`NetworkData`] is the plain serde form of the JSON document; [`NetworkModel`]
//! is the validated, immutable model with the derived tree topology and the
//! canonical state ordering (buses in document order, phases A, B, C).

mod ieee34;

use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cmat::{CMat3, C64};
use crate::phase::{Phase, PhaseMask};

pub use ieee34::{load_ieee34_fixture, IEEE34_JSON};

pub const DEFAULT_TAP_STEP: f64 = 0.00625;
pub const MAX_TAP: i32 = 16;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("duplicate bus id `{0}`")]
    DuplicateBus(String),
    #[error("{element} references undeclared bus `{bus}`")]
    DanglingBus { element: String, bus: String },
    #[error("expected exactly one source bus, found {0}")]
    SourceCount(usize),
    #[error("network is not radial: {0}")]
    NotRadial(String),
    #[error("phase mismatch on {element}: {detail}")]
    PhaseMismatch { element: String, detail: String },
    #[error("singular series impedance on {element}")]
    SingularImpedance { element: String },
    #[error("invalid {element}: {detail}")]
    Invalid { element: String, detail: String },
}

fn default_base_mva() -> f64 {
    2.5
}
fn default_length() -> f64 {
    1.0
}
fn default_step() -> f64 {
    DEFAULT_TAP_STEP
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub voltage_pu: [f64; 3],
    pub angle_deg: [f64; 3],
}

impl SourceSpec {
    pub fn phasors(&self) -> [C64; 3] {
        std::array::from_fn(|k| crate::cmat::polar_deg(self.voltage_pu[k], self.angle_deg[k]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub id: String,
    pub phases: PhaseMask,
    /// Line-to-line base voltage, kV.
    pub base_kv: f64,
    #[serde(default)]
    pub is_source: bool,
}

/// Overhead or underground line. `z` (ohm) and `y` (siemens) are per unit
/// length; `length` multiplies both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSegment {
    pub from: String,
    pub to: String,
    pub phases: PhaseMask,
    pub z: CMat3,
    #[serde(default)]
    pub y: CMat3,
    #[serde(default = "default_length")]
    pub length: f64,
}

impl LineSegment {
    /// Total series impedance, ohm.
    pub fn series_impedance(&self) -> CMat3 {
        self.z.restrict(self.phases).scale(self.length)
    }

    /// Total shunt admittance, siemens.
    pub fn shunt_admittance(&self) -> CMat3 {
        self.y.restrict(self.phases).scale(self.length)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connection {
    WyeGrounded,
    Wye,
    Delta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transformer {
    pub from: String,
    pub to: String,
    pub phases: PhaseMask,
    pub conn_high: Connection,
    pub conn_low: Connection,
    pub kv_high: f64,
    pub kv_low: f64,
    pub kva: f64,
    /// Series impedance in per unit of the transformer rating.
    pub z_pu: C64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TapControl {
    pub target_pu: f64,
    pub bandwidth_pu: f64,
}

/// Wye-connected step voltage regulator: `V_to = (1 + step·tap) V_from` per phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regulator {
    pub from: String,
    pub to: String,
    pub phases: PhaseMask,
    pub taps: [i32; 3],
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default)]
    pub control: Option<TapControl>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacitorBank {
    pub bus: String,
    pub phases: PhaseMask,
    pub kvar: [f64; 3],
    pub status: [bool; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadConnection {
    Wye,
    Delta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadModel {
    ConstantPq,
    ConstantCurrent,
    ConstantImpedance,
}

/// A load. For delta connection entry `k` of `p_kw`/`q_kvar` is the element
/// between phase `k` and the next phase (AB, BC, CA).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Load {
    #[serde(default)]
    pub id: String,
    pub bus: String,
    pub phases: PhaseMask,
    pub connection: LoadConnection,
    pub model: LoadModel,
    pub p_kw: [f64; 3],
    pub q_kvar: [f64; 3],
}

impl Load {
    /// Indices of elements with nonzero nominal power.
    pub fn active_elements(&self) -> impl Iterator<Item = usize> + '_ {
        (0..3).filter(|&k| self.p_kw[k] != 0.0 || self.q_kvar[k] != 0.0)
    }

    /// Phases an element is attached to.
    pub fn element_phases(&self, k: usize) -> PhaseMask {
        let p = Phase::from_index(k);
        match self.connection {
            LoadConnection::Wye => PhaseMask::single(p),
            LoadConnection::Delta => PhaseMask::single(p).with(p.next()),
        }
    }
}

/// The JSON document form of a feeder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkData {
    pub name: String,
    #[serde(default = "default_base_mva")]
    pub base_mva: f64,
    pub source: SourceSpec,
    pub buses: Vec<Bus>,
    #[serde(default)]
    pub lines: Vec<LineSegment>,
    #[serde(default)]
    pub transformers: Vec<Transformer>,
    #[serde(default)]
    pub regulators: Vec<Regulator>,
    #[serde(default)]
    pub capacitors: Vec<CapacitorBank>,
    #[serde(default)]
    pub loads: Vec<Load>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BranchKind {
    Line,
    Transformer,
    Regulator,
}

/// A branch of the radial tree, oriented source-side (`from`) to load-side (`to`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branch {
    pub kind: BranchKind,
    /// Index into the matching element list of [`NetworkData`].
    pub element: usize,
    pub from: usize,
    pub to: usize,
    pub phases: PhaseMask,
}

/// Aggregated nominal demand on one (bus, phase); the unit a load scenario varies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadPoint {
    pub bus: usize,
    pub phase: Phase,
    pub p_kw: f64,
    pub q_kvar: f64,
}

#[derive(Clone, Debug)]
pub struct NetworkModel {
    data: NetworkData,
    bus_index: HashMap<String, usize>,
    branches: Vec<Branch>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    bfs_order: Vec<usize>,
    source: usize,
    state_index: Vec<[Option<usize>; 3]>,
    state_labels: Vec<(usize, Phase)>,
    load_points: Vec<LoadPoint>,
}

/// Parse and validate a network JSON document.
pub fn parse_network(text: &str) -> Result<NetworkModel, NetworkError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let data: NetworkData =
        serde_path_to_error::deserialize(de).map_err(|e| NetworkError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
    NetworkModel::new(data)
}

fn invalid(element: impl Into<String>, detail: impl Into<String>) -> NetworkError {
    NetworkError::Invalid {
        element: element.into(),
        detail: detail.into(),
    }
}

fn mismatch(element: impl Into<String>, detail: impl Into<String>) -> NetworkError {
    NetworkError::PhaseMismatch {
        element: element.into(),
        detail: detail.into(),
    }
}

fn check_finite(element: &str, what: &str, v: f64) -> Result<(), NetworkError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(invalid(element, format!("{what} is not finite")))
    }
}

fn cmat_zero_outside(m: &CMat3, phases: PhaseMask) -> bool {
    let r = m.restrict(phases);
    m.0.iter()
        .flatten()
        .zip(r.0.iter().flatten())
        .all(|(a, b)| a == b)
}

impl NetworkModel {
    pub fn new(data: NetworkData) -> Result<Self, NetworkError> {
        if !(data.base_mva > 0.0 && data.base_mva.is_finite()) {
            return Err(invalid("network", "base_mva must be positive"));
        }
        if data.buses.is_empty() {
            return Err(NetworkError::SourceCount(0));
        }
        let mut bus_index = HashMap::new();
        for (i, b) in data.buses.iter().enumerate() {
            let el = format!("bus `{}`", b.id);
            if bus_index.insert(b.id.clone(), i).is_some() {
                return Err(NetworkError::DuplicateBus(b.id.clone()));
            }
            if b.phases.is_empty() {
                return Err(mismatch(el, "no phases present"));
            }
            if !(b.base_kv > 0.0 && b.base_kv.is_finite()) {
                return Err(invalid(el, "base_kv must be positive"));
            }
        }
        let sources: Vec<usize> = (0..data.buses.len())
            .filter(|&i| data.buses[i].is_source)
            .collect();
        if sources.len() != 1 {
            return Err(NetworkError::SourceCount(sources.len()));
        }
        let source = sources[0];
        for k in 0..3 {
            let (m, a) = (data.source.voltage_pu[k], data.source.angle_deg[k]);
            if !(m > 0.0 && m.is_finite() && a.is_finite()) {
                return Err(invalid(
                    "source",
                    "voltage magnitudes must be positive and finite",
                ));
            }
        }

        let lookup = |element: &str, id: &str| -> Result<usize, NetworkError> {
            bus_index
                .get(id)
                .copied()
                .ok_or_else(|| NetworkError::DanglingBus {
                    element: element.to_string(),
                    bus: id.to_string(),
                })
        };
        let endpoint_phases = |element: &str, phases: PhaseMask, f: usize, t: usize| {
            if phases.is_empty() {
                return Err(mismatch(element, "no phases present"));
            }
            for b in [f, t] {
                if !phases.is_subset_of(data.buses[b].phases) {
                    return Err(mismatch(
                        element,
                        format!(
                            "phases {} exceed bus `{}` phases {}",
                            phases, data.buses[b].id, data.buses[b].phases
                        ),
                    ));
                }
            }
            Ok(())
        };

        let mut branches = Vec::new();
        for (i, l) in data.lines.iter().enumerate() {
            let el = format!("line {}-{}", l.from, l.to);
            let f = lookup(&el, &l.from)?;
            let t = lookup(&el, &l.to)?;
            endpoint_phases(&el, l.phases, f, t)?;
            if !(l.length > 0.0 && l.length.is_finite()) {
                return Err(invalid(&el, "length must be positive"));
            }
            if !cmat_zero_outside(&l.z, l.phases) || !cmat_zero_outside(&l.y, l.phases) {
                return Err(mismatch(
                    &el,
                    "impedance entries on absent phases must be zero",
                ));
            }
            if l.z
                .0
                .iter()
                .flatten()
                .chain(l.y.0.iter().flatten())
                .any(|v| !v.re.is_finite() || !v.im.is_finite())
            {
                return Err(invalid(&el, "non-finite matrix entry"));
            }
            if l.series_impedance().inverse_on(l.phases).is_none() {
                return Err(NetworkError::SingularImpedance { element: el });
            }
            if (data.buses[f].base_kv - data.buses[t].base_kv).abs() > 1e-9 {
                return Err(invalid(&el, "line endpoints have different base_kv"));
            }
            branches.push(Branch {
                kind: BranchKind::Line,
                element: i,
                from: f,
                to: t,
                phases: l.phases,
            });
        }
        for (i, x) in data.transformers.iter().enumerate() {
            let el = format!("transformer {}-{}", x.from, x.to);
            let f = lookup(&el, &x.from)?;
            let t = lookup(&el, &x.to)?;
            endpoint_phases(&el, x.phases, f, t)?;
            for (what, v) in [("kv_high", x.kv_high), ("kv_low", x.kv_low), ("kva", x.kva)] {
                check_finite(&el, what, v)?;
                if v <= 0.0 {
                    return Err(invalid(&el, format!("{what} must be positive")));
                }
            }
            if (x.kv_high - data.buses[f].base_kv).abs() > 1e-6 * x.kv_high
                || (x.kv_low - data.buses[t].base_kv).abs() > 1e-6 * x.kv_low
            {
                return Err(invalid(
                    &el,
                    "kv ratings must equal the base_kv of the from/to buses",
                ));
            }
            let has_delta = x.conn_high == Connection::Delta || x.conn_low == Connection::Delta;
            if has_delta && x.phases != PhaseMask::ABC {
                return Err(mismatch(&el, "delta windings require all three phases"));
            }
            if x.z_pu.norm() == 0.0 || !x.z_pu.re.is_finite() || !x.z_pu.im.is_finite() {
                return Err(NetworkError::SingularImpedance { element: el });
            }
            branches.push(Branch {
                kind: BranchKind::Transformer,
                element: i,
                from: f,
                to: t,
                phases: x.phases,
            });
        }
        for (i, r) in data.regulators.iter().enumerate() {
            let el = format!("regulator {}-{}", r.from, r.to);
            let f = lookup(&el, &r.from)?;
            let t = lookup(&el, &r.to)?;
            endpoint_phases(&el, r.phases, f, t)?;
            for p in r.phases.iter() {
                let tap = r.taps[p.index()];
                if tap.abs() > MAX_TAP {
                    return Err(invalid(
                        &el,
                        format!("tap {tap} on phase {p} outside [-{MAX_TAP}, {MAX_TAP}]"),
                    ));
                }
            }
            if !(r.step > 0.0 && r.step.is_finite()) {
                return Err(invalid(&el, "tap step must be positive"));
            }
            if (data.buses[f].base_kv - data.buses[t].base_kv).abs() > 1e-9 {
                return Err(invalid(&el, "regulator endpoints have different base_kv"));
            }
            branches.push(Branch {
                kind: BranchKind::Regulator,
                element: i,
                from: f,
                to: t,
                phases: r.phases,
            });
        }
        for c in &data.capacitors {
            let el = format!("capacitor at `{}`", c.bus);
            let b = lookup(&el, &c.bus)?;
            if c.phases.is_empty() || !c.phases.is_subset_of(data.buses[b].phases) {
                return Err(mismatch(
                    &el,
                    "capacitor phases must be a nonempty subset of the bus phases",
                ));
            }
            for p in Phase::ALL {
                let q = c.kvar[p.index()];
                check_finite(&el, "kvar", q)?;
                if q < 0.0 {
                    return Err(invalid(&el, "kvar ratings must be non-negative"));
                }
                if !c.phases.contains(p) && q != 0.0 {
                    return Err(mismatch(&el, format!("rating on absent phase {p}")));
                }
            }
        }
        for l in &data.loads {
            let el = if l.id.is_empty() {
                format!("load at `{}`", l.bus)
            } else {
                format!("load `{}`", l.id)
            };
            let b = lookup(&el, &l.bus)?;
            if l.phases.is_empty() || !l.phases.is_subset_of(data.buses[b].phases) {
                return Err(mismatch(
                    &el,
                    "load phases must be a nonempty subset of the bus phases",
                ));
            }
            if l.connection == LoadConnection::Delta && l.phases.count() < 2 {
                return Err(mismatch(&el, "delta loads require at least two phases"));
            }
            for k in 0..3 {
                check_finite(&el, "p_kw", l.p_kw[k])?;
                check_finite(&el, "q_kvar", l.q_kvar[k])?;
                if l.p_kw[k] < 0.0 {
                    return Err(invalid(&el, "nominal active power must be non-negative"));
                }
                let nonzero = l.p_kw[k] != 0.0 || l.q_kvar[k] != 0.0;
                if nonzero && !l.element_phases(k).is_subset_of(l.phases) {
                    return Err(mismatch(
                        &el,
                        format!("element {k} attaches to phases outside {}", l.phases),
                    ));
                }
            }
        }

        // Radial tree: BFS from the source, every branch must point downstream.
        let nb = data.buses.len();
        let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); nb];
        for (bi, br) in branches.iter().enumerate() {
            if br.from == br.to {
                return Err(NetworkError::NotRadial(format!(
                    "self-loop at bus `{}`",
                    data.buses[br.from].id
                )));
            }
            adjacency[br.from].push(bi);
            adjacency[br.to].push(bi);
        }
        let mut parent: Vec<Option<usize>> = vec![None; nb];
        let mut visited = vec![false; nb];
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); nb];
        let mut bfs_order = Vec::with_capacity(nb);
        let mut queue = VecDeque::from([source]);
        visited[source] = true;
        while let Some(u) = queue.pop_front() {
            bfs_order.push(u);
            for &bi in &adjacency[u] {
                if parent[u] == Some(bi) {
                    continue;
                }
                let br = branches[bi];
                let v = if br.from == u { br.to } else { br.from };
                if visited[v] {
                    return Err(NetworkError::NotRadial(format!(
                        "cycle closes through `{}`-`{}`",
                        data.buses[br.from].id, data.buses[br.to].id
                    )));
                }
                if br.from != u {
                    return Err(NetworkError::NotRadial(format!(
                        "branch `{}`-`{}` points toward the source",
                        data.buses[br.from].id, data.buses[br.to].id
                    )));
                }
                visited[v] = true;
                parent[v] = Some(bi);
                children[u].push(bi);
                queue.push_back(v);
            }
        }
        if let Some(i) = visited.iter().position(|v| !v) {
            return Err(NetworkError::NotRadial(format!(
                "bus `{}` is not connected to the source",
                data.buses[i].id
            )));
        }
        for (i, b) in data.buses.iter().enumerate() {
            if let Some(bi) = parent[i] {
                if !b.phases.is_subset_of(branches[bi].phases) {
                    return Err(mismatch(
                        format!("bus `{}`", b.id),
                        format!(
                            "phases {} not supplied by upstream branch phases {}",
                            b.phases, branches[bi].phases
                        ),
                    ));
                }
            }
        }

        let mut state_index = vec![[None; 3]; nb];
        let mut state_labels = Vec::new();
        for (i, b) in data.buses.iter().enumerate() {
            for p in b.phases.iter() {
                state_index[i][p.index()] = Some(state_labels.len());
                state_labels.push((i, p));
            }
        }

        let mut agg: Vec<[(f64, f64, bool); 3]> = vec![[(0.0, 0.0, false); 3]; nb];
        for l in &data.loads {
            let b = bus_index[&l.bus];
            for k in l.active_elements() {
                let slot = &mut agg[b][k];
                slot.0 += l.p_kw[k];
                slot.1 += l.q_kvar[k];
                slot.2 = true;
            }
        }
        let mut load_points = Vec::new();
        for (b, slots) in agg.iter().enumerate() {
            for p in Phase::ALL {
                let (pk, qk, used) = slots[p.index()];
                if used {
                    load_points.push(LoadPoint {
                        bus: b,
                        phase: p,
                        p_kw: pk,
                        q_kvar: qk,
                    });
                }
            }
        }

        Ok(NetworkModel {
            data,
            bus_index,
            branches,
            parent,
            children,
            bfs_order,
            source,
            state_index,
            state_labels,
            load_points,
        })
    }

    pub fn data(&self) -> &NetworkData {
        &self.data
    }

    pub fn name(&self) -> &str {
        &self.data.name
    }

    pub fn base_mva(&self) -> f64 {
        self.data.base_mva
    }

    pub fn buses(&self) -> &[Bus] {
        &self.data.buses
    }

    pub fn bus(&self, i: usize) -> &Bus {
        &self.data.buses[i]
    }

    pub fn bus_id(&self, i: usize) -> &str {
        &self.data.buses[i].id
    }

    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.bus_index.get(id).copied()
    }

    pub fn source_bus(&self) -> usize {
        self.source
    }

    /// Branches in canonical order: lines, transformers, regulators.
    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn parent_branch(&self, bus: usize) -> Option<usize> {
        self.parent[bus]
    }

    pub fn child_branches(&self, bus: usize) -> &[usize] {
        &self.children[bus]
    }

    /// Parent branch (if any) followed by child branches.
    pub fn incident_branches(&self, bus: usize) -> Vec<usize> {
        self.parent[bus]
            .into_iter()
            .chain(self.children[bus].iter().copied())
            .collect()
    }

    /// Branch joining two buses, in either orientation.
    pub fn branch_between(&self, a: usize, b: usize) -> Option<usize> {
        self.branches
            .iter()
            .position(|br| (br.from == a && br.to == b) || (br.from == b && br.to == a))
    }

    pub fn branch_label(&self, bi: usize) -> String {
        let br = &self.branches[bi];
        format!("{}-{}", self.bus_id(br.from), self.bus_id(br.to))
    }

    /// Source first, then breadth-first down the feeder.
    pub fn bfs_order(&self) -> &[usize] {
        &self.bfs_order
    }

    /// Canonical (bus, phase) ordering of the state vector.
    pub fn state_labels(&self) -> &[(usize, Phase)] {
        &self.state_labels
    }

    pub fn phase_count(&self) -> usize {
        self.state_labels.len()
    }

    pub fn state_index(&self, bus: usize, phase: Phase) -> Option<usize> {
        self.state_index[bus][phase.index()]
    }

    pub fn load_points(&self) -> &[LoadPoint] {
        &self.load_points
    }

    pub fn total_nominal_load(&self) -> (f64, f64) {
        self.load_points
            .iter()
            .fold((0.0, 0.0), |(p, q), lp| (p + lp.p_kw, q + lp.q_kvar))
    }

    /// Every present (bus, phase) with no load, no capacitor and no source attached.
    pub fn zero_injection_phases(&self) -> BTreeSet<(usize, Phase)> {
        let nb = self.data.buses.len();
        let mut injected = vec![PhaseMask::EMPTY; nb];
        for l in &self.data.loads {
            let b = self.bus_index[&l.bus];
            for k in l.active_elements() {
                for p in l.element_phases(k).iter() {
                    injected[b] = injected[b].with(p);
                }
            }
        }
        for c in &self.data.capacitors {
            let b = self.bus_index[&c.bus];
            for p in c.phases.iter() {
                if c.kvar[p.index()] > 0.0 {
                    injected[b] = injected[b].with(p);
                }
            }
        }
        let mut out = BTreeSet::new();
        for (b, bus) in self.data.buses.iter().enumerate() {
            if b == self.source {
                continue;
            }
            for p in bus.phases.iter() {
                if !injected[b].contains(p) {
                    out.insert((b, p));
                }
            }
        }
        out
    }

    /// Canonical JSON form.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.data).expect("network data serializes")
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
