//! Unbalanced three-phase radial power flow by forward-backward sweep.
//!
//! Per-unit system: one power base (`base_mva`, three-phase) and per-bus
//! voltage bases from `base_kv`. Angles are degrees referenced to the source
//! phase-A angle; phases B and C keep their natural ∓120° offsets.

pub mod pu;

use thiserror::Error;

use crate::cmat::{add3, angle_deg, sub3, Phasor3, C64, CZERO};
use crate::netmodel::{BranchKind, NetworkModel, MAX_TAP};
use crate::phase::Phase;

pub use pu::{BranchModel, PerUnitNetwork};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("invalid solver options: {0}")]
    Options(String),
    #[error("no convergence after {iterations} iterations (last max |dV| = {last_delta:.3e} pu)")]
    NonConvergence { iterations: usize, last_delta: f64 },
    #[error("voltage collapse at bus `{bus}` phase {phase}: |V| = {vmag:.4} pu")]
    Collapse {
        bus: String,
        phase: Phase,
        vmag: f64,
    },
    #[error("singular branch impedance submatrix")]
    Singular,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveOptions {
    /// Convergence threshold on the max per-phase voltage change, pu.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Run the regulator tap-control loop after each converged sweep.
    pub auto_taps: bool,
    pub max_tap_rounds: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tolerance: 1e-6,
            max_iterations: 100,
            auto_taps: false,
            max_tap_rounds: 20,
        }
    }
}

/// One load realization, aligned with [`NetworkModel::load_points`].
#[derive(Clone, Debug, PartialEq)]
pub struct LoadScenario {
    pub p_kw: Vec<f64>,
    pub q_kvar: Vec<f64>,
    /// Per-regulator taps; `None` keeps the network's taps.
    pub taps: Option<Vec<[i32; 3]>>,
    /// Per-capacitor per-phase status; `None` keeps the network's status.
    pub capacitors_on: Option<Vec<[bool; 3]>>,
}

impl LoadScenario {
    pub fn nominal(net: &NetworkModel) -> Self {
        let pts = net.load_points();
        LoadScenario {
            p_kw: pts.iter().map(|p| p.p_kw).collect(),
            q_kvar: pts.iter().map(|p| p.q_kvar).collect(),
            taps: None,
            capacitors_on: None,
        }
    }

    pub fn zero(net: &NetworkModel) -> Self {
        let n = net.load_points().len();
        LoadScenario {
            p_kw: vec![0.0; n],
            q_kvar: vec![0.0; n],
            taps: None,
            capacitors_on: None,
        }
    }

    pub fn validate(&self, net: &NetworkModel) -> Result<(), PowerFlowError> {
        let n = net.load_points().len();
        if self.p_kw.len() != n || self.q_kvar.len() != n {
            return Err(PowerFlowError::Scenario(format!(
                "expected {n} load points, got {} P and {} Q values",
                self.p_kw.len(),
                self.q_kvar.len()
            )));
        }
        if self.p_kw.iter().chain(&self.q_kvar).any(|v| !v.is_finite()) {
            return Err(PowerFlowError::Scenario("non-finite load value".into()));
        }
        if let Some(t) = &self.taps {
            if t.len() != net.data().regulators.len() {
                return Err(PowerFlowError::Scenario(
                    "tap vector length differs from regulator count".into(),
                ));
            }
            if t.iter().flatten().any(|v| v.abs() > MAX_TAP) {
                return Err(PowerFlowError::Scenario("tap outside [-16, 16]".into()));
            }
        }
        if let Some(c) = &self.capacitors_on {
            if c.len() != net.data().capacitors.len() {
                return Err(PowerFlowError::Scenario(
                    "capacitor status length differs from capacitor count".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Voltage magnitudes and angles in canonical (bus, phase) order.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    pub vmag_pu: Vec<f64>,
    pub vang_deg: Vec<f64>,
}

impl StateVector {
    pub fn from_phasors(v: &[C64]) -> Self {
        StateVector {
            vmag_pu: v.iter().map(|z| z.norm()).collect(),
            vang_deg: v.iter().map(|&z| angle_deg(z)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.vmag_pu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vmag_pu.is_empty()
    }

    pub fn phasor(&self, i: usize) -> C64 {
        crate::cmat::polar_deg(self.vmag_pu[i], self.vang_deg[i])
    }

    pub fn phasors(&self) -> Vec<C64> {
        (0..self.len()).map(|i| self.phasor(i)).collect()
    }

    /// Flat feature layout: all magnitudes, then all angles.
    pub fn to_features(&self) -> Vec<f64> {
        self.vmag_pu.iter().chain(&self.vang_deg).copied().collect()
    }

    pub fn from_features(f: &[f64]) -> Self {
        let n = f.len() / 2;
        StateVector {
            vmag_pu: f[..n].to_vec(),
            vang_deg: f[n..2 * n].to_vec(),
        }
    }
}

/// Per-branch phase currents, canonical branch order. `from` is the current
/// entering the branch at its source-side end, `to` the current leaving it at
/// its load-side end.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchFlow {
    pub from: Vec<Phasor3>,
    pub to: Vec<Phasor3>,
}

impl BranchFlow {
    /// Sending-end current as (magnitude pu, angle deg).
    pub fn sending_polar(&self, branch: usize, phase: Phase) -> (f64, f64) {
        let i = self.from[branch][phase.index()];
        (i.norm(), angle_deg(i))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerFlowSolution {
    /// Bus voltages, pu, absent phases zero.
    pub voltages: Vec<Phasor3>,
    pub state: StateVector,
    pub flows: BranchFlow,
    pub iterations: usize,
    /// Max per-phase voltage change of every sweep iteration.
    pub max_deltas: Vec<f64>,
    /// Regulator taps in effect.
    pub taps: Vec<[i32; 3]>,
}

struct Prepared<'a> {
    net: &'a NetworkModel,
    pu: PerUnitNetwork,
    /// Per load, per element nominal complex power (pu) for this scenario.
    load_s: Vec<[C64; 3]>,
    /// Per bus shunt admittance of switched-on capacitors (pu).
    cap_y: Vec<Phasor3>,
}

fn scenario_element_powers(
    net: &NetworkModel,
    sc: &LoadScenario,
    kva_per_phase: f64,
) -> Vec<[C64; 3]> {
    let pts = net.load_points();
    let point_of = |bus: usize, k: usize| {
        pts.iter()
            .position(|lp| lp.bus == bus && lp.phase.index() == k)
    };
    net.data()
        .loads
        .iter()
        .map(|l| {
            let bus = net.bus_index(&l.bus).expect("validated");
            let mut s = [CZERO; 3];
            for k in l.active_elements() {
                let i = point_of(bus, k).expect("every active element has a load point");
                let (np, nq) = (pts[i].p_kw, pts[i].q_kvar);
                let (sp, sq) = (sc.p_kw[i], sc.q_kvar[i]);
                let p = if np != 0.0 {
                    l.p_kw[k] * sp / np
                } else if nq != 0.0 {
                    l.q_kvar[k] / nq * sp
                } else {
                    0.0
                };
                let q = if nq != 0.0 {
                    l.q_kvar[k] * sq / nq
                } else if np != 0.0 {
                    l.p_kw[k] / np * sq
                } else {
                    0.0
                };
                s[k] = C64::new(p, q) / kva_per_phase;
            }
            s
        })
        .collect()
}

impl<'a> Prepared<'a> {
    fn new(
        net: &'a NetworkModel,
        sc: &LoadScenario,
        taps: &[[i32; 3]],
    ) -> Result<Self, PowerFlowError> {
        let pu = PerUnitNetwork::new(net, Some(taps)).ok_or(PowerFlowError::Singular)?;
        let load_s = scenario_element_powers(net, sc, pu.kva_per_phase);
        let mut cap_y = vec![[CZERO; 3]; net.buses().len()];
        for (ci, c) in net.data().capacitors.iter().enumerate() {
            let b = net.bus_index(&c.bus).expect("validated");
            let status = sc.capacitors_on.as_ref().map(|s| s[ci]).unwrap_or(c.status);
            for p in c.phases.iter() {
                if status[p.index()] {
                    cap_y[b][p.index()] += C64::new(0.0, c.kvar[p.index()] / pu.kva_per_phase);
                }
            }
        }
        Ok(Prepared {
            net,
            pu,
            load_s,
            cap_y,
        })
    }

    /// Current drawn at each bus by loads and capacitors.
    fn bus_injections(&self, v: &[Phasor3]) -> Vec<Phasor3> {
        let mut inj: Vec<Phasor3> = (0..v.len())
            .map(|b| std::array::from_fn(|k| self.cap_y[b][k] * v[b][k]))
            .collect();
        for (li, l) in self.net.data().loads.iter().enumerate() {
            let b = self.net.bus_index(&l.bus).expect("validated");
            let vnom = pu::nominal_element_voltage(l.connection);
            for k in l.active_elements() {
                let ve = pu::element_voltage(l.connection, k, &v[b]);
                let ie = pu::element_current(l.model, self.load_s[li][k], ve, vnom);
                pu::add_element_line_currents(l.connection, k, ie, &mut inj[b]);
            }
        }
        inj
    }

    /// Leaf-to-source current aggregation at fixed voltages.
    fn backward(&self, v: &[Phasor3]) -> BranchFlow {
        let nbr = self.net.branches().len();
        let mut flow = BranchFlow {
            from: vec![[CZERO; 3]; nbr],
            to: vec![[CZERO; 3]; nbr],
        };
        let inj = self.bus_injections(v);
        for &bus in self.net.bfs_order().iter().rev() {
            let Some(bi) = self.net.parent_branch(bus) else {
                continue;
            };
            let mut i_to = inj[bus];
            for &c in self.net.child_branches(bus) {
                i_to = add3(&i_to, &flow.from[c]);
            }
            let br = self.net.branches()[bi];
            i_to = pu::mask_phasor(i_to, br.phases);
            let i_from = match &self.pu.branches[bi] {
                BranchModel::Line { y_half, .. } => {
                    let i_series = add3(&i_to, &y_half.mul_vec(&v[br.to]));
                    add3(&i_series, &y_half.mul_vec(&v[br.from]))
                }
                BranchModel::Transformer { a, .. } => a.adjoint().mul_vec(&i_to),
                BranchModel::Regulator { ratio } => std::array::from_fn(|k| i_to[k] * ratio[k]),
            };
            flow.to[bi] = i_to;
            flow.from[bi] = i_from;
        }
        flow
    }

    /// Source-to-leaf voltage update through branch drops.
    fn forward(&self, v_old: &[Phasor3], flow: &BranchFlow, source: Phasor3) -> Vec<Phasor3> {
        let mut v = vec![[CZERO; 3]; v_old.len()];
        v[self.net.source_bus()] =
            pu::mask_phasor(source, self.net.bus(self.net.source_bus()).phases);
        for &bus in self.net.bfs_order() {
            for &bi in self.net.child_branches(bus) {
                let br = self.net.branches()[bi];
                let vf = v[br.from];
                let vt = match &self.pu.branches[bi] {
                    BranchModel::Line { z, y_half, .. } => {
                        let i_series = add3(&flow.to[bi], &y_half.mul_vec(&v_old[br.to]));
                        sub3(&vf, &z.mul_vec(&i_series))
                    }
                    BranchModel::Transformer { a, z, .. } => {
                        sub3(&a.mul_vec(&vf), &z.mul_vec(&flow.to[bi]))
                    }
                    BranchModel::Regulator { ratio } => std::array::from_fn(|k| vf[k] * ratio[k]),
                };
                v[br.to] = pu::mask_phasor(vt, self.net.bus(br.to).phases);
            }
        }
        v
    }

    fn no_load_profile(&self, source: Phasor3) -> Vec<Phasor3> {
        let mut v = vec![[CZERO; 3]; self.net.buses().len()];
        v[self.net.source_bus()] =
            pu::mask_phasor(source, self.net.bus(self.net.source_bus()).phases);
        for &bus in self.net.bfs_order() {
            for &bi in self.net.child_branches(bus) {
                let br = self.net.branches()[bi];
                v[br.to] = pu::mask_phasor(
                    self.pu.no_load_voltage(bi, &v[br.from]),
                    self.net.bus(br.to).phases,
                );
            }
        }
        v
    }
}

fn sweep(
    prep: &Prepared,
    opts: &SolveOptions,
) -> Result<(Vec<Phasor3>, BranchFlow, Vec<f64>), PowerFlowError> {
    let net = prep.net;
    // Flat start: source magnitudes at nominal phase angles, carried through
    // regulator ratios and transformer phase shifts.
    let src = &net.data().source;
    let flat: Phasor3 = std::array::from_fn(|k| {
        crate::cmat::polar_deg(src.voltage_pu[k], Phase::from_index(k).nominal_angle_deg())
    });
    let mut v = prep.no_load_profile(flat);
    let source = src.phasors();
    let mut deltas = Vec::new();
    for it in 1..=opts.max_iterations {
        let flow = prep.backward(&v);
        let v_new = prep.forward(&v, &flow, source);
        let mut delta = 0.0f64;
        for (a, b) in v_new.iter().zip(&v) {
            for k in 0..3 {
                delta = delta.max((a[k] - b[k]).norm());
            }
        }
        v = v_new;
        deltas.push(delta);
        if !delta.is_finite() {
            return Err(PowerFlowError::NonConvergence {
                iterations: it,
                last_delta: delta,
            });
        }
        for &(b, p) in net.state_labels() {
            let m = v[b][p.index()].norm();
            if !(m >= 0.5) {
                return Err(PowerFlowError::Collapse {
                    bus: net.bus_id(b).to_string(),
                    phase: p,
                    vmag: m,
                });
            }
        }
        if delta < opts.tolerance {
            let flow = prep.backward(&v);
            return Ok((v, flow, deltas));
        }
    }
    Err(PowerFlowError::NonConvergence {
        iterations: opts.max_iterations,
        last_delta: deltas.last().copied().unwrap_or(f64::NAN),
    })
}

/// Solve one scenario.
pub fn solve(
    net: &NetworkModel,
    scenario: &LoadScenario,
    opts: &SolveOptions,
) -> Result<PowerFlowSolution, PowerFlowError> {
    if !(opts.tolerance > 0.0 && opts.tolerance.is_finite()) || opts.max_iterations == 0 {
        return Err(PowerFlowError::Options(
            "tolerance must be positive and max_iterations nonzero".into(),
        ));
    }
    scenario.validate(net)?;
    let mut taps: Vec<[i32; 3]> = scenario
        .taps
        .clone()
        .unwrap_or_else(|| net.data().regulators.iter().map(|r| r.taps).collect());
    let mut rounds = 0;
    loop {
        let prep = Prepared::new(net, scenario, &taps)?;
        let (v, flows, deltas) = sweep(&prep, opts)?;
        if opts.auto_taps && rounds < opts.max_tap_rounds && adjust_taps(net, &v, &mut taps) {
            rounds += 1;
            continue;
        }
        let state = StateVector::from_phasors(
            &net.state_labels()
                .iter()
                .map(|&(b, p)| v[b][p.index()])
                .collect::<Vec<_>>(),
        );
        return Ok(PowerFlowSolution {
            iterations: deltas.len(),
            voltages: v,
            state,
            flows,
            max_deltas: deltas,
            taps,
        });
    }
}

/// One round of regulator control: move each out-of-band phase toward its
/// target. Returns whether any tap changed.
fn adjust_taps(net: &NetworkModel, v: &[Phasor3], taps: &mut [[i32; 3]]) -> bool {
    let mut changed = false;
    for (ri, r) in net.data().regulators.iter().enumerate() {
        let Some(ctrl) = &r.control else { continue };
        let to = net.bus_index(&r.to).expect("validated");
        for p in r.phases.iter() {
            let k = p.index();
            let vm = v[to][k].norm();
            if (vm - ctrl.target_pu).abs() > ctrl.bandwidth_pu / 2.0 {
                let steps = ((ctrl.target_pu - vm) / r.step).round() as i32;
                let new = (taps[ri][k] + steps).clamp(-MAX_TAP, MAX_TAP);
                if new != taps[ri][k] {
                    taps[ri][k] = new;
                    changed = true;
                }
            }
        }
    }
    changed
}

#[derive(Debug, Error)]
#[error("{} of {total} scenarios failed; first: scenario {}: {}", failures.len(), failures[0].0, failures[0].1)]
pub struct BatchSolveError {
    pub total: usize,
    pub failures: Vec<(usize, PowerFlowError)>,
}

/// Solve every scenario. Work is split across threads in contiguous chunks;
/// results are returned in input order and are identical to sequential
/// [`solve`] calls. Any failure is reported with its index.
pub fn batch_solve(
    net: &NetworkModel,
    scenarios: &[LoadScenario],
    opts: &SolveOptions,
) -> Result<Vec<PowerFlowSolution>, BatchSolveError> {
    let results = crate::par::parallel_map(scenarios, |sc| solve(net, sc, opts));
    let mut out = Vec::with_capacity(scenarios.len());
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => out.push(s),
            Err(e) => failures.push((i, e)),
        }
    }
    if failures.is_empty() {
        Ok(out)
    } else {
        Err(BatchSolveError {
            total: scenarios.len(),
            failures,
        })
    }
}

/// Largest per-(bus, phase) complex power mismatch, pu: power arriving through
/// the parent branch minus power sent into child branches, loads and shunts.
/// Wye loads and capacitors use the load-model power formula; delta elements
/// are split across their two phases by their element current.
pub fn power_mismatch(net: &NetworkModel, scenario: &LoadScenario, sol: &PowerFlowSolution) -> f64 {
    let taps = &sol.taps;
    let prep = match Prepared::new(net, scenario, taps) {
        Ok(p) => p,
        Err(_) => return f64::INFINITY,
    };
    let v = &sol.voltages;
    let nb = net.buses().len();
    let mut consumed: Vec<Phasor3> = (0..nb)
        .map(|b| std::array::from_fn(|k| v[b][k] * (prep.cap_y[b][k] * v[b][k]).conj()))
        .collect();
    for (li, l) in net.data().loads.iter().enumerate() {
        let b = net.bus_index(&l.bus).expect("validated");
        let vnom = pu::nominal_element_voltage(l.connection);
        for k in l.active_elements() {
            let ve = pu::element_voltage(l.connection, k, &v[b]);
            match l.connection {
                crate::netmodel::LoadConnection::Wye => {
                    consumed[b][k] += pu::element_power(l.model, prep.load_s[li][k], ve, vnom);
                }
                crate::netmodel::LoadConnection::Delta => {
                    let ie = pu::element_current(l.model, prep.load_s[li][k], ve, vnom);
                    let j = (k + 1) % 3;
                    consumed[b][k] += v[b][k] * ie.conj();
                    consumed[b][j] -= v[b][j] * ie.conj();
                }
            }
        }
    }
    let mut worst = 0.0f64;
    for b in 0..nb {
        if b == net.source_bus() {
            continue;
        }
        let mut i_net = [CZERO; 3];
        if let Some(pb) = net.parent_branch(b) {
            i_net = sol.flows.to[pb];
        }
        for &c in net.child_branches(b) {
            i_net = sub3(&i_net, &sol.flows.from[c]);
        }
        for p in net.bus(b).phases.iter() {
            let k = p.index();
            let s_in = v[b][k] * i_net[k].conj();
            worst = worst.max((s_in - consumed[b][k]).norm());
        }
    }
    worst
}

/// Largest residual of the branch voltage equations at the solution, pu.
pub fn voltage_residual(net: &NetworkModel, sol: &PowerFlowSolution) -> f64 {
    let Some(pu) = PerUnitNetwork::new(net, Some(&sol.taps)) else {
        return f64::INFINITY;
    };
    let v = &sol.voltages;
    let mut worst = 0.0f64;
    for (bi, br) in net.branches().iter().enumerate() {
        let expect = match &pu.branches[bi] {
            BranchModel::Line { z, y_half, .. } => {
                let i_series = add3(&sol.flows.to[bi], &y_half.mul_vec(&v[br.to]));
                sub3(&v[br.from], &z.mul_vec(&i_series))
            }
            BranchModel::Transformer { a, z, .. } => {
                sub3(&a.mul_vec(&v[br.from]), &z.mul_vec(&sol.flows.to[bi]))
            }
            BranchModel::Regulator { ratio } => std::array::from_fn(|k| v[br.from][k] * ratio[k]),
        };
        for p in br.phases.iter() {
            worst = worst.max((expect[p.index()] - v[br.to][p.index()]).norm());
        }
    }
    worst
}

/// Convenience for the kind of a branch by index.
pub fn branch_kind(net: &NetworkModel, bi: usize) -> BranchKind {
    net.branches()[bi].kind
}
