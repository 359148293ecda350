//! Per-unit branch, load and shunt models shared by the sweep solver and the
//! linear estimator.

use num_complex::Complex64;

use crate::cmat::{CMat3, Phasor3, C64, CZERO};
use crate::netmodel::{BranchKind, Connection, LoadConnection, LoadModel, NetworkModel};
use crate::phase::{Phase, PhaseMask};

/// Branch equations in per unit.
///
/// * Line: `V_to = V_from − Z·I_series`, `I_series = I_to + Y_half·V_to`,
///   `I_from = I_series + Y_half·V_from`.
/// * Transformer: `V_to = A·V_from − Z·I_to`, `I_from = Aᴴ·I_to`.
/// * Regulator: `V_to = diag(r)·V_from`, `I_from = diag(r)·I_to`.
#[derive(Clone, Debug)]
pub enum BranchModel {
    Line {
        z: CMat3,
        y_series: CMat3,
        y_half: CMat3,
    },
    Transformer {
        a: CMat3,
        z: CMat3,
        y_series: CMat3,
    },
    Regulator {
        ratio: [f64; 3],
    },
}

#[derive(Clone, Debug)]
pub struct PerUnitNetwork {
    pub branches: Vec<BranchModel>,
    pub phases: Vec<PhaseMask>,
    /// Per-phase power base, kVA.
    pub kva_per_phase: f64,
}

pub fn regulator_ratio(taps: &[i32; 3], step: f64, phases: PhaseMask) -> [f64; 3] {
    std::array::from_fn(|k| {
        if phases.contains(Phase::from_index(k)) {
            1.0 + step * taps[k] as f64
        } else {
            0.0
        }
    })
}

/// Voltage map of a transformer bank from winding connections, in per unit of
/// line-to-neutral bases. Delta→wye lags by 30°, wye→delta leads by 30°.
pub fn transformer_map(high: Connection, low: Connection, phases: PhaseMask) -> CMat3 {
    let s = 1.0 / 3f64.sqrt();
    let wye = |c: Connection| c != Connection::Delta;
    let m = match (wye(high), wye(low)) {
        (true, true) | (false, false) => CMat3::identity(),
        (false, true) => CMat3::from_real([[s, 0.0, -s], [-s, s, 0.0], [0.0, -s, s]]),
        (true, false) => CMat3::from_real([[s, -s, 0.0], [0.0, s, -s], [-s, 0.0, s]]),
    };
    m.restrict(phases)
}

impl PerUnitNetwork {
    pub fn new(net: &NetworkModel, taps: Option<&[[i32; 3]]>) -> Option<Self> {
        let data = net.data();
        let kva_per_phase = net.base_mva() * 1000.0 / 3.0;
        let mut branches = Vec::with_capacity(net.branches().len());
        let mut phases = Vec::with_capacity(net.branches().len());
        for br in net.branches() {
            let model = match br.kind {
                BranchKind::Line => {
                    let l = &data.lines[br.element];
                    let kv = net.bus(br.from).base_kv;
                    let zbase = kv * kv / net.base_mva();
                    let z = l.series_impedance().scale(1.0 / zbase);
                    let y_half = l.shunt_admittance().scale(zbase * 0.5);
                    let y_series = z.inverse_on(br.phases)?;
                    BranchModel::Line {
                        z,
                        y_series,
                        y_half,
                    }
                }
                BranchKind::Transformer => {
                    let x = &data.transformers[br.element];
                    let zt = x.z_pu * (net.base_mva() * 1000.0 / x.kva);
                    let z = CMat3::diag([zt; 3]).restrict(br.phases);
                    let y_series = z.inverse_on(br.phases)?;
                    BranchModel::Transformer {
                        a: transformer_map(x.conn_high, x.conn_low, br.phases),
                        z,
                        y_series,
                    }
                }
                BranchKind::Regulator => {
                    let r = &data.regulators[br.element];
                    let t = taps.map(|t| t[br.element]).unwrap_or(r.taps);
                    BranchModel::Regulator {
                        ratio: regulator_ratio(&t, r.step, br.phases),
                    }
                }
            };
            branches.push(model);
            phases.push(br.phases);
        }
        Some(PerUnitNetwork {
            branches,
            phases,
            kva_per_phase,
        })
    }

    /// Voltage at the far end when no current flows.
    pub fn no_load_voltage(&self, bi: usize, v_from: &Phasor3) -> Phasor3 {
        let mask = self.phases[bi];
        let out = match &self.branches[bi] {
            BranchModel::Line { .. } => *v_from,
            BranchModel::Transformer { a, .. } => a.mul_vec(v_from),
            BranchModel::Regulator { ratio } => std::array::from_fn(|k| v_from[k] * ratio[k]),
        };
        mask_phasor(out, mask)
    }
}

pub fn mask_phasor(v: Phasor3, mask: PhaseMask) -> Phasor3 {
    std::array::from_fn(|k| {
        if mask.contains(Phase::from_index(k)) {
            v[k]
        } else {
            CZERO
        }
    })
}

/// Current drawn by one load element at voltage `v` (element voltage:
/// line-to-neutral for wye, line-to-line for delta), given its nominal complex
/// power `s_nom` at nominal element voltage magnitude `v_nom`.
pub fn element_current(model: LoadModel, s_nom: C64, v: C64, v_nom: f64) -> C64 {
    if v.norm() == 0.0 {
        return CZERO;
    }
    let i_pq = (s_nom / v).conj();
    let ratio = v.norm() / v_nom;
    match model {
        LoadModel::ConstantPq => i_pq,
        LoadModel::ConstantCurrent => i_pq * ratio,
        LoadModel::ConstantImpedance => i_pq * ratio * ratio,
    }
}

/// Complex power consumed by one load element, from the load model definition.
pub fn element_power(model: LoadModel, s_nom: C64, v: C64, v_nom: f64) -> C64 {
    let ratio = v.norm() / v_nom;
    match model {
        LoadModel::ConstantPq => s_nom,
        LoadModel::ConstantCurrent => s_nom * ratio,
        LoadModel::ConstantImpedance => s_nom * ratio * ratio,
    }
}

pub fn nominal_element_voltage(conn: LoadConnection) -> f64 {
    match conn {
        LoadConnection::Wye => 1.0,
        LoadConnection::Delta => 3f64.sqrt(),
    }
}

/// Element voltage for element `k` of a load.
pub fn element_voltage(conn: LoadConnection, k: usize, v: &Phasor3) -> C64 {
    match conn {
        LoadConnection::Wye => v[k],
        LoadConnection::Delta => v[k] - v[(k + 1) % 3],
    }
}

/// Accumulate the line currents of element `k` into `out`.
pub fn add_element_line_currents(
    conn: LoadConnection,
    k: usize,
    i_elem: Complex64,
    out: &mut Phasor3,
) {
    match conn {
        LoadConnection::Wye => out[k] += i_elem,
        LoadConnection::Delta => {
            out[k] += i_elem;
            out[(k + 1) % 3] -= i_elem;
        }
    }
}
