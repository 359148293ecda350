//! Small hand-built networks shared by unit and integration tests.
//!
//! Bases are chosen so that per-unit values equal physical ones: base voltage
//! 1 kV line-to-neutral, 1 MVA per phase, so 1 pu impedance = 1 ohm and
//! 1 pu power = 1000 kW per phase.

use crate::cmat::{CMat3, C64};
use crate::netmodel::{
    Bus, LineSegment, Load, LoadConnection, LoadModel, NetworkData, NetworkModel, SourceSpec,
};
use crate::phase::{Phase, PhaseMask};

pub const KW_PER_PU: f64 = 1000.0;

pub fn base_kv() -> f64 {
    3f64.sqrt()
}

/// Chain of buses `ids[0]` (source) → `ids[1]` → … with identical diagonal
/// series impedance `z_pu` on every present phase and no shunt admittance.
pub fn chain_data(ids: &[&str], phases: PhaseMask, z_pu: C64) -> NetworkData {
    let buses = ids
        .iter()
        .enumerate()
        .map(|(i, id)| Bus {
            id: id.to_string(),
            phases,
            base_kv: base_kv(),
            is_source: i == 0,
        })
        .collect();
    let mut z = CMat3::zero();
    for p in phases.iter() {
        z.0[p.index()][p.index()] = z_pu;
    }
    let lines = ids
        .windows(2)
        .map(|w| LineSegment {
            from: w[0].to_string(),
            to: w[1].to_string(),
            phases,
            z,
            y: CMat3::zero(),
            length: 1.0,
        })
        .collect();
    NetworkData {
        name: "chain".into(),
        base_mva: 3.0,
        source: SourceSpec {
            voltage_pu: [1.0; 3],
            angle_deg: [0.0, -120.0, 120.0],
        },
        buses,
        lines,
        transformers: vec![],
        regulators: vec![],
        capacitors: vec![],
        loads: vec![],
    }
}

/// Wye load on one phase, powers in per unit.
pub fn wye_load(bus: &str, phase: Phase, model: LoadModel, p_pu: f64, q_pu: f64) -> Load {
    let mut p_kw = [0.0; 3];
    let mut q_kvar = [0.0; 3];
    p_kw[phase.index()] = p_pu * KW_PER_PU;
    q_kvar[phase.index()] = q_pu * KW_PER_PU;
    Load {
        id: format!("{bus}-{phase}"),
        bus: bus.to_string(),
        phases: PhaseMask::single(phase),
        connection: LoadConnection::Wye,
        model,
        p_kw,
        q_kvar,
    }
}

/// Single-phase (A) chain with a constant-PQ load on every non-source bus.
pub fn loaded_single_phase_chain(ids: &[&str], z_pu: C64, p_pu: f64, q_pu: f64) -> NetworkModel {
    let mut data = chain_data(ids, PhaseMask::single(Phase::A), z_pu);
    data.loads = ids[1..]
        .iter()
        .map(|id| wye_load(id, Phase::A, LoadModel::ConstantPq, p_pu, q_pu))
        .collect();
    NetworkModel::new(data).expect("valid chain")
}

/// Balanced three-phase chain with constant-PQ loads on every non-source bus.
pub fn loaded_three_phase_chain(ids: &[&str], z_pu: C64, p_pu: f64, q_pu: f64) -> NetworkModel {
    let mut data = chain_data(ids, PhaseMask::ABC, z_pu);
    data.loads = ids[1..]
        .iter()
        .map(|id| Load {
            id: format!("{id}-3ph"),
            bus: id.to_string(),
            phases: PhaseMask::ABC,
            connection: LoadConnection::Wye,
            model: LoadModel::ConstantPq,
            p_kw: [p_pu * KW_PER_PU; 3],
            q_kvar: [q_pu * KW_PER_PU; 3],
        })
        .collect();
    NetworkModel::new(data).expect("valid chain")
}
