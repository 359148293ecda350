//! Bundled IEEE 34-node test feeder.
//!
//! Hand-translated from the public IEEE PES test-feeder data: line
//! configurations 300-304, the 24.9/4.16 kV in-line transformer between 832
//! and 888, the two step regulators at their published solution taps, shunt
//! capacitors at 844 and 848, spot loads, and distributed loads split half to
//! each end bus of their segment.

use super::{parse_network, NetworkModel};

pub const IEEE34_JSON: &str = include_str!("../../../../data/ieee34.json");

pub fn load_ieee34_fixture() -> NetworkModel {
    parse_network(IEEE34_JSON).expect("bundled IEEE 34 fixture is valid")
}
