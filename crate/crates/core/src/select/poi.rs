//! Phase observability: which phase voltages a set of SMDs pins down through
//! the branch equations and zero-injection KCL.

use std::collections::BTreeSet;

use crate::netmodel::{BranchKind, NetworkModel};
use crate::phase::Phase;
use crate::smdsim::{ChannelKind, ChannelLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoiOptions {
    /// Apply KCL at zero-injection phases.
    pub zip_propagation: bool,
}

impl Default for PoiOptions {
    fn default() -> Self {
        PoiOptions {
            zip_propagation: true,
        }
    }
}

/// Observed (bus, phase) voltages for a resolved placement, by fixpoint of:
/// * voltage at one end plus the branch current gives the other end;
/// * voltages at both ends of a line or transformer give its current;
/// * a regulator's ratio links its two end voltages;
/// * at a zero-injection phase, the one unknown incident current follows
///   from KCL.
pub fn observed_phases(
    net: &NetworkModel,
    layout: &ChannelLayout,
    opts: PoiOptions,
) -> BTreeSet<(usize, Phase)> {
    let nb = net.buses().len();
    let branches = net.branches();
    let mut v = vec![[false; 3]; nb];
    let mut i = vec![[false; 3]; branches.len()];
    for c in &layout.channels {
        match (c.kind, c.branch) {
            (ChannelKind::Voltage, _) => v[c.bus][c.phase.index()] = true,
            (ChannelKind::Current, Some(bi)) => i[bi][c.phase.index()] = true,
            _ => {}
        }
    }
    let zips = if opts.zip_propagation {
        net.zero_injection_phases()
    } else {
        BTreeSet::new()
    };
    let all = |mask: crate::PhaseMask, known: &[bool; 3]| mask.iter().all(|p| known[p.index()]);

    loop {
        let mut changed = false;
        let mut set = |flag: &mut bool| {
            if !*flag {
                *flag = true;
                changed = true;
            }
        };
        for (bi, br) in branches.iter().enumerate() {
            let ph = br.phases;
            match br.kind {
                BranchKind::Regulator => {
                    for p in ph.iter() {
                        let k = p.index();
                        if v[br.from][k] || v[br.to][k] {
                            let (a, b) = (v[br.from][k], v[br.to][k]);
                            if !a {
                                set(&mut v[br.from][k]);
                            }
                            if !b {
                                set(&mut v[br.to][k]);
                            }
                        }
                    }
                }
                BranchKind::Line | BranchKind::Transformer => {
                    let from_known = all(ph, &v[br.from]);
                    let to_known = all(ph, &v[br.to]);
                    let cur_known = all(ph, &i[bi]);
                    if cur_known && from_known && !to_known {
                        for p in ph.iter() {
                            set(&mut v[br.to][p.index()]);
                        }
                    }
                    if cur_known && to_known && !from_known {
                        for p in ph.iter() {
                            set(&mut v[br.from][p.index()]);
                        }
                    }
                    if from_known && to_known && !cur_known {
                        for p in ph.iter() {
                            set(&mut i[bi][p.index()]);
                        }
                    }
                }
            }
        }
        for &(b, p) in &zips {
            let k = p.index();
            let incident: Vec<usize> = net
                .incident_branches(b)
                .into_iter()
                .filter(|&bi| branches[bi].phases.contains(p))
                .collect();
            let unknown: Vec<usize> = incident.iter().copied().filter(|&bi| !i[bi][k]).collect();
            if unknown.len() == 1 {
                set(&mut i[unknown[0]][k]);
            }
        }
        if !changed {
            break;
        }
    }
    net.state_labels()
        .iter()
        .copied()
        .filter(|&(b, p)| v[b][p.index()])
        .collect()
}

/// Phase observability index of one resolved site (or any placement).
pub fn poi(net: &NetworkModel, layout: &ChannelLayout, opts: PoiOptions) -> usize {
    observed_phases(net, layout, opts).len()
}
