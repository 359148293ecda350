//! Correlation-driven SMD placement.
//!
//! Voltage features that move together across load scenarios carry the same
//! information, so one SMD per correlated cluster is enough. Within a cluster
//! the site that observes the most phase voltages wins.

mod heatmap;
mod poi;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::netmodel::NetworkModel;
use crate::phase::Phase;
use crate::powerflow::StateVector;
use crate::smdsim::{Site, SmdError, SmdPlacement};

pub use heatmap::heatmap_svg;
pub use poi::{observed_phases, poi, PoiOptions};

#[derive(Debug, thiserror::Error)]
pub enum SelectError {
    #[error("need at least 3 scenarios, got {0}")]
    TooFewScenarios(usize),
    #[error("state vector has {got} entries, network has {expected}")]
    StateShape { got: usize, expected: usize },
    #[error("threshold {0} not in (0, 1)")]
    Threshold(f64),
    #[error("no defined features to cluster")]
    NoFeatures,
    #[error("cluster {0} has no candidate site")]
    EmptyCluster(usize),
    #[error(transparent)]
    Site(#[from] SmdError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Angle,
    Magnitude,
}

/// Spearman coefficients over (bus, phase) features. Entries involving a
/// constant feature are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub labels: Vec<String>,
    pub features: Vec<(usize, Phase)>,
    pub values: Vec<f64>,
    /// Indices of constant features.
    pub undefined: Vec<usize>,
}

impl CorrelationMatrix {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.labels.len() + j]
    }
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman matrix of columns; `None` marks a constant column.
pub fn spearman_columns(columns: &[Vec<f64>]) -> (Vec<f64>, Vec<usize>) {
    let f = columns.len();
    // Centered, unit-norm ranks make each coefficient a dot product.
    let normed: Vec<Option<Vec<f64>>> = columns
        .iter()
        .map(|c| {
            let r = ranks(c);
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            let centered: Vec<f64> = r.iter().map(|x| x - mean).collect();
            let norm = centered.iter().map(|x| x * x).sum::<f64>().sqrt();
            (norm > 0.0).then(|| centered.iter().map(|x| x / norm).collect())
        })
        .collect();
    let undefined: Vec<usize> = (0..f).filter(|&i| normed[i].is_none()).collect();
    let mut values = vec![f64::NAN; f * f];
    for i in 0..f {
        let Some(a) = &normed[i] else { continue };
        values[i * f + i] = 1.0;
        for j in i + 1..f {
            let Some(b) = &normed[j] else { continue };
            let rho = a
                .iter()
                .zip(b)
                .map(|(x, y)| x * y)
                .sum::<f64>()
                .clamp(-1.0, 1.0);
            values[i * f + j] = rho;
            values[j * f + i] = rho;
        }
    }
    (values, undefined)
}

pub fn feature_label(net: &NetworkModel, bus: usize, phase: Phase) -> String {
    format!("{}.{}", net.bus_id(bus), phase)
}

/// Spearman matrix of voltage angle or magnitude features across scenarios,
/// optionally restricted to one phase.
pub fn spearman_matrix(
    net: &NetworkModel,
    states: &[StateVector],
    kind: FeatureKind,
    phase: Option<Phase>,
) -> Result<CorrelationMatrix, SelectError> {
    if states.len() < 3 {
        return Err(SelectError::TooFewScenarios(states.len()));
    }
    if let Some(s) = states.iter().find(|s| s.len() != net.phase_count()) {
        return Err(SelectError::StateShape {
            got: s.len(),
            expected: net.phase_count(),
        });
    }
    let features: Vec<(usize, usize, Phase)> = net
        .state_labels()
        .iter()
        .enumerate()
        .filter(|(_, (_, p))| phase.is_none_or(|q| q == *p))
        .map(|(i, &(b, p))| (i, b, p))
        .collect();
    let columns: Vec<Vec<f64>> = features
        .iter()
        .map(|&(i, _, _)| {
            states
                .iter()
                .map(|s| match kind {
                    FeatureKind::Angle => s.vang_deg[i],
                    FeatureKind::Magnitude => s.vmag_pu[i],
                })
                .collect()
        })
        .collect();
    let (values, undefined) = spearman_columns(&columns);
    let labels: Vec<String> = features
        .iter()
        .map(|&(_, b, p)| feature_label(net, b, p))
        .collect();
    for &u in &undefined {
        log::warn!(
            "feature {} is constant; excluded from clustering",
            labels[u]
        );
    }
    Ok(CorrelationMatrix {
        labels,
        features: features.iter().map(|&(_, b, p)| (b, p)).collect(),
        values,
        undefined,
    })
}

/// Average-linkage agglomerative clustering on `1 − |ρ|`, stopping once the
/// closest pair is farther than `1 − threshold`. Undefined features are left
/// out. Clusters are sorted by their smallest member; ties in merge distance
/// go to the pair with the smallest member indices.
pub fn cluster_features(
    corr: &CorrelationMatrix,
    threshold: f64,
) -> Result<Vec<Vec<usize>>, SelectError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(SelectError::Threshold(threshold));
    }
    let skip: BTreeSet<usize> = corr.undefined.iter().copied().collect();
    let mut clusters: Vec<Vec<usize>> = (0..corr.len())
        .filter(|i| !skip.contains(i))
        .map(|i| vec![i])
        .collect();
    let cut = 1.0 - threshold;
    let dist = |a: &[usize], b: &[usize]| {
        let mut s = 0.0;
        for &i in a {
            for &j in b {
                s += 1.0 - corr.get(i, j).abs();
            }
        }
        s / (a.len() * b.len()) as f64
    };
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for x in 0..clusters.len() {
            for y in x + 1..clusters.len() {
                let d = dist(&clusters[x], &clusters[y]);
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, x, y));
                }
            }
        }
        match best {
            Some((d, x, y)) if d <= cut => {
                let merged = clusters.remove(y);
                clusters[x].extend(merged);
                clusters[x].sort_unstable();
            }
            _ => break,
        }
    }
    clusters.sort_by_key(|c| c[0]);
    Ok(clusters)
}

/// Every (upstream bus, branch) site, or a voltage-only site on a single-bus
/// network.
pub fn candidate_sites(net: &NetworkModel) -> Vec<Site> {
    if net.branches().is_empty() {
        return vec![Site::voltage_only(net.bus_id(net.source_bus()))];
    }
    let mut sites: Vec<Site> = net
        .branches()
        .iter()
        .map(|br| Site::new(net.bus_id(br.from), net.bus_id(br.to)))
        .collect();
    sites.sort();
    sites
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementPlan {
    pub clusters: Vec<Vec<String>>,
    pub undefined_features: Vec<String>,
    /// POI of every candidate site, by site label.
    pub poi: BTreeMap<String, usize>,
    pub placement: SmdPlacement,
    /// Disagreements between the phase-A clustering and phases B/C.
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug)]
pub struct SelectOptions {
    pub threshold: f64,
    /// Number of SMDs; defaults to the cluster count.
    pub k: Option<usize>,
    pub poi: PoiOptions,
}

impl Default for SelectOptions {
    fn default() -> Self {
        SelectOptions {
            threshold: 0.9,
            k: None,
            poi: PoiOptions::default(),
        }
    }
}

fn bus_partition(
    corr: &CorrelationMatrix,
    clusters: &[Vec<usize>],
    net: &NetworkModel,
) -> BTreeSet<BTreeSet<String>> {
    clusters
        .iter()
        .map(|c| {
            c.iter()
                .map(|&i| net.bus_id(corr.features[i].0).to_string())
                .collect()
        })
        .collect()
}

/// Restrict a partition of buses to the buses present in `keep`.
fn restrict(
    part: &BTreeSet<BTreeSet<String>>,
    keep: &BTreeSet<String>,
) -> BTreeSet<BTreeSet<String>> {
    part.iter()
        .map(|c| c.intersection(keep).cloned().collect::<BTreeSet<_>>())
        .filter(|c| !c.is_empty())
        .collect()
}

/// Cluster phase-A angles, then put one SMD in each cluster at its highest-POI
/// candidate site. Extra SMDs beyond the cluster count go to the next-best
/// POI sites overall; fewer SMDs keep the largest clusters.
pub fn recommend_placement(
    net: &NetworkModel,
    states: &[StateVector],
    opts: SelectOptions,
) -> Result<PlacementPlan, SelectError> {
    let corr = spearman_matrix(net, states, FeatureKind::Angle, Some(Phase::A))?;
    let mut clusters = cluster_features(&corr, opts.threshold)?;
    if clusters.is_empty() {
        if corr.is_empty() {
            return Err(SelectError::NoFeatures);
        }
        // Every feature is constant (e.g. a lone source bus): nothing to
        // separate, so treat the feeder as one cluster.
        log::warn!("all phase-A angle features are constant; using a single cluster");
        clusters = vec![(0..corr.len()).collect()];
    }

    let mut warnings = vec![];
    let part_a = bus_partition(&corr, &clusters, net);
    for ph in [Phase::B, Phase::C] {
        let c = spearman_matrix(net, states, FeatureKind::Angle, Some(ph))?;
        let cl = cluster_features(&c, opts.threshold)?;
        if cl.is_empty() {
            continue;
        }
        let part = bus_partition(&c, &cl, net);
        let shared: BTreeSet<String> = part
            .iter()
            .flatten()
            .filter(|b| part_a.iter().flatten().any(|x| x == *b))
            .cloned()
            .collect();
        if restrict(&part, &shared) != restrict(&part_a, &shared) {
            let msg = format!("phase {ph} angle clusters differ from phase A on shared buses");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }

    // Cluster of each bus by its phase-A angle feature.
    let mut bus_cluster: BTreeMap<usize, usize> = BTreeMap::new();
    for (ci, c) in clusters.iter().enumerate() {
        for &f in c {
            bus_cluster.insert(corr.features[f].0, ci);
        }
    }

    let mut scores: Vec<(Site, usize)> = vec![];
    for site in candidate_sites(net) {
        let layout = SmdPlacement {
            sites: vec![site.clone()],
        }
        .resolve(net)?;
        scores.push((site, poi(net, &layout, opts.poi)));
    }
    // Highest POI first; ties by bus ids.
    let mut ranked: Vec<&(Site, usize)> = scores.iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut per_cluster: Vec<Option<Site>> = vec![None; clusters.len()];
    for (site, _) in &ranked {
        let bus = net.bus_index(&site.bus).expect("candidate bus exists");
        if let Some(&ci) = bus_cluster.get(&bus) {
            if per_cluster[ci].is_none() {
                per_cluster[ci] = Some(site.clone());
            }
        }
    }
    if let Some(ci) = per_cluster.iter().position(Option::is_none) {
        return Err(SelectError::EmptyCluster(ci));
    }
    let k = opts.k.unwrap_or(clusters.len());
    let mut order: Vec<usize> = (0..clusters.len()).collect();
    if k < clusters.len() {
        order.sort_by(|&a, &b| clusters[b].len().cmp(&clusters[a].len()).then(a.cmp(&b)));
        order.truncate(k);
        order.sort_unstable();
    }
    let mut chosen: Vec<Site> = order
        .iter()
        .map(|&ci| per_cluster[ci].clone().unwrap())
        .collect();
    for (site, _) in &ranked {
        if chosen.len() >= k {
            break;
        }
        if !chosen.contains(site) {
            chosen.push(site.clone());
        }
    }

    Ok(PlacementPlan {
        clusters: clusters
            .iter()
            .map(|c| c.iter().map(|&i| corr.labels[i].clone()).collect())
            .collect(),
        undefined_features: corr
            .undefined
            .iter()
            .map(|&i| corr.labels[i].clone())
            .collect(),
        poi: scores.iter().map(|(s, p)| (s.label(), *p)).collect(),
        placement: SmdPlacement { sites: chosen },
        warnings,
    })
}

#[cfg(test)]
mod tests;
