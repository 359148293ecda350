//! Linear weighted-least-squares state estimation from synchrophasor channels.
//!
//! States are rectangular phase voltages. Voltage channels map to identity
//! rows, current channels to rows of the branch admittance equations, and
//! zero-injection phases plus regulator ratios enter as heavily weighted
//! pseudo-measurements.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cmat::{CMat3, C64, CZERO};
use crate::netmodel::{BranchKind, NetworkModel};
use crate::phase::Phase;
use crate::powerflow::pu::{BranchModel, PerUnitNetwork};
use crate::powerflow::{PowerFlowSolution, StateVector};
use crate::select::{candidate_sites, observed_phases, poi, PoiOptions};
use crate::smdsim::{
    extract_true_channels, ChannelKind, ChannelLayout, Site, SmdError, SmdPlacement, TveModel,
};

/// Pseudo-measurement weight relative to the largest channel weight.
pub const PSEUDO_WEIGHT_RATIO: f64 = 1e6;

/// Smallest channel magnitude (pu) used when deriving noise σ.
pub const MIN_REFERENCE_MAGNITUDE: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum LseError {
    #[error("branch {0} has a singular series impedance")]
    SingularBranch(String),
    #[error("network is not fully observable: rank {} of {}", .0.rank, .0.columns)]
    Unobservable(Box<ObservabilityReport>),
    #[error("measurement vector has {got} values, model expects {expected}")]
    Shape { got: usize, expected: usize },
    #[error("non-finite measurement at row {0}")]
    NonFinite(usize),
    #[error("invalid noise spec: {0}")]
    Noise(String),
    #[error(transparent)]
    Smd(#[from] SmdError),
}

/// Per-channel std of each rectangular noise component, pu.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelNoise {
    pub sigma: Vec<f64>,
}

impl ChannelNoise {
    pub fn uniform(channels: usize, sigma: f64) -> Self {
        ChannelNoise {
            sigma: vec![sigma; channels],
        }
    }

    /// TVE-derived σ scaled by each channel's reference magnitude, floored at
    /// [`MIN_REFERENCE_MAGNITUDE`] so idle channels keep a finite weight.
    pub fn from_tve(tve: &TveModel, reference: &[C64]) -> Self {
        ChannelNoise {
            sigma: reference
                .iter()
                .map(|c| tve.sigma(c.norm().max(MIN_REFERENCE_MAGNITUDE)))
                .collect(),
        }
    }

    /// TVE-derived σ with magnitudes taken from a reference power-flow
    /// solution, usually the nominal operating point.
    pub fn from_solution(tve: &TveModel, layout: &ChannelLayout, sol: &PowerFlowSolution) -> Self {
        Self::from_tve(tve, &extract_true_channels(layout, sol))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowSource {
    /// Channel index in the layout and real/imaginary part.
    Channel { channel: usize, imag: bool },
    ZeroInjection {
        bus: String,
        phase: Phase,
        imag: bool,
    },
    Regulator {
        branch: String,
        phase: Phase,
        imag: bool,
    },
}

/// `z = H x + e` with `x = [re V₀, im V₀, re V₁, im V₁, …]` in state order.
#[derive(Clone, Debug)]
pub struct LinearModel {
    pub h: DMatrix<f64>,
    /// Diagonal of W.
    pub weights: Vec<f64>,
    pub rows: Vec<RowSource>,
    pub columns: Vec<(usize, Phase)>,
    /// Current channels that cannot be written in terms of voltages alone
    /// (regulator currents without zero-injection support); they get no row.
    pub dropped_channels: Vec<usize>,
}

impl LinearModel {
    pub fn n_rows(&self) -> usize {
        self.h.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.h.ncols()
    }

    /// Stack channel phasors into the row layout; pseudo rows are zero.
    pub fn measurement_vector(&self, channels: &[C64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| match r {
                RowSource::Channel { channel, imag } => {
                    let c = channels[*channel];
                    if *imag {
                        c.im
                    } else {
                        c.re
                    }
                }
                _ => 0.0,
            })
            .collect()
    }

    pub fn state_to_rect(state: &StateVector) -> Vec<f64> {
        state.phasors().iter().flat_map(|v| [v.re, v.im]).collect()
    }

    /// Weighted squared residual `(z − Hx)ᵀ W (z − Hx)`.
    pub fn objective(&self, z: &[f64], x: &[f64]) -> f64 {
        let r = DVector::from_column_slice(z) - &self.h * DVector::from_column_slice(x);
        r.iter().zip(&self.weights).map(|(ri, w)| w * ri * ri).sum()
    }

    /// Same model with every row repeated `times` times.
    pub fn repeated(&self, times: usize) -> LinearModel {
        let idx: Vec<usize> = (0..times).flat_map(|_| 0..self.n_rows()).collect();
        LinearModel {
            h: self.h.select_rows(idx.iter()),
            weights: idx.iter().map(|&i| self.weights[i]).collect(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            columns: self.columns.clone(),
            dropped_channels: self.dropped_channels.clone(),
        }
    }
}

/// Sparse complex linear form over state phasors.
type Form = BTreeMap<usize, C64>;

fn add_form(acc: &mut Form, f: &Form, scale: C64) {
    for (&j, &c) in f {
        *acc.entry(j).or_insert(CZERO) += c * scale;
    }
}

fn singular_branch(net: &NetworkModel) -> String {
    let data = net.data();
    net.branches()
        .iter()
        .position(|br| match br.kind {
            BranchKind::Line => data.lines[br.element]
                .series_impedance()
                .inverse_on(br.phases)
                .is_none(),
            BranchKind::Transformer => data.transformers[br.element].z_pu.norm() == 0.0,
            BranchKind::Regulator => false,
        })
        .map(|bi| net.branch_label(bi))
        .unwrap_or_default()
}

struct Builder<'a> {
    net: &'a NetworkModel,
    pu: PerUnitNetwork,
    zips: BTreeSet<(usize, Phase)>,
}

impl Builder<'_> {
    /// Row `k` of `m · V_bus` as a form.
    fn mat_row(&self, m: &CMat3, bus: usize, k: usize, scale: C64, out: &mut Form) {
        for p in self.net.bus(bus).phases.iter() {
            let c = m.0[k][p.index()];
            if c != CZERO {
                let j = self.net.state_index(bus, p).expect("present phase");
                *out.entry(j).or_insert(CZERO) += c * scale;
            }
        }
    }

    /// Current leaving branch `bi` at its load-side end, phase `k`.
    fn receiving_current(&self, bi: usize, k: usize) -> Option<Form> {
        let br = &self.net.branches()[bi];
        let mut f = Form::new();
        match &self.pu.branches[bi] {
            BranchModel::Line {
                y_series, y_half, ..
            } => {
                self.mat_row(y_series, br.from, k, C64::new(1.0, 0.0), &mut f);
                self.mat_row(y_series, br.to, k, C64::new(-1.0, 0.0), &mut f);
                self.mat_row(y_half, br.to, k, C64::new(-1.0, 0.0), &mut f);
            }
            BranchModel::Transformer { a, y_series, .. } => {
                let ya = *y_series * *a;
                self.mat_row(&ya, br.from, k, C64::new(1.0, 0.0), &mut f);
                self.mat_row(y_series, br.to, k, C64::new(-1.0, 0.0), &mut f);
            }
            BranchModel::Regulator { .. } => {
                let p = Phase::from_index(k);
                if !self.zips.contains(&(br.to, p)) {
                    return None;
                }
                for &c in self.net.child_branches(br.to) {
                    if self.net.branches()[c].phases.contains(p) {
                        add_form(&mut f, &self.sending_current(c, k)?, C64::new(1.0, 0.0));
                    }
                }
            }
        }
        Some(f)
    }

    /// Current entering branch `bi` at its source-side end, phase `k`.
    fn sending_current(&self, bi: usize, k: usize) -> Option<Form> {
        let br = &self.net.branches()[bi];
        let mut f = Form::new();
        match &self.pu.branches[bi] {
            BranchModel::Line {
                y_series, y_half, ..
            } => {
                self.mat_row(y_series, br.from, k, C64::new(1.0, 0.0), &mut f);
                self.mat_row(y_series, br.to, k, C64::new(-1.0, 0.0), &mut f);
                self.mat_row(y_half, br.from, k, C64::new(1.0, 0.0), &mut f);
            }
            BranchModel::Transformer { a, y_series, .. } => {
                let ah = a.adjoint();
                let m_from = ah * (*y_series * *a);
                let m_to = ah * *y_series;
                self.mat_row(&m_from, br.from, k, C64::new(1.0, 0.0), &mut f);
                self.mat_row(&m_to, br.to, k, C64::new(-1.0, 0.0), &mut f);
            }
            BranchModel::Regulator { ratio } => {
                add_form(
                    &mut f,
                    &self.receiving_current(bi, k)?,
                    C64::new(ratio[k], 0.0),
                );
            }
        }
        Some(f)
    }
}

fn push_complex_rows(
    form: &Form,
    weight: f64,
    sources: [RowSource; 2],
    rows: &mut Vec<Vec<(usize, f64)>>,
    weights: &mut Vec<f64>,
    labels: &mut Vec<RowSource>,
) {
    let mut re = Vec::with_capacity(form.len() * 2);
    let mut im = Vec::with_capacity(form.len() * 2);
    for (&j, &c) in form {
        re.push((2 * j, c.re));
        re.push((2 * j + 1, -c.im));
        im.push((2 * j, c.im));
        im.push((2 * j + 1, c.re));
    }
    let [s_re, s_im] = sources;
    rows.push(re);
    rows.push(im);
    weights.extend([weight, weight]);
    labels.extend([s_re, s_im]);
}

/// Assemble H and W for a resolved placement.
pub fn build_linear_model(
    net: &NetworkModel,
    layout: &ChannelLayout,
    noise: &ChannelNoise,
) -> Result<LinearModel, LseError> {
    if noise.sigma.len() != layout.channels.len() {
        return Err(LseError::Noise(format!(
            "{} sigmas for {} channels",
            noise.sigma.len(),
            layout.channels.len()
        )));
    }
    if let Some(s) = noise.sigma.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(LseError::Noise(format!("sigma {s} must be positive")));
    }
    let pu = PerUnitNetwork::new(net, None)
        .ok_or_else(|| LseError::SingularBranch(singular_branch(net)))?;
    let b = Builder {
        net,
        pu,
        zips: net.zero_injection_phases(),
    };

    let mut rows = Vec::new();
    let mut weights = Vec::new();
    let mut labels = Vec::new();
    let mut dropped = Vec::new();
    for (ci, ch) in layout.channels.iter().enumerate() {
        let k = ch.phase.index();
        let form = match (ch.kind, ch.branch) {
            (ChannelKind::Voltage, _) => {
                let j = net
                    .state_index(ch.bus, ch.phase)
                    .expect("channel on present phase");
                Some(Form::from([(j, C64::new(1.0, 0.0))]))
            }
            (ChannelKind::Current, Some(bi)) if ch.at_from => b.sending_current(bi, k),
            (ChannelKind::Current, Some(bi)) => b
                .receiving_current(bi, k)
                .map(|f| f.into_iter().map(|(j, c)| (j, -c)).collect()),
            (ChannelKind::Current, None) => None,
        };
        let Some(form) = form else {
            dropped.push(ci);
            continue;
        };
        let w = 1.0 / (noise.sigma[ci] * noise.sigma[ci]);
        let src = |imag| RowSource::Channel { channel: ci, imag };
        push_complex_rows(
            &form,
            w,
            [src(false), src(true)],
            &mut rows,
            &mut weights,
            &mut labels,
        );
    }

    if !rows.is_empty() {
        let pseudo_w = PSEUDO_WEIGHT_RATIO * weights.iter().cloned().fold(0.0, f64::max);
        for &(bus, p) in &b.zips {
            let Some(parent) = net.parent_branch(bus) else {
                continue;
            };
            if matches!(b.pu.branches[parent], BranchModel::Regulator { .. }) {
                continue;
            }
            let k = p.index();
            let Some(mut form) = b.receiving_current(parent, k) else {
                continue;
            };
            let mut ok = true;
            for &c in net.child_branches(bus) {
                if net.branches()[c].phases.contains(p) {
                    match b.sending_current(c, k) {
                        Some(f) => add_form(&mut form, &f, C64::new(-1.0, 0.0)),
                        None => ok = false,
                    }
                }
            }
            if !ok {
                continue;
            }
            let id = net.bus_id(bus).to_string();
            let src = |imag| RowSource::ZeroInjection {
                bus: id.clone(),
                phase: p,
                imag,
            };
            push_complex_rows(
                &form,
                pseudo_w,
                [src(false), src(true)],
                &mut rows,
                &mut weights,
                &mut labels,
            );
        }
        for (bi, br) in net.branches().iter().enumerate() {
            let BranchModel::Regulator { ratio } = &b.pu.branches[bi] else {
                continue;
            };
            for p in br.phases.iter() {
                let f = net.state_index(br.from, p).expect("regulator phase");
                let t = net.state_index(br.to, p).expect("regulator phase");
                let form = Form::from([
                    (f, C64::new(ratio[p.index()], 0.0)),
                    (t, C64::new(-1.0, 0.0)),
                ]);
                let label = net.branch_label(bi);
                let src = |imag| RowSource::Regulator {
                    branch: label.clone(),
                    phase: p,
                    imag,
                };
                push_complex_rows(
                    &form,
                    pseudo_w,
                    [src(false), src(true)],
                    &mut rows,
                    &mut weights,
                    &mut labels,
                );
            }
        }
    }

    let n = 2 * net.phase_count();
    let mut h = DMatrix::zeros(rows.len(), n);
    for (i, row) in rows.iter().enumerate() {
        for &(j, v) in row {
            h[(i, j)] += v;
        }
    }
    Ok(LinearModel {
        h,
        weights,
        rows: labels,
        columns: net.state_labels().to_vec(),
        dropped_channels: dropped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityReport {
    pub full_rank: bool,
    pub rank: usize,
    pub columns: usize,
    /// Unobservable (bus id, phase) pairs in state order.
    pub unobservable: Vec<(String, Phase)>,
}

/// Null-space row norm above which a variable counts as unobservable.
const NULL_SPACE_TOL: f64 = 1e-6;

/// Numerical rank of H (rows normalized) and the variables touched by its
/// null space.
pub fn check_observability(net: &NetworkModel, model: &LinearModel) -> ObservabilityReport {
    let (m, n) = (model.n_rows(), model.n_cols());
    let mut a = DMatrix::zeros(m.max(n), n);
    for i in 0..m {
        let row = model.h.row(i);
        let norm = row.norm();
        if norm > 0.0 {
            a.row_mut(i).copy_from(&(row / norm));
        }
    }
    let svd = a.svd(false, true);
    let sv = &svd.singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let tol = (m.max(n) as f64) * f64::EPSILON * smax.max(1.0) * 1e3;
    let v_t = svd.v_t.as_ref().expect("requested V");
    let mut null_norm = vec![0.0; n];
    let mut rank = 0;
    for (r, &s) in sv.iter().enumerate() {
        if s > tol && m > 0 {
            rank += 1;
        } else {
            for j in 0..n {
                null_norm[j] += v_t[(r, j)] * v_t[(r, j)];
            }
        }
    }
    let unobservable = model
        .columns
        .iter()
        .enumerate()
        .filter(|(j, _)| (null_norm[2 * j] + null_norm[2 * j + 1]).sqrt() > NULL_SPACE_TOL)
        .map(|(_, &(b, p))| (net.bus_id(b).to_string(), p))
        .collect::<Vec<_>>();
    ObservabilityReport {
        full_rank: rank == n,
        rank,
        columns: n,
        unobservable,
    }
}

/// WLS estimator with the orthogonal factorization of `W^½ H` cached. Rows
/// are ordered by decreasing weight before factoring, which keeps Householder
/// QR accurate with stiff pseudo-measurement weights, and each solve is
/// polished by refinement of the augmented system `r + A x = b, Aᵀ r = 0`.
pub struct WlsEstimator {
    sqrt_w: Vec<f64>,
    a: DMatrix<f64>,
    order: Vec<usize>,
    q_t: DMatrix<f64>,
    r: DMatrix<f64>,
    rows: usize,
}

const REFINEMENT_STEPS: usize = 2;

impl WlsEstimator {
    pub fn new(net: &NetworkModel, model: &LinearModel) -> Result<Self, LseError> {
        let report = check_observability(net, model);
        if !report.full_rank {
            return Err(LseError::Unobservable(Box::new(report)));
        }
        let sqrt_w: Vec<f64> = model.weights.iter().map(|w| w.sqrt()).collect();
        let mut order: Vec<usize> = (0..model.n_rows()).collect();
        order.sort_by(|&i, &j| model.weights[j].total_cmp(&model.weights[i]));
        let mut a = model.h.select_rows(order.iter());
        for (i, &o) in order.iter().enumerate() {
            a.row_mut(i).scale_mut(sqrt_w[o]);
        }
        let qr = a.clone().qr();
        Ok(WlsEstimator {
            sqrt_w,
            q_t: qr.q().transpose(),
            r: qr.r(),
            a,
            order,
            rows: model.n_rows(),
        })
    }

    fn ls_step(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.r
            .solve_upper_triangular(&(&self.q_t * rhs))
            .expect("full-rank R has a nonzero diagonal")
    }

    /// Corrections `(δr, δx)` for `δr + A δx = f`, `Aᵀ δr = g`.
    fn augmented_step(&self, f: &DVector<f64>, g: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let h = self
            .r
            .tr_solve_upper_triangular(g)
            .expect("full-rank R has a nonzero diagonal");
        let d = &self.q_t * f;
        let dx = self
            .r
            .solve_upper_triangular(&(&d - &h))
            .expect("full-rank R has a nonzero diagonal");
        let dr = f + self.q_t.tr_mul(&(h - d));
        (dr, dx)
    }

    pub fn solve(&self, z: &[f64]) -> Result<StateVector, LseError> {
        if z.len() != self.rows {
            return Err(LseError::Shape {
                got: z.len(),
                expected: self.rows,
            });
        }
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(LseError::NonFinite(i));
        }
        let b = DVector::from_iterator(z.len(), self.order.iter().map(|&o| z[o] * self.sqrt_w[o]));
        let mut x = self.ls_step(&b);
        let mut r = &b - &self.a * &x;
        for _ in 0..REFINEMENT_STEPS {
            let f = &b - &r - &self.a * &x;
            let g = -self.a.tr_mul(&r);
            let (dr, dx) = self.augmented_step(&f, &g);
            r += dr;
            x += dx;
        }
        let phasors: Vec<C64> = x
            .as_slice()
            .chunks(2)
            .map(|c| C64::new(c[0], c[1]))
            .collect();
        Ok(StateVector::from_phasors(&phasors))
    }

    /// Estimate from raw channel phasors.
    pub fn estimate(&self, model: &LinearModel, channels: &[C64]) -> Result<StateVector, LseError> {
        self.solve(&model.measurement_vector(channels))
    }
}

/// One-shot `argmin (z − Hx)ᵀ W (z − Hx)`.
pub fn wls_solve(
    net: &NetworkModel,
    model: &LinearModel,
    z: &[f64],
) -> Result<StateVector, LseError> {
    WlsEstimator::new(net, model)?.solve(z)
}

fn rank_of(net: &NetworkModel, sites: &[Site]) -> Result<ObservabilityReport, LseError> {
    let layout = SmdPlacement {
        sites: sites.to_vec(),
    }
    .resolve(net)?;
    let noise = ChannelNoise::uniform(layout.channels.len(), 1.0);
    Ok(check_observability(
        net,
        &build_linear_model(net, &layout, &noise)?,
    ))
}

/// Greedy site selection until H has full rank: each step adds the candidate
/// observing the most new phase voltages (ties to the smaller site), falling
/// back to the largest rank gain once the combinatorial count stalls.
pub fn greedy_observability_placement(net: &NetworkModel) -> Result<SmdPlacement, LseError> {
    let candidates = candidate_sites(net);
    let mut chosen: Vec<Site> = Vec::new();
    let opts = PoiOptions::default();
    let total = net.phase_count();
    let observed = |sites: &[Site]| -> Result<usize, LseError> {
        let layout = SmdPlacement {
            sites: sites.to_vec(),
        }
        .resolve(net)?;
        Ok(observed_phases(net, &layout, opts).len())
    };
    let mut have = 0;
    while have < total {
        let mut best: Option<(usize, &Site)> = None;
        for c in candidates.iter().filter(|c| !chosen.contains(c)) {
            let mut trial = chosen.clone();
            trial.push(c.clone());
            let gain = observed(&trial)? - have;
            if best.is_none_or(|(g, _)| gain > g) {
                best = Some((gain, c));
            }
        }
        match best {
            Some((g, site)) if g > 0 => {
                chosen.push(site.clone());
                have += g;
            }
            _ => break,
        }
    }
    let mut report = rank_of(net, &chosen)?;
    while !report.full_rank {
        let mut best: Option<(usize, Site)> = None;
        let mut extra: Vec<Site> = candidates.clone();
        extra.extend(net.buses().iter().map(|b| Site::voltage_only(&b.id)));
        for c in extra.into_iter().filter(|c| !chosen.contains(c)) {
            let mut trial = chosen.clone();
            trial.push(c.clone());
            let r = rank_of(net, &trial)?.rank;
            if best.as_ref().is_none_or(|(g, _)| r > *g) {
                best = Some((r, c));
            }
        }
        let (_, site) = best.expect("some candidate remains while rank is deficient");
        chosen.push(site);
        report = rank_of(net, &chosen)?;
    }
    Ok(SmdPlacement { sites: chosen })
}

/// Extend `placement` to at least `min_sites` SMDs with the unused candidate
/// sites of highest single-site POI (ties to the smaller site). Stops early
/// when candidates run out.
pub fn pad_placement(
    net: &NetworkModel,
    placement: &SmdPlacement,
    min_sites: usize,
) -> Result<SmdPlacement, LseError> {
    let mut sites = placement.sites.clone();
    if sites.len() >= min_sites {
        return Ok(SmdPlacement { sites });
    }
    let mut ranked = vec![];
    for c in candidate_sites(net)
        .into_iter()
        .filter(|c| !sites.contains(c))
    {
        let layout = SmdPlacement {
            sites: vec![c.clone()],
        }
        .resolve(net)?;
        ranked.push((poi(net, &layout, PoiOptions::default()), c));
    }
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    sites.extend(
        ranked
            .into_iter()
            .map(|(_, c)| c)
            .take(min_sites - sites.len()),
    );
    Ok(SmdPlacement { sites })
}
