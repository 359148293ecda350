use super::*;
use crate::cmat::C64;
use crate::loadgen::{gaussian_variation, sample_scenarios, PowerFactorRange};
use crate::netmodel::{load_ieee34_fixture, LoadModel};
use crate::phase::PhaseMask;
use crate::powerflow::{batch_solve, SolveOptions};
use crate::testing::{chain_data, loaded_three_phase_chain, wye_load};
use proptest::prelude::*;

fn matrix(values: Vec<f64>) -> CorrelationMatrix {
    let n = (values.len() as f64).sqrt() as usize;
    CorrelationMatrix {
        labels: (0..n).map(|i| format!("f{i}")).collect(),
        features: (0..n).map(|i| (i, Phase::A)).collect(),
        values,
        undefined: vec![],
    }
}

fn rho(x: &[f64], y: &[f64]) -> f64 {
    let (v, _) = spearman_columns(&[x.to_vec(), y.to_vec()]);
    v[1]
}

fn states_for(net: &NetworkModel, n: usize, seed: u64) -> Vec<StateVector> {
    let d = gaussian_variation(net, 0.5).unwrap();
    let sc = sample_scenarios(&d, PowerFactorRange::default(), n, seed);
    batch_solve(net, &sc, &SolveOptions::default())
        .unwrap()
        .into_iter()
        .map(|s| s.state)
        .collect()
}

fn single_phase_chain(loaded: &[&str]) -> NetworkModel {
    let mut data = chain_data(
        &["A", "B", "C"],
        PhaseMask::single(Phase::A),
        C64::new(0.01, 0.01),
    );
    for b in loaded {
        data.loads
            .push(wye_load(b, Phase::A, LoadModel::ConstantPq, 0.1, 0.02));
    }
    NetworkModel::new(data).unwrap()
}

fn site_poi(net: &NetworkModel, label: &str) -> usize {
    let layout = SmdPlacement::from_labels(&[label]).resolve(net).unwrap();
    poi(net, &layout, PoiOptions::default())
}

#[test]
fn spearman_examples() {
    let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin() * 5.0).collect();
    let cube: Vec<f64> = x.iter().map(|v| v * v * v).collect();
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    assert!((rho(&x, &cube) - 1.0).abs() < 1e-12);
    assert!((rho(&x, &neg) + 1.0).abs() < 1e-12);
    // 1 − 6Σd²/(n(n²−1)) with Σd² = 2, n = 4.
    let oracle = 1.0 - 6.0 * 2.0 / (4.0 * 15.0);
    assert!((rho(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]) - oracle).abs() < 1e-12);
    assert!((oracle - 0.8).abs() < 1e-12);
}

#[test]
fn ranks_average_ties() {
    assert_eq!(ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
}

#[test]
fn constant_feature_is_undefined() {
    let (v, undefined) = spearman_columns(&[vec![1.0, 2.0, 3.0], vec![4.0; 3]]);
    assert_eq!(undefined, vec![1]);
    assert!(v[1].is_nan() && v[3].is_nan());
    assert_eq!(v[0], 1.0);
}

#[test]
fn block_matrix_clusters() {
    let m = matrix(vec![1.0, 0.99, 0.1, 0.99, 1.0, 0.1, 0.1, 0.1, 1.0]);
    assert_eq!(
        cluster_features(&m, 0.9).unwrap(),
        vec![vec![0, 1], vec![2]]
    );
    let ones = matrix(vec![1.0; 16]);
    assert_eq!(
        cluster_features(&ones, 0.9).unwrap(),
        vec![vec![0, 1, 2, 3]]
    );
    assert!(cluster_features(&ones, 1.0).is_err());
}

#[test]
fn poi_hand_networks() {
    let no_zip = single_phase_chain(&["B", "C"]);
    assert!(no_zip.zero_injection_phases().is_empty());
    assert_eq!(site_poi(&no_zip, "B-C"), 2);

    let zip_b = single_phase_chain(&["C"]);
    assert_eq!(site_poi(&zip_b, "A-B"), 3);
    let layout = SmdPlacement::from_labels(&["A-B"]).resolve(&zip_b).unwrap();
    assert_eq!(
        poi(
            &zip_b,
            &layout,
            PoiOptions {
                zip_propagation: false
            }
        ),
        2
    );

    let three = loaded_three_phase_chain(&["S", "X", "Y"], C64::new(0.01, 0.01), 0.1, 0.02);
    assert_eq!(site_poi(&three, "X-Y"), 6);
}

#[test]
fn single_bus_network_gets_one_site() {
    let data = chain_data(&["S"], PhaseMask::ABC, C64::new(0.01, 0.01));
    let net = NetworkModel::new(data).unwrap();
    let states = states_for(&net, 5, 1);
    let plan = recommend_placement(&net, &states, SelectOptions::default()).unwrap();
    assert_eq!(plan.clusters.len(), 1);
    assert_eq!(plan.placement.sites, vec![Site::voltage_only("S")]);
}

#[test]
fn forced_extra_site_takes_next_best_poi() {
    let net = loaded_three_phase_chain(
        &["S", "B1", "B2", "B3", "B4"],
        C64::new(0.01, 0.01),
        0.1,
        0.02,
    );
    let states = states_for(&net, 200, 3);
    let plan = recommend_placement(
        &net,
        &states,
        SelectOptions {
            k: Some(2),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(plan.clusters.len(), 1);
    // Exhaustive ranking oracle: highest POI, then bus ids.
    let mut ranking: Vec<(usize, Site)> = candidate_sites(&net)
        .into_iter()
        .map(|s| (site_poi(&net, &s.label()), s))
        .collect();
    ranking.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    assert_eq!(plan.placement.sites.len(), 2);
    assert_eq!(plan.placement.sites[0], ranking[0].1);
    assert_eq!(plan.placement.sites[1], ranking[1].1);
}

#[test]
fn ieee34_recommendation() {
    let net = load_ieee34_fixture();
    let states = states_for(&net, 1500, 11);
    let plan = recommend_placement(&net, &states, SelectOptions::default()).unwrap();
    assert_eq!(plan.clusters.len(), 2);
    assert_eq!(
        plan.clusters[1],
        vec!["888.A".to_string(), "890.A".to_string()]
    );
    assert_eq!(plan.undefined_features, vec!["800.A".to_string()]);
    assert_eq!(
        plan.placement.labels(),
        vec!["808-812".to_string(), "888-890".to_string()]
    );
    assert_eq!(plan.poi["808-812"], 15);
    assert!(plan.warnings.is_empty(), "{:?}", plan.warnings);

    let corr = spearman_matrix(&net, &states, FeatureKind::Angle, Some(Phase::A)).unwrap();
    for i in 0..corr.len() {
        for j in 0..corr.len() {
            let (a, b) = (corr.get(i, j), corr.get(j, i));
            assert!(a.is_nan() && b.is_nan() || (a - b).abs() < 1e-12);
        }
    }
    let svg = heatmap_svg(&corr, "phase A angles");
    assert!(svg.starts_with("<svg") && svg.contains("888.A"));
}

#[test]
fn sites_never_share_a_cluster() {
    let net = load_ieee34_fixture();
    let states = states_for(&net, 300, 2);
    let plan = recommend_placement(&net, &states, SelectOptions::default()).unwrap();
    let corr = spearman_matrix(&net, &states, FeatureKind::Angle, Some(Phase::A)).unwrap();
    let clusters = cluster_features(&corr, 0.9).unwrap();
    let cluster_of = |bus: &str| {
        clusters
            .iter()
            .position(|c| c.iter().any(|&f| net.bus_id(corr.features[f].0) == bus))
    };
    let used: BTreeSet<_> = plan
        .placement
        .sites
        .iter()
        .map(|s| cluster_of(&s.bus))
        .collect();
    assert_eq!(used.len(), plan.placement.sites.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn spearman_invariant_under_monotone_maps(xs in prop::collection::vec(-100.0f64..100.0, 5..40), ys in prop::collection::vec(-100.0f64..100.0, 5..40)) {
        let n = xs.len().min(ys.len());
        let (x, y) = (&xs[..n], &ys[..n]);
        let tx: Vec<f64> = x.iter().map(|v| v.exp2().ln_1p() + 3.0 * v).collect();
        let ty: Vec<f64> = y.iter().map(|v| v * v * v).collect();
        let (a, _) = spearman_columns(&[x.to_vec(), y.to_vec()]);
        let (b, _) = spearman_columns(&[tx, ty]);
        for (p, q) in a.iter().zip(&b) {
            prop_assert!(p.to_bits() == q.to_bits());
        }
    }

    #[test]
    fn clustering_invariant_under_reordering(seed in any::<u64>(), rot in 1usize..7) {
        use rand::Rng;
        let mut rng = crate::rng::substream(seed, "cluster-prop", 0);
        let base: Vec<Vec<f64>> = (0..3).map(|_| (0..30).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let columns: Vec<Vec<f64>> = (0..8)
            .map(|i| base[i % 3].iter().map(|v| v + 0.05 * rng.random_range(-1.0..1.0)).collect())
            .collect();
        let perm: Vec<usize> = (0..8).map(|i| (i + rot) % 8).collect();
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| columns[i].clone()).collect();
        let cl = |cols: &[Vec<f64>]| {
            let (values, undefined) = spearman_columns(cols);
            let mut m = matrix(values);
            m.undefined = undefined;
            cluster_features(&m, 0.6).unwrap()
        };
        let a: BTreeSet<BTreeSet<usize>> = cl(&columns).into_iter().map(|c| c.into_iter().collect()).collect();
        let b: BTreeSet<BTreeSet<usize>> =
            cl(&shuffled).into_iter().map(|c| c.into_iter().map(|i| perm[i]).collect()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn adding_a_site_never_reduces_coverage(picks in prop::collection::vec(0usize..33, 1..5), extra in 0usize..33) {
        let net = load_ieee34_fixture();
        let sites = candidate_sites(&net);
        let mut chosen: Vec<Site> = vec![];
        for p in picks {
            if !chosen.contains(&sites[p]) {
                chosen.push(sites[p].clone());
            }
        }
        let before = observed_phases(&net, &SmdPlacement { sites: chosen.clone() }.resolve(&net).unwrap(), PoiOptions::default());
        if !chosen.contains(&sites[extra]) {
            chosen.push(sites[extra].clone());
        }
        let after = observed_phases(&net, &SmdPlacement { sites: chosen }.resolve(&net).unwrap(), PoiOptions::default());
        prop_assert!(before.is_subset(&after));
    }
}
