mod common;

use common::reaches_all_from_everywhere;
use gtsim::graph::{
    build_mixing, generate_connectivity, generate_ring_plus_random, is_strongly_connected, Digraph, GraphError,
};
use proptest::prelude::*;

fn ring_args() -> impl Strategy<Value = (usize, usize, u64)> {
    (2_usize..32).prop_flat_map(|m| (Just(m), 0..=m - 2, any::<u64>()))
}

fn density_args() -> impl Strategy<Value = (usize, f64, u64)> {
    (2_usize..32).prop_flat_map(|m| {
        let lo = 1.0 / (m - 1) as f64;
        (Just(m), (0.0..=1.0).prop_map(move |u: f64| lo + u * (1.0 - lo)), any::<u64>())
    })
}

fn arbitrary_graph() -> impl Strategy<Value = Digraph> {
    (2_usize..12).prop_flat_map(|m| {
        proptest::collection::btree_set((0..m, 0..m), 0..=m * m)
            .prop_map(move |set| Digraph::new(m, set.into_iter().filter(|(a, b)| a != b)).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn ring_plus_random_is_strongly_connected((m, extra, seed) in ring_args()) {
        let g = generate_ring_plus_random(m, extra, seed).unwrap();
        prop_assert!(reaches_all_from_everywhere(&g));
        prop_assert_eq!(g.edge_count(), m * (extra + 1));
        for i in 0..m {
            prop_assert!(g.has_edge(i, (i + 1) % m));
            prop_assert_eq!(g.out_neighbors(i).len(), extra + 1);
            prop_assert!(!g.has_edge(i, i));
        }
    }

    #[test]
    fn connectivity_generator_hits_the_density((m, p, seed) in density_args()) {
        let g = generate_connectivity(m, p, seed).unwrap();
        prop_assert!(reaches_all_from_everywhere(&g));
        let total = (m * (m - 1)) as f64;
        let expected = ((p * total) - 1e-9).ceil().max(m as f64);
        prop_assert_eq!(g.edge_count() as f64, expected);
        prop_assert!(g.density() + 1e-12 >= p);
        prop_assert!(g.density() - p < 1.0 / total + 1e-12);
    }

    #[test]
    fn connectivity_check_agrees_with_bfs_oracle(g in arbitrary_graph()) {
        prop_assert_eq!(is_strongly_connected(&g), reaches_all_from_everywhere(&g));
    }

    #[test]
    fn mixing_is_stochastic_on_the_graph((m, extra, seed) in ring_args()) {
        let g = generate_ring_plus_random(m, extra, seed).unwrap();
        let mix = build_mixing(&g).unwrap();
        for i in 0..m {
            let row: f64 = mix.w[i].iter().sum();
            let col: f64 = (0..m).map(|r| mix.a[r][i]).sum();
            prop_assert!((row - 1.0).abs() < 1e-12);
            prop_assert!((col - 1.0).abs() < 1e-12);
            prop_assert!(mix.w[i][i] > 0.0 && mix.a[i][i] > 0.0);
            for j in 0..m {
                if i != j {
                    prop_assert_eq!(mix.w[i][j] > 0.0, g.has_edge(j, i));
                    prop_assert_eq!(mix.a[i][j] > 0.0, g.has_edge(j, i));
                }
            }
        }
        let smallest = mix.w.iter().chain(&mix.a).flatten().copied().filter(|&x| x > 0.0).fold(1.0, f64::min);
        prop_assert_eq!(mix.min_weight, smallest);
    }

    #[test]
    fn edge_list_round_trips(g in arbitrary_graph()) {
        let back = Digraph::from_edge_list(&g.to_edge_list()).unwrap();
        prop_assert_eq!(back, g);
    }

    #[test]
    fn generators_are_deterministic((m, extra, seed) in ring_args()) {
        prop_assert_eq!(generate_ring_plus_random(m, extra, seed).unwrap(), generate_ring_plus_random(m, extra, seed).unwrap());
    }
}

#[test]
fn mixing_rejects_disconnected_graphs() {
    let g = Digraph::new(3, [(0, 1), (1, 0), (1, 2)]).unwrap();
    assert_eq!(build_mixing(&g), Err(GraphError::NotStronglyConnected));
}

#[test]
fn density_below_the_cycle_is_rejected() {
    assert!(matches!(generate_connectivity(4, 0.1, 0), Err(GraphError::InvalidArgument(_))));
    // Two agents need both edges, so any p < 1 is below the cycle.
    assert!(generate_connectivity(2, 0.7, 0).is_err());
    assert_eq!(generate_connectivity(2, 1.0, 0).unwrap().edge_count(), 2);
}

#[test]
fn full_density_is_complete() {
    let g = generate_connectivity(7, 1.0, 3).unwrap();
    assert_eq!(g.edge_count(), 42);
}
