//! Property tests over randomly generated graphs, games and triples.

use std::collections::BTreeSet;

use gemx::graph::{apply_masks, prune_node, state_key, ComponentKind, ExplanationTriple, Graph, PerComponent, Retention};
use gemx::log::{emit_log, parse_log, Event, Selection};
use gemx::mcts::{backpropagate, EpisodeRecord, SearchStats};
use gemx::metrics::{fidelity_term, precision_recall, FidelityKind};
use gemx::model::{EvalOptions, PipelineModel, Scorer};
use gemx::shapley::{exact_shapley, mc_shapley, CooperativeGame, TableGame, ENUMERATION_CAP};
use gemx::synth::{connected_random_graph, random_pipeline, with_random_features};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64, n: usize) -> (Graph, PipelineModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = connected_random_graph(n, 0.3, &mut rng).unwrap();
    let g = with_random_features(&g, 3, 3, &mut rng).unwrap();
    let p = random_pipeline(3, 3, 4, 2, &mut rng).unwrap();
    (g, p)
}

fn subset(mask: u64, n: usize) -> BTreeSet<usize> {
    (0..n).filter(|i| mask >> i & 1 == 1).collect()
}

/// A triple drawn from bit masks; may be disconnected.
fn triple_from(g: &Graph, masks: (u64, u64, u64)) -> ExplanationTriple {
    ExplanationTriple {
        retained_downstream: subset(masks.0, g.num_downstream()),
        subgraph_nodes: subset(masks.1, g.num_nodes()),
        retained_node_features: subset(masks.2, g.num_node_features()),
    }
}

fn kind() -> impl Strategy<Value = ComponentKind> {
    prop_oneof![
        Just(ComponentKind::Downstream),
        Just(ComponentKind::Nodes),
        Just(ComponentKind::NodeFeatures)
    ]
}

fn sizes() -> impl Strategy<Value = PerComponent<usize>> {
    (0..50usize, 0..500usize, 0..50usize).prop_map(|(d, n, f)| PerComponent::new(d, n, f))
}

fn event() -> impl Strategy<Value = Event> {
    prop_oneof![
        (0..100usize, 1..100usize, 0..10_000usize)
            .prop_map(|(rollout, kappa, explored)| Event::RolloutStart { rollout, kappa, explored }),
        (kind(), 0..100usize, 0..100usize).prop_map(|(arm, rollout, breakpoint)| Event::ArmSelected {
            arm,
            how: Selection::Random { rollout, breakpoint }
        }),
        kind().prop_map(|arm| Event::ArmSelected { arm, how: Selection::Oracle }),
        (kind(), 1..10usize, 1..10usize, sizes(), sizes()).prop_map(|(arm, step, budget, parent, child)| {
            Event::Prune {
                arm,
                step,
                budget,
                parent,
                child,
            }
        }),
        kind().prop_map(|arm| Event::RequirementMet { arm }),
        sizes().prop_map(|sizes| Event::EpisodeEnd { sizes }),
        (kind(), any::<bool>()).prop_map(|(arm, refit)| Event::OracleUpdate { arm, refit }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masking_is_idempotent(seed in 0u64..1000, n in 3usize..12, masks in any::<(u64, u64, u64)>()) {
        let (g, _) = instance(seed, n);
        let t = triple_from(&g, masks);
        let once = apply_masks(&g, &t).unwrap();
        let twice = apply_masks(&once, &t).unwrap();
        prop_assert_eq!(once.node_features(), twice.node_features());
        prop_assert_eq!(once.edges(), g.edges());
        prop_assert_eq!(once.downstream_features(), g.downstream_features());
        for (v, row) in once.node_features().iter().enumerate() {
            for (c, &x) in row.iter().enumerate() {
                if !(t.subgraph_nodes.contains(&v) && t.retained_node_features.contains(&c)) {
                    prop_assert_eq!(x, 0.0);
                }
            }
        }
    }

    #[test]
    fn state_keys_are_injective_per_component(
        a in prop::collection::btree_set(0usize..40, 0..10),
        b in prop::collection::btree_set(0usize..40, 0..10),
        k in kind(),
    ) {
        let ta = ExplanationTriple { subgraph_nodes: a.clone(), retained_downstream: a.clone(), retained_node_features: a.clone() };
        let tb = ExplanationTriple { subgraph_nodes: b.clone(), retained_downstream: b.clone(), retained_node_features: b.clone() };
        let (ka, kb) = (state_key(&ta, k), state_key(&tb, k));
        prop_assert_eq!(ka == kb, a == b);
        prop_assert_eq!(&ka, &state_key(&ta.clone(), k));
        prop_assert_eq!(ka.fingerprint(), state_key(&ta, k).fingerprint());
        for other in [ComponentKind::Downstream, ComponentKind::Nodes, ComponentKind::NodeFeatures] {
            if other != k {
                prop_assert_ne!(&ka, &state_key(&ta, other));
            }
        }
    }

    #[test]
    fn exact_shapley_is_efficient(values in prop::collection::vec(-5.0f64..5.0, 1usize << 5), players in 1usize..=5) {
        let game = TableGame::new(players, values[..1 << players].to_vec()).unwrap();
        let total: f64 = (0..players).map(|p| exact_shapley(&game, p, ENUMERATION_CAP).unwrap().value).sum();
        let gap = game.values()[(1 << players) - 1] - game.values()[0];
        prop_assert!((total - gap).abs() < 1e-9, "{} vs {}", total, gap);
    }

    #[test]
    fn monte_carlo_stays_within_marginal_range(values in prop::collection::vec(-5.0f64..5.0, 16), player in 0usize..4, seed: u64, t in 1usize..50) {
        let game = TableGame::new(4, values).unwrap();
        let est = mc_shapley(&game, player, t, seed);
        let marginals: Vec<f64> = (0..16usize)
            .filter(|m| m >> player & 1 == 0)
            .map(|m| game.values()[m | 1 << player] - game.values()[m])
            .collect();
        let lo = marginals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = marginals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(est.value >= lo - 1e-12 && est.value <= hi + 1e-12);
        prop_assert!(est.std_error >= 0.0 && est.std_error.is_finite());
        prop_assert_eq!(game.num_players(), 4);
    }

    #[test]
    fn pruning_keeps_connectivity(seed in 0u64..1000, n in 3usize..16, pick: prop::sample::Index, anchor: prop::sample::Index) {
        let (g, _) = instance(seed, n);
        let t = ExplanationTriple::full(&g);
        let node = pick.index(n);
        for retention in [Retention::Largest, Retention::Anchor(anchor.index(n))] {
            let child = prune_node(&t, &g, node, retention).unwrap();
            prop_assert!(!child.subgraph_nodes.is_empty());
            prop_assert!(!child.subgraph_nodes.contains(&node));
            prop_assert!(child.is_connected(&g));
            prop_assert!(child.subgraph_nodes.is_subset(&t.subgraph_nodes));
            if let Retention::Anchor(v) = retention {
                if v != node {
                    prop_assert!(child.subgraph_nodes.contains(&v));
                }
            }
        }
    }

    #[test]
    fn backpropagated_rewards_stay_in_range(rewards in prop::collection::vec(-3.0f64..3.0, 1..20), path_len in 1usize..6) {
        let mut stats = SearchStats::new();
        let history: Vec<ExplanationTriple> = (0..path_len)
            .map(|i| ExplanationTriple { subgraph_nodes: (0..10 - i).collect(), ..ExplanationTriple::empty() })
            .collect();
        for &r in &rewards {
            let rec = EpisodeRecord { kind: ComponentKind::Nodes, history: history.clone(), reward: Some(r), exhausted: false };
            backpropagate(&mut stats, &rec).unwrap();
        }
        let lo = rewards.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for state in &history {
            let e = stats.get(&state.key(ComponentKind::Nodes)).unwrap();
            let n = e.visits as f64;
            prop_assert_eq!(e.visits, rewards.len() as u64);
            prop_assert!(e.total_reward >= n * lo - 1e-9 && e.total_reward <= n * hi + 1e-9);
        }
    }

    #[test]
    fn fidelity_terms_are_probability_gaps(seed in 0u64..1000, n in 3usize..10, masks in any::<(u64, u64, u64)>()) {
        let (g, p) = instance(seed, n);
        let scorer = Scorer::new(&p, &g, EvalOptions::default()).unwrap();
        let t = triple_from(&g, masks);
        for k in [FidelityKind::Plus, FidelityKind::Minus] {
            let f = fidelity_term(&scorer, &t, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&f), "{:?} = {}", k, f);
        }
    }

    #[test]
    fn precision_and_recall_are_fractions(
        found in prop::collection::btree_set(0usize..30, 0..15),
        planted in prop::collection::btree_set(0usize..30, 0..15),
    ) {
        let pr = precision_recall(&found, &planted);
        prop_assert!((0.0..=1.0).contains(&pr.precision));
        prop_assert!((0.0..=1.0).contains(&pr.recall));
        if !found.is_empty() && found.is_subset(&planted) {
            prop_assert_eq!(pr.precision, 1.0);
        }
        if !planted.is_empty() && planted.is_subset(&found) {
            prop_assert_eq!(pr.recall, 1.0);
        }
    }

    #[test]
    fn log_round_trips(events in prop::collection::vec(event(), 0..40)) {
        let text = emit_log(&events);
        prop_assert_eq!(parse_log(&text).unwrap(), events);
    }
}
