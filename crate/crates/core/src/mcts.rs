//! Episodic tree search over one explanation component at a time.
//!
//! Each tree node is a state of one component (a downstream-feature set, a
//! connected node set, or a node-feature set); an action removes one element.
//! Statistics are keyed by the component's [`StateKey`] and persist across
//! episodes and rollouts, so priors computed once are reused later even if the
//! other two components have changed since.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{derive_seed, prune_node, ComponentKind, ExplanationTriple, Graph, NodeId, Retention, StateKey};
use crate::log::Event;
use crate::model::Scorer;
use crate::shapley::{component_shapley, ShapleyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NodeOrder {
    /// Consider the lowest-degree nodes first.
    #[default]
    #[serde(rename = "low2high")]
    Low2High,
    #[serde(rename = "high2low")]
    High2Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EdgeStats {
    pub prior: Option<f64>,
    pub visits: u64,
    pub total_reward: f64,
    // digest of the other two components when the prior was computed
    #[serde(skip)]
    prior_context: u64,
}

impl EdgeStats {
    /// Mean reward, 0 while unvisited.
    pub fn q(&self) -> f64 {
        self.total_reward / self.visits.max(1) as f64
    }
}

/// Prior, visit count and total reward per component state.
#[derive(Debug, Clone, Default)]
pub struct SearchStats {
    entries: BTreeMap<StateKey, EdgeStats>,
}

impl SearchStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &StateKey) -> Option<&EdgeStats> {
        self.entries.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StateKey, &EdgeStats)> {
        self.entries.iter()
    }

    /// Number of distinct states of `kind` with a computed prior.
    pub fn explored(&self, kind: ComponentKind) -> usize {
        self.entries
            .iter()
            .filter(|(k, s)| k.kind == kind && s.prior.is_some())
            .count()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    /// Weight of the prior-driven exploration term.
    pub exploration_c: f64,
    /// Cap on node removals considered per expansion.
    pub n_child: usize,
    pub node_order: NodeOrder,
    /// Shapley estimation used for child priors.
    pub prior: ShapleyConfig,
    /// Shuffle candidate actions and break ties by that order instead of by prior.
    pub randomize_child_order: bool,
    /// Recompute a cached prior when the other two components have changed.
    pub strict_priors: bool,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            exploration_c: 1.0,
            n_child: 12,
            node_order: NodeOrder::Low2High,
            prior: ShapleyConfig::default(),
            randomize_child_order: false,
            strict_priors: false,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.exploration_c.is_finite() && self.exploration_c >= 0.0) {
            return Err(Error::Config("exploration_c must be finite and >= 0".into()));
        }
        if self.n_child == 0 {
            return Err(Error::Config("n_child must be at least 1".into()));
        }
        if self.prior.permutations == 0 {
            return Err(Error::Config("prior_permutations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Child {
    /// Index removed by the action (node id or feature index).
    pub removed: usize,
    pub triple: ExplanationTriple,
}

/// Candidate prunes of `kind`'s component. Children smaller than `minimum`
/// are never offered; node candidates are ranked by degree inside the current
/// subgraph and capped at `n_child`.
pub fn enumerate_children(
    triple: &ExplanationTriple,
    graph: &Graph,
    kind: ComponentKind,
    config: &EpisodeConfig,
    minimum: usize,
    retention: Retention,
) -> Vec<Child> {
    let current = triple.component(kind);
    if current.len() <= minimum {
        return Vec::new();
    }
    match kind {
        ComponentKind::Nodes => {
            let mut ranked: Vec<(usize, NodeId)> = current
                .iter()
                .map(|&v| (graph.degree_within(v, current), v))
                .collect();
            match config.node_order {
                NodeOrder::Low2High => ranked.sort_by_key(|&(d, v)| (d, v)),
                NodeOrder::High2Low => ranked.sort_by_key(|&(d, v)| (std::cmp::Reverse(d), v)),
            }
            ranked
                .into_iter()
                .filter_map(|(_, v)| {
                    let child = prune_node(triple, graph, v, retention).ok()?;
                    (child.subgraph_nodes.len() >= minimum).then_some(Child {
                        removed: v,
                        triple: child,
                    })
                })
                .take(config.n_child)
                .collect()
        }
        _ => current
            .iter()
            .map(|&i| {
                let mut child = triple.clone();
                child.component_mut(kind).remove(&i);
                Child {
                    removed: i,
                    triple: child,
                }
            })
            .collect(),
    }
}

/// Seed for the prior of a state, so priors do not depend on evaluation order.
pub fn prior_seed(seed: u64, key: &StateKey) -> u64 {
    derive_seed(seed, key.fingerprint())
}

/// Shapley value of the child's `kind` component in its own game, other components as given.
pub fn child_prior(
    scorer: &Scorer<'_>,
    child: &ExplanationTriple,
    kind: ComponentKind,
    config: ShapleyConfig,
    seed: u64,
) -> Result<f64> {
    let key = child.key(kind);
    component_shapley(scorer, child, kind, config, prior_seed(seed, &key)).map(|e| e.value)
}

fn context_digest(triple: &ExplanationTriple, kind: ComponentKind) -> u64 {
    let mut t = triple.clone();
    t.component_mut(kind).clear();
    t.fingerprint()
}

/// A candidate as seen by the selection rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate<'k> {
    pub key: &'k StateKey,
    pub prior: f64,
    pub visits: u64,
    pub total_reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TieBreak {
    /// Larger prior, then smaller key.
    Prior,
    /// Earlier position in the candidate list.
    Order,
}

/// Index of the candidate maximizing
/// `w / max(N, 1) + c * P * sqrt(max(sum N, 1)) / (1 + N)`.
pub fn select_child(candidates: &[Candidate<'_>], exploration_c: f64, tie: TieBreak) -> usize {
    assert!(!candidates.is_empty(), "select_child needs candidates");
    let total: u64 = candidates.iter().map(|c| c.visits).sum();
    let root = (total.max(1) as f64).sqrt();
    let score = |c: &Candidate<'_>| {
        c.total_reward / c.visits.max(1) as f64 + exploration_c * c.prior * root / (1 + c.visits) as f64
    };
    let mut best = 0;
    let mut best_score = score(&candidates[0]);
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let s = score(c);
        let better = match s.partial_cmp(&best_score) {
            Some(std::cmp::Ordering::Greater) => true,
            Some(std::cmp::Ordering::Equal) => match tie {
                TieBreak::Order => false,
                TieBreak::Prior => {
                    let b = &candidates[best];
                    c.prior > b.prior || (c.prior == b.prior && c.key < b.key)
                }
            },
            _ => false,
        };
        if better {
            best = i;
            best_score = s;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub kind: ComponentKind,
    /// States visited, starting with the episode's initial triple.
    pub history: Vec<ExplanationTriple>,
    pub reward: Option<f64>,
    /// No admissible child was left before reaching the minimum.
    pub exhausted: bool,
}

impl EpisodeRecord {
    pub fn terminal(&self) -> &ExplanationTriple {
        self.history.last().expect("history starts with the initial state")
    }

    pub fn prunes(&self) -> usize {
        self.history.len() - 1
    }
}

/// Everything an episode needs besides the search statistics.
pub struct EpisodeContext<'s, 'a> {
    pub scorer: &'s Scorer<'a>,
    pub retention: Retention,
    pub config: EpisodeConfig,
    /// Run seed; priors derive their streams from it.
    pub seed: u64,
}

/// Prunes `kind` up to `budget` times, stopping early once the component is at `minimum`.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    ctx: &EpisodeContext<'_, '_>,
    triple: &ExplanationTriple,
    kind: ComponentKind,
    budget: usize,
    minimum: usize,
    stats: &mut SearchStats,
    rng: &mut ChaCha8Rng,
    events: &mut Vec<Event>,
) -> Result<EpisodeRecord> {
    if budget == 0 {
        return Err(Error::Config("episode budget must be at least 1".into()));
    }
    if triple.size(kind) <= minimum {
        return Err(Error::Config(format!(
            "{kind} is already at its minimum ({} <= {minimum})",
            triple.size(kind)
        )));
    }
    let graph = ctx.scorer.graph();
    let mut current = triple.clone();
    let mut history = vec![current.clone()];
    let mut exhausted = false;
    let mut step = 1;
    while current.size(kind) > minimum && step <= budget {
        let mut children = enumerate_children(&current, graph, kind, &ctx.config, minimum, ctx.retention);
        if children.is_empty() {
            exhausted = true;
            break;
        }
        if ctx.config.randomize_child_order {
            children.shuffle(rng);
        }
        expand(ctx, kind, &children, stats)?;

        let keys: Vec<StateKey> = children.iter().map(|c| c.triple.key(kind)).collect();
        let candidates: Vec<Candidate<'_>> = keys
            .iter()
            .map(|k| {
                let s = stats.get(k).expect("expanded");
                Candidate {
                    key: k,
                    prior: s.prior.unwrap_or(0.0),
                    visits: s.visits,
                    total_reward: s.total_reward,
                }
            })
            .collect();
        let tie = if ctx.config.randomize_child_order {
            TieBreak::Order
        } else {
            TieBreak::Prior
        };
        let pick = select_child(&candidates, ctx.config.exploration_c, tie);
        let child = children.swap_remove(pick).triple;

        events.push(Event::Prune {
            arm: kind,
            step,
            budget,
            parent: current.sizes(),
            child: child.sizes(),
        });
        current = child;
        history.push(current.clone());
        if current.size(kind) <= minimum {
            events.push(Event::RequirementMet { arm: kind });
        }
        step += 1;
    }
    debug_assert!(history.iter().all(|t| t.is_connected(graph)));
    events.push(Event::EpisodeEnd {
        sizes: current.sizes(),
    });
    Ok(EpisodeRecord {
        kind,
        history,
        reward: None,
        exhausted,
    })
}

// Computes priors for children that lack one (in parallel; each prior has its own seed).
fn expand(
    ctx: &EpisodeContext<'_, '_>,
    kind: ComponentKind,
    children: &[Child],
    stats: &mut SearchStats,
) -> Result<()> {
    let pending: Vec<(&Child, StateKey, u64)> = children
        .iter()
        .map(|c| (c, c.triple.key(kind), context_digest(&c.triple, kind)))
        .filter(|(_, key, digest)| match stats.get(key) {
            Some(EdgeStats { prior: Some(_), prior_context, .. }) => {
                ctx.config.strict_priors && prior_context != digest
            }
            _ => true,
        })
        .collect();
    let priors: Vec<f64> = pending
        .par_iter()
        .map(|(c, _, _)| child_prior(ctx.scorer, &c.triple, kind, ctx.config.prior, ctx.seed))
        .collect::<Result<_>>()?;
    for ((_, key, digest), prior) in pending.into_iter().zip(priors) {
        let entry = stats.entries.entry(key).or_default();
        entry.prior = Some(prior);
        entry.prior_context = digest;
    }
    Ok(())
}

/// Adds the episode reward to every state on the episode's path.
pub fn backpropagate(stats: &mut SearchStats, record: &EpisodeRecord) -> Result<()> {
    if record.history.is_empty() {
        return Ok(());
    }
    let reward = record
        .reward
        .ok_or_else(|| Error::Invariant("backpropagating an episode without a reward".into()))?;
    for state in &record.history {
        let entry = stats.entries.entry(state.key(record.kind)).or_default();
        entry.visits += 1;
        entry.total_reward += reward;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    fn triangle() -> Graph {
        Graph::new(3, false, vec![(0, 1), (1, 2), (0, 2)], vec![vec![1.0]; 3]).unwrap()
    }

    fn star4() -> Graph {
        let edges = (1..=4).map(|l| (0, l)).collect();
        Graph::new(5, false, edges, vec![vec![1.0]; 5]).unwrap()
    }

    #[test]
    fn triangle_has_three_connected_children() {
        let g = triangle();
        let t = ExplanationTriple::full(&g);
        let cfg = EpisodeConfig {
            n_child: 3,
            ..Default::default()
        };
        let kids = enumerate_children(&t, &g, ComponentKind::Nodes, &cfg, 1, Retention::Largest);
        assert_eq!(kids.len(), 3);
        for k in &kids {
            assert_eq!(k.triple.subgraph_nodes.len(), 2);
            assert!(k.triple.is_connected(&g));
        }
    }

    #[test]
    fn feature_children_drop_one_index_each() {
        let mut t = ExplanationTriple::empty();
        t.retained_downstream = [0, 1, 2].into_iter().collect();
        let g = triangle();
        let kids = enumerate_children(&t, &g, ComponentKind::Downstream, &EpisodeConfig::default(), 1, Retention::Largest);
        assert_eq!(kids.len(), 3);
        assert!(kids.iter().all(|k| k.triple.retained_downstream.len() == 2));
        // at the minimum nothing is offered
        assert!(enumerate_children(&t, &g, ComponentKind::Downstream, &EpisodeConfig::default(), 3, Retention::Largest).is_empty());
    }

    #[test]
    fn low2high_caps_to_lowest_degree_leaves() {
        let g = star4();
        let t = ExplanationTriple::full(&g);
        let cfg = EpisodeConfig {
            n_child: 2,
            ..Default::default()
        };
        let kids = enumerate_children(&t, &g, ComponentKind::Nodes, &cfg, 1, Retention::Largest);
        let removed: Vec<usize> = kids.iter().map(|k| k.removed).collect();
        assert_eq!(removed, vec![1, 2]);

        let high = EpisodeConfig {
            n_child: 1,
            node_order: NodeOrder::High2Low,
            ..Default::default()
        };
        let kids = enumerate_children(&t, &g, ComponentKind::Nodes, &high, 1, Retention::Largest);
        assert_eq!(kids[0].removed, 0);
        assert_eq!(kids[0].triple.subgraph_nodes, BTreeSet::from([1]));
    }

    fn cand(key: &StateKey, prior: f64, visits: u64, total_reward: f64) -> Candidate<'_> {
        Candidate {
            key,
            prior,
            visits,
            total_reward,
        }
    }

    #[test]
    fn selection_formula() {
        let ka = StateKey::new(ComponentKind::Nodes, [0]);
        let kb = StateKey::new(ComponentKind::Nodes, [1]);
        // A: 2/1 + 0.3 * 1 / 2 = 2.15, B: 0 + 0.5 * 1 / 1 = 0.5
        let c = [cand(&ka, 0.3, 1, 2.0), cand(&kb, 0.5, 0, 0.0)];
        assert_eq!(select_child(&c, 1.0, TieBreak::Prior), 0);
    }

    #[test]
    fn unvisited_children_go_by_prior() {
        let keys: Vec<StateKey> = (0..3).map(|i| StateKey::new(ComponentKind::Downstream, [i])).collect();
        let c = [cand(&keys[0], 0.1, 0, 0.0), cand(&keys[1], 0.7, 0, 0.0), cand(&keys[2], 0.2, 0, 0.0)];
        assert_eq!(select_child(&c, 1.0, TieBreak::Prior), 1);
        // with c = 0 every score is 0, and the prior still breaks the tie
        assert_eq!(select_child(&c, 0.0, TieBreak::Prior), 1);
        assert_eq!(select_child(&c, 0.0, TieBreak::Order), 0);
        // equal priors: smallest key
        let same = [cand(&keys[2], 0.5, 0, 0.0), cand(&keys[0], 0.5, 0, 0.0)];
        assert_eq!(select_child(&same, 1.0, TieBreak::Prior), 1);
    }

    #[test]
    fn zero_exploration_picks_best_mean() {
        let keys: Vec<StateKey> = (0..3).map(|i| StateKey::new(ComponentKind::Nodes, [i])).collect();
        let c = [cand(&keys[0], 9.0, 2, 1.0), cand(&keys[1], 0.0, 2, 1.6), cand(&keys[2], 0.0, 2, 1.2)];
        assert_eq!(select_child(&c, 0.0, TieBreak::Prior), 1);
    }

    fn record(kind: ComponentKind, states: &[&[usize]], reward: f64) -> EpisodeRecord {
        EpisodeRecord {
            kind,
            history: states
                .iter()
                .map(|s| {
                    let mut t = ExplanationTriple::empty();
                    *t.component_mut(kind) = s.iter().copied().collect();
                    t
                })
                .collect(),
            reward: Some(reward),
            exhausted: false,
        }
    }

    #[test]
    fn backpropagation_accumulates() {
        let mut stats = SearchStats::new();
        backpropagate(&mut stats, &record(ComponentKind::Nodes, &[&[0, 1]], 0.7)).unwrap();
        let key = StateKey::new(ComponentKind::Nodes, [0, 1]);
        assert_eq!(stats.get(&key).unwrap().visits, 1);
        assert_eq!(stats.get(&key).unwrap().total_reward, 0.7);

        let mut stats = SearchStats::new();
        backpropagate(&mut stats, &record(ComponentKind::Nodes, &[&[0, 1, 2], &[0, 1]], 0.2)).unwrap();
        backpropagate(&mut stats, &record(ComponentKind::Nodes, &[&[0, 1]], 0.4)).unwrap();
        let s = stats.get(&key).unwrap();
        assert_eq!(s.visits, 2);
        assert!((s.total_reward - 0.6).abs() < 1e-15);
        assert!((s.q() - 0.3).abs() < 1e-15);

        let before = stats.len();
        let empty = EpisodeRecord {
            kind: ComponentKind::Nodes,
            history: vec![],
            reward: None,
            exhausted: false,
        };
        backpropagate(&mut stats, &empty).unwrap();
        assert_eq!(stats.len(), before);
    }
}
