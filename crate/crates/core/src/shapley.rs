//! Cooperative games over explanation components and their Shapley values.
//!
//! Each component of a triple gets its own game. Player 0 is always the
//! component itself as one block; the remaining players are the individual
//! elements outside it (downstream features, nodes, or node-feature columns).
//! A coalition is scored with everything it contains at observed values and
//! everything else neutralized, while the other two components stay fixed.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{derive_seed, membership, ComponentKind, ExplanationTriple};
use crate::model::Scorer;

/// Default upper bound on players for exact enumeration.
pub const ENUMERATION_CAP: usize = 16;

/// The block player in every game built from a triple.
pub const BLOCK_PLAYER: usize = 0;

pub trait CooperativeGame: Sync {
    fn num_players(&self) -> usize;

    /// Characteristic function; `coalition[i]` says whether player `i` takes part.
    fn value(&self, coalition: &[bool]) -> f64;
}

/// A game given by its full value table, indexed by coalition bitmask.
#[derive(Debug, Clone, PartialEq)]
pub struct TableGame {
    players: usize,
    values: Vec<f64>,
}

impl TableGame {
    pub fn new(players: usize, values: Vec<f64>) -> Result<Self> {
        if players >= usize::BITS as usize || values.len() != 1 << players {
            return Err(Error::Config(format!(
                "a {players}-player table needs {} values",
                1u64.checked_shl(players as u32).unwrap_or(0)
            )));
        }
        Ok(TableGame { players, values })
    }

    pub fn from_fn(players: usize, f: impl Fn(usize) -> f64) -> Self {
        TableGame {
            players,
            values: (0..1usize << players).map(f).collect(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub(crate) fn mask_of(coalition: &[bool]) -> usize {
    coalition
        .iter()
        .enumerate()
        .filter(|(_, &on)| on)
        .fold(0, |m, (i, _)| m | (1 << i))
}

impl CooperativeGame for TableGame {
    fn num_players(&self) -> usize {
        self.players
    }

    fn value(&self, coalition: &[bool]) -> f64 {
        self.values[mask_of(coalition)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapleyMethod {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapleyEstimate {
    pub value: f64,
    /// Standard error of the mean; 0 for exact values and for T = 1.
    pub std_error: f64,
    /// Permutations sampled (0 for exact values).
    pub samples: usize,
    pub method: ShapleyMethod,
}

impl ShapleyEstimate {
    pub fn exact(value: f64) -> Self {
        ShapleyEstimate {
            value,
            std_error: 0.0,
            samples: 0,
            method: ShapleyMethod::Exact,
        }
    }
}

/// Exact Shapley value by enumerating every coalition of the other players.
pub fn exact_shapley(
    game: &dyn CooperativeGame,
    player: usize,
    cap: usize,
) -> Result<ShapleyEstimate> {
    let p = game.num_players();
    if p > cap {
        return Err(Error::TooManyPlayers { players: p, cap });
    }
    if player >= p {
        return Err(Error::Config(format!("player {player} of {p}")));
    }
    // weight(s) = s! (p - 1 - s)! / p!
    let mut weights = vec![0.0; p];
    for (s, w) in weights.iter_mut().enumerate() {
        *w = 1.0 / (p as f64 * binomial(p - 1, s));
    }
    let others: Vec<usize> = (0..p).filter(|&i| i != player).collect();
    let mut coalition = vec![false; p];
    let mut total = 0.0;
    for mask in 0..1usize << others.len() {
        let mut size = 0;
        for (bit, &other) in others.iter().enumerate() {
            let on = mask >> bit & 1 == 1;
            coalition[other] = on;
            size += usize::from(on);
        }
        coalition[player] = false;
        let without = game.value(&coalition);
        coalition[player] = true;
        let with = game.value(&coalition);
        total += weights[size] * (with - without);
    }
    Ok(ShapleyEstimate::exact(total))
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Monte Carlo Shapley value: the mean marginal contribution of `player` to
/// the players preceding it in `permutations` uniformly random orderings.
pub fn mc_shapley(
    game: &dyn CooperativeGame,
    player: usize,
    permutations: usize,
    seed: u64,
) -> ShapleyEstimate {
    let p = game.num_players();
    assert!(player < p, "player {player} of {p}");
    let t = permutations.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..p).collect();
    let mut coalition = vec![false; p];
    let mut marginals = Vec::with_capacity(t);
    for _ in 0..t {
        order.shuffle(&mut rng);
        coalition.iter_mut().for_each(|c| *c = false);
        for &q in order.iter().take_while(|&&q| q != player) {
            coalition[q] = true;
        }
        let without = game.value(&coalition);
        coalition[player] = true;
        let with = game.value(&coalition);
        marginals.push(with - without);
    }
    let first = marginals[0];
    if marginals.iter().all(|&m| m == first) {
        return ShapleyEstimate {
            value: first,
            std_error: 0.0,
            samples: t,
            method: ShapleyMethod::MonteCarlo,
        };
    }
    let mean = marginals.iter().sum::<f64>() / t as f64;
    let var = marginals.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (t - 1) as f64;
    ShapleyEstimate {
        value: mean,
        std_error: (var / t as f64).sqrt(),
        samples: t,
        method: ShapleyMethod::MonteCarlo,
    }
}

/// Memoizes a game's characteristic function per coalition.
pub struct Cached<G> {
    inner: G,
    cache: Mutex<HashMap<Vec<bool>, f64>>,
}

impl<G: CooperativeGame> Cached<G> {
    pub fn new(inner: G) -> Self {
        Cached {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn inner(&self) -> &G {
        &self.inner
    }

    pub fn cached_coalitions(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }
}

impl<G: CooperativeGame> CooperativeGame for Cached<G> {
    fn num_players(&self) -> usize {
        self.inner.num_players()
    }

    fn value(&self, coalition: &[bool]) -> f64 {
        if let Some(&v) = self.cache.lock().expect("cache lock").get(coalition) {
            return v;
        }
        let v = self.inner.value(coalition);
        self.cache
            .lock()
            .expect("cache lock")
            .insert(coalition.to_vec(), v);
        v
    }
}

/// One of the three component games over a scored pipeline input.
pub struct PipelineGame<'s, 'a> {
    scorer: &'s Scorer<'a>,
    kind: ComponentKind,
    players: Vec<Vec<usize>>,
    universe: usize,
    fixed_tabular: Vec<f64>,
    fixed_embedding: Vec<f64>,
    nodes: Vec<bool>,
    cols: Vec<bool>,
}

impl<'s, 'a> PipelineGame<'s, 'a> {
    pub fn new(scorer: &'s Scorer<'a>, triple: &ExplanationTriple, kind: ComponentKind) -> Result<Self> {
        let graph = scorer.graph();
        triple.validate(graph)?;
        let universe = match kind {
            ComponentKind::Downstream => graph.num_downstream(),
            ComponentKind::Nodes => graph.num_nodes(),
            ComponentKind::NodeFeatures => graph.num_node_features(),
        };
        let block = triple.component(kind);
        let mut players = vec![block.iter().copied().collect::<Vec<_>>()];
        players.extend((0..universe).filter(|i| !block.contains(i)).map(|i| vec![i]));

        let nodes = membership(&triple.subgraph_nodes, graph.num_nodes());
        let cols = membership(&triple.retained_node_features, graph.num_node_features());
        let fixed_embedding = match kind {
            ComponentKind::Downstream => scorer.embedding(&nodes, &cols),
            _ => Vec::new(),
        };
        let fixed_tabular = match kind {
            ComponentKind::Downstream => Vec::new(),
            _ => scorer.tabular_for(triple),
        };
        Ok(PipelineGame {
            scorer,
            kind,
            players,
            universe,
            fixed_tabular,
            fixed_embedding,
            nodes,
            cols,
        })
    }

    pub fn kind(&self) -> ComponentKind {
        self.kind
    }

    /// Index sets controlled by each player; entry 0 is the block.
    pub fn players(&self) -> &[Vec<usize>] {
        &self.players
    }

    fn union(&self, coalition: &[bool]) -> Vec<bool> {
        let mut on = vec![false; self.universe];
        for (members, _) in self.players.iter().zip(coalition).filter(|(_, &c)| c) {
            for &i in members {
                on[i] = true;
            }
        }
        on
    }
}

impl CooperativeGame for PipelineGame<'_, '_> {
    fn num_players(&self) -> usize {
        self.players.len()
    }

    fn value(&self, coalition: &[bool]) -> f64 {
        let on = self.union(coalition);
        match self.kind {
            ComponentKind::Downstream => {
                let tab = self.scorer.tabular(&on);
                self.scorer.probability(&tab, &self.fixed_embedding)
            }
            ComponentKind::Nodes => {
                let emb = self.scorer.embedding(&on, &self.cols);
                self.scorer.probability(&self.fixed_tabular, &emb)
            }
            ComponentKind::NodeFeatures => {
                let emb = self.scorer.embedding(&self.nodes, &on);
                self.scorer.probability(&self.fixed_tabular, &emb)
            }
        }
    }
}

pub type BuiltGame<'s, 'a> = Cached<PipelineGame<'s, 'a>>;

pub fn build_game<'s, 'a>(
    scorer: &'s Scorer<'a>,
    triple: &ExplanationTriple,
    kind: ComponentKind,
) -> Result<BuiltGame<'s, 'a>> {
    PipelineGame::new(scorer, triple, kind).map(Cached::new)
}

/// Players: the retained downstream block, then each other downstream feature.
pub fn build_downstream_game<'s, 'a>(
    scorer: &'s Scorer<'a>,
    triple: &ExplanationTriple,
) -> Result<BuiltGame<'s, 'a>> {
    build_game(scorer, triple, ComponentKind::Downstream)
}

/// Players: the subgraph block, then each node outside it.
pub fn build_subgraph_game<'s, 'a>(
    scorer: &'s Scorer<'a>,
    triple: &ExplanationTriple,
) -> Result<BuiltGame<'s, 'a>> {
    build_game(scorer, triple, ComponentKind::Nodes)
}

/// Players: the retained node-feature block, then each other column.
pub fn build_nodefeature_game<'s, 'a>(
    scorer: &'s Scorer<'a>,
    triple: &ExplanationTriple,
) -> Result<BuiltGame<'s, 'a>> {
    build_game(scorer, triple, ComponentKind::NodeFeatures)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeights {
    pub lambda_subgraph: f64,
    pub lambda_nodefeat: f64,
}

impl Default for ImportanceWeights {
    fn default() -> Self {
        ImportanceWeights {
            lambda_subgraph: 1.0,
            lambda_nodefeat: 1.0,
        }
    }
}

impl ImportanceWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_subgraph", self.lambda_subgraph),
            ("lambda_nodefeat", self.lambda_nodefeat),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// How component Shapley values are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapleyConfig {
    pub permutations: usize,
    /// Games with at most this many players are enumerated exactly; 0 disables.
    pub exact_max_players: usize,
}

impl Default for ShapleyConfig {
    fn default() -> Self {
        ShapleyConfig {
            permutations: 100,
            exact_max_players: 0,
        }
    }
}

/// Shapley value of the block player of `kind`'s game.
pub fn component_shapley(
    scorer: &Scorer<'_>,
    triple: &ExplanationTriple,
    kind: ComponentKind,
    config: ShapleyConfig,
    seed: u64,
) -> Result<ShapleyEstimate> {
    let game = build_game(scorer, triple, kind)?;
    let players = game.num_players();
    if players <= config.exact_max_players.min(ENUMERATION_CAP) {
        exact_shapley(&game, BLOCK_PLAYER, ENUMERATION_CAP)
    } else {
        Ok(mc_shapley(&game, BLOCK_PLAYER, config.permutations, seed))
    }
}

/// Seed used for a component game of `triple`, independent of call order.
pub fn component_seed(seed: u64, triple: &ExplanationTriple, kind: ComponentKind) -> u64 {
    derive_seed(seed, triple.key(kind).fingerprint() ^ triple.fingerprint().rotate_left(17))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScore {
    pub total: f64,
    pub downstream: ShapleyEstimate,
    pub subgraph: ShapleyEstimate,
    pub node_features: ShapleyEstimate,
}

impl ImportanceScore {
    pub fn component(&self, kind: ComponentKind) -> &ShapleyEstimate {
        match kind {
            ComponentKind::Downstream => &self.downstream,
            ComponentKind::Nodes => &self.subgraph,
            ComponentKind::NodeFeatures => &self.node_features,
        }
    }
}

/// phi(S') + lambda_subgraph * phi(G') + lambda_nodefeat * phi(M).
pub fn importance_score(
    scorer: &Scorer<'_>,
    triple: &ExplanationTriple,
    weights: ImportanceWeights,
    config: ShapleyConfig,
    seed: u64,
) -> Result<ImportanceScore> {
    weights.validate()?;
    let est = |kind| component_shapley(scorer, triple, kind, config, component_seed(seed, triple, kind));
    let downstream = est(ComponentKind::Downstream)?;
    let subgraph = est(ComponentKind::Nodes)?;
    let node_features = est(ComponentKind::NodeFeatures)?;
    Ok(ImportanceScore {
        total: downstream.value
            + weights.lambda_subgraph * subgraph.value
            + weights.lambda_nodefeat * node_features.value,
        downstream,
        subgraph,
        node_features,
    })
}

/// Importance scores keyed by the full triple, reused across rollouts.
#[derive(Debug, Default)]
pub struct ScoreCache {
    scores: BTreeMap<ExplanationTriple, ImportanceScore>,
    misses: usize,
}

impl ScoreCache {
    pub fn get_or_compute(
        &mut self,
        triple: &ExplanationTriple,
        compute: impl FnOnce() -> Result<ImportanceScore>,
    ) -> Result<ImportanceScore> {
        if let Some(s) = self.scores.get(triple) {
            return Ok(*s);
        }
        let s = compute()?;
        self.misses += 1;
        self.scores.insert(triple.clone(), s);
        Ok(s)
    }

    pub fn get(&self, triple: &ExplanationTriple) -> Option<&ImportanceScore> {
        self.scores.get(triple)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn misses(&self) -> usize {
        self.misses
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // v(∅)=0, v(1)=1, v(2)=2, v(3)=0, v(12)=4, v(13)=1, v(23)=2, v(123)=5
    fn three_player() -> TableGame {
        TableGame::new(3, vec![0.0, 1.0, 2.0, 4.0, 0.0, 1.0, 2.0, 5.0]).unwrap()
    }

    // Shapley by averaging over all orderings, independent of the weighted-subset formula.
    fn by_orderings(game: &TableGame) -> Vec<f64> {
        fn perms(items: Vec<usize>) -> Vec<Vec<usize>> {
            if items.len() <= 1 {
                return vec![items];
            }
            let mut out = Vec::new();
            for i in 0..items.len() {
                let mut rest = items.clone();
                let head = rest.remove(i);
                for mut tail in perms(rest) {
                    tail.insert(0, head);
                    out.push(tail);
                }
            }
            out
        }
        let p = game.num_players();
        let all = perms((0..p).collect());
        let mut phi = vec![0.0; p];
        for order in &all {
            let mut mask = 0usize;
            for &q in order {
                let before = game.values()[mask];
                mask |= 1 << q;
                phi[q] += game.values()[mask] - before;
            }
        }
        phi.iter().map(|x| x / all.len() as f64).collect()
    }

    #[test]
    fn ordering_oracle_gives_frozen_values() {
        let phi = by_orderings(&three_player());
        let expect = [11.0 / 6.0, 17.0 / 6.0, 1.0 / 3.0];
        for (a, b) in phi.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_matches_frozen_three_player_values() {
        let g = three_player();
        let expect = [11.0 / 6.0, 17.0 / 6.0, 1.0 / 3.0];
        for (i, e) in expect.into_iter().enumerate() {
            let got = exact_shapley(&g, i, ENUMERATION_CAP).unwrap();
            assert!((got.value - e).abs() < 1e-12, "player {i}: {}", got.value);
            assert_eq!(got.std_error, 0.0);
        }
    }

    #[test]
    fn constant_and_additive_games() {
        let constant = TableGame::from_fn(4, |_| 3.5);
        let w = [0.5, -1.0, 2.0, 0.25];
        let additive = TableGame::from_fn(4, |m| (0..4).filter(|i| m >> i & 1 == 1).map(|i| w[i]).sum());
        for i in 0..4 {
            assert_eq!(exact_shapley(&constant, i, 16).unwrap().value, 0.0);
            assert!((exact_shapley(&additive, i, 16).unwrap().value - w[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let g = TableGame::from_fn(5, |m| m as f64);
        assert!(matches!(
            exact_shapley(&g, 0, 4),
            Err(Error::TooManyPlayers { players: 5, cap: 4 })
        ));
    }

    #[test]
    fn single_player_mc_is_exact() {
        let g = TableGame::new(1, vec![0.25, 1.75]).unwrap();
        for t in [1, 7, 100] {
            let est = mc_shapley(&g, 0, t, 9);
            assert_eq!(est.value, 1.5);
            assert_eq!(est.std_error, 0.0);
            assert_eq!(est.samples, t);
        }
    }

    #[test]
    fn mc_is_deterministic_per_seed() {
        let g = three_player();
        assert_eq!(mc_shapley(&g, 1, 50, 3), mc_shapley(&g, 1, 50, 3));
        assert_ne!(mc_shapley(&g, 1, 50, 3).value, mc_shapley(&g, 1, 50, 4).value);
    }

    #[test]
    fn mc_agrees_with_exact_at_three_sigma() {
        let g = three_player();
        let exact = exact_shapley(&g, 0, 16).unwrap().value;
        let hits = (0..40)
            .filter(|&s| {
                let e = mc_shapley(&g, 0, 2000, s);
                (e.value - exact).abs() <= 3.0 * e.std_error
            })
            .count();
        assert!(hits >= 38, "{hits}/40");
    }

    #[test]
    fn cache_returns_identical_values() {
        let g = Cached::new(three_player());
        let c = [true, false, true];
        let a = g.value(&c);
        let b = g.value(&c);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(g.cached_coalitions(), 1);
    }

    #[test]
    fn weights_must_be_nonnegative() {
        let w = ImportanceWeights {
            lambda_subgraph: -1.0,
            lambda_nodefeat: 0.0,
        };
        assert!(w.validate().is_err());
    }
}
