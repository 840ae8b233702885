//! The rollout driver: repeatedly prunes the full input down to the size
//! requirements, alternating bandit arm choice and local tree search, and keeps
//! the best-scoring terminal explanation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bandit::{
    arm_costs, requirements_satisfied, BanditConfig, BanditMode, BanditState, BudgetLimited, ContextVector,
    ExplanationRequirements, Observation,
};
use crate::error::{Error, Result};
use crate::graph::{ComponentKind, ExplanationTriple, Graph, PerComponent, Retention};
use crate::log::Event;
use crate::mcts::{backpropagate, run_episode, EpisodeConfig, EpisodeContext, NodeOrder, SearchStats};
use crate::metrics::{fidelity_term, FidelityKind};
use crate::model::{restrict_to_computational_graph, EvalOptions, PipelineModel, Scorer};
use crate::shapley::{importance_score, ImportanceScore, ImportanceWeights, ScoreCache, ShapleyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// The weighted sum of the three component Shapley values.
    #[default]
    Shapley,
    /// Occlusion fidelity of the episode's terminal triple.
    FidelityPlus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainerConfig {
    pub kappa: usize,
    /// Prunes per episode.
    pub budgets: PerComponent<usize>,
    /// Per-rollout budgets; rollout `i` uses entry `min(i, len - 1)`. Empty means `budgets` throughout.
    pub budget_schedule: Vec<PerComponent<usize>>,
    pub minima: PerComponent<usize>,
    pub total_min: Option<usize>,
    pub lambda_subgraph: f64,
    pub lambda_nodefeat: f64,
    pub permutations: usize,
    /// Defaults to `permutations`.
    pub prior_permutations: Option<usize>,
    /// Games with at most this many players are enumerated exactly; 0 disables.
    pub exact_max_players: usize,
    pub t_b: usize,
    pub exploration_c: f64,
    pub n_child: usize,
    pub node_order: NodeOrder,
    pub seed: u64,
    pub bandit_mode: BanditMode,
    pub budget_limited: BudgetLimited,
    pub oracle_refit_batch: usize,
    pub oracle_ridge: f64,
    pub randomize_child_order: bool,
    pub strict_priors: bool,
    pub reward: RewardKind,
    pub structural_removal: bool,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        ExplainerConfig {
            kappa: 20,
            budgets: PerComponent::new(3, 5, 5),
            budget_schedule: Vec::new(),
            minima: PerComponent::new(2, 5, 2),
            total_min: None,
            lambda_subgraph: 1.0,
            lambda_nodefeat: 1.0,
            permutations: 100,
            prior_permutations: None,
            exact_max_players: 0,
            t_b: 5,
            exploration_c: 1.0,
            n_child: 12,
            node_order: NodeOrder::Low2High,
            seed: 0,
            bandit_mode: BanditMode::Contextual,
            budget_limited: BudgetLimited::default(),
            oracle_refit_batch: 1,
            oracle_ridge: 1e-3,
            randomize_child_order: false,
            strict_priors: false,
            reward: RewardKind::Shapley,
            structural_removal: false,
        }
    }
}

impl ExplainerConfig {
    /// Settings for large node-classification inputs: one rollout, larger budgets.
    pub fn large_node_preset() -> Self {
        ExplainerConfig {
            kappa: 1,
            budgets: PerComponent::new(6, 18, 6),
            minima: PerComponent::new(6, 18, 6),
            permutations: 25,
            ..Default::default()
        }
    }

    pub fn requirements(&self) -> ExplanationRequirements {
        ExplanationRequirements {
            minima: self.minima,
            total_min: self.total_min,
            budget_limited: self.budget_limited,
        }
    }

    pub fn weights(&self) -> ImportanceWeights {
        ImportanceWeights {
            lambda_subgraph: self.lambda_subgraph,
            lambda_nodefeat: self.lambda_nodefeat,
        }
    }

    pub fn shapley(&self) -> ShapleyConfig {
        ShapleyConfig {
            permutations: self.permutations,
            exact_max_players: self.exact_max_players,
        }
    }

    pub fn episode(&self) -> EpisodeConfig {
        EpisodeConfig {
            exploration_c: self.exploration_c,
            n_child: self.n_child,
            node_order: self.node_order,
            prior: ShapleyConfig {
                permutations: self.prior_permutations.unwrap_or(self.permutations),
                exact_max_players: self.exact_max_players,
            },
            randomize_child_order: self.randomize_child_order,
            strict_priors: self.strict_priors,
        }
    }

    pub fn bandit(&self) -> BanditConfig {
        BanditConfig {
            mode: self.bandit_mode,
            breakpoint: self.t_b,
            refit_batch: self.oracle_refit_batch,
            ridge: self.oracle_ridge,
        }
    }

    pub fn budgets_for(&self, rollout: usize) -> &PerComponent<usize> {
        match self.budget_schedule.len() {
            0 => &self.budgets,
            n => &self.budget_schedule[rollout.min(n - 1)],
        }
    }

    /// Checks everything that does not depend on the input.
    pub fn validate(&self) -> Result<()> {
        if self.kappa == 0 {
            return Err(Error::Config("kappa must be at least 1".into()));
        }
        for budgets in std::iter::once(&self.budgets).chain(&self.budget_schedule) {
            for kind in ComponentKind::ALL {
                if *budgets.get(kind) == 0 {
                    return Err(Error::Config(format!("budget for {kind} must be at least 1")));
                }
            }
        }
        if self.permutations == 0 {
            return Err(Error::Config("permutations must be at least 1".into()));
        }
        self.requirements().validate()?;
        self.weights().validate()?;
        self.episode().validate()?;
        BanditState::new(self.bandit())?;
        Ok(())
    }

    /// Checks that every minimum is reachable from the full input.
    pub fn validate_for(&self, start: &ExplanationTriple) -> Result<()> {
        self.validate()?;
        for kind in ComponentKind::ALL {
            let (min, size) = (*self.minima.get(kind), start.size(kind));
            if min > size {
                return Err(Error::Config(format!(
                    "minimum {min} for {kind} exceeds the input size {size}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub rollout: usize,
    pub triple: ExplanationTriple,
    pub score: ImportanceScore,
    pub episodes: usize,
    /// Arms that ran out of admissible prunes before reaching their minimum.
    pub exhausted: Vec<ComponentKind>,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub class: usize,
    pub model_evaluations: u64,
    pub score_cache_misses: usize,
    pub explored_subgraphs: usize,
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationOutcome {
    pub triple: ExplanationTriple,
    pub score: ImportanceScore,
    pub best_rollout: usize,
    pub rollouts: Vec<RolloutSummary>,
    pub events: Vec<Event>,
    pub diagnostics: Diagnostics,
}

/// Starting triple: everything, or the largest connected piece of a disconnected input.
pub fn initial_triple(graph: &Graph, anchor: Option<usize>) -> ExplanationTriple {
    let mut full = ExplanationTriple::full(graph);
    let comps = graph.components_within(&full.subgraph_nodes);
    if comps.len() > 1 {
        let keep = match anchor {
            Some(v) => comps.iter().find(|c| c.contains(&v)).cloned(),
            None => None,
        };
        let largest = || {
            comps
                .iter()
                .fold(None::<&std::collections::BTreeSet<usize>>, |best, c| match best {
                    Some(b) if b.len() >= c.len() => Some(b),
                    _ => Some(c),
                })
                .cloned()
                .unwrap_or_default()
        };
        full.subgraph_nodes = keep.unwrap_or_else(largest);
    }
    full
}

/// Explains `pipeline` on `graph`. Node tasks are explained on the task node's
/// computational graph and reported in the original node ids.
pub fn run_explainer(pipeline: &PipelineModel, graph: &Graph, config: &ExplainerConfig) -> Result<ExplanationOutcome> {
    config.validate()?;
    pipeline.validate()?;
    match pipeline.task_node() {
        None => explain_on(pipeline, graph, config, Retention::Largest, None),
        Some(v) => {
            if v >= graph.num_nodes() {
                return Err(Error::InvalidGraph(format!(
                    "explained node {v} outside graph of {} nodes",
                    graph.num_nodes()
                )));
            }
            let (sub, map, new_v) = restrict_to_computational_graph(graph, v, pipeline.hops())?;
            let local = pipeline.with_task_node(new_v);
            let mut out = explain_on(&local, &sub, config, Retention::Anchor(new_v), Some(new_v))?;
            let lift = |t: &mut ExplanationTriple| {
                t.subgraph_nodes = t.subgraph_nodes.iter().map(|&u| map[u]).collect();
            };
            lift(&mut out.triple);
            for r in &mut out.rollouts {
                lift(&mut r.triple);
            }
            Ok(out)
        }
    }
}

fn explain_on(
    pipeline: &PipelineModel,
    graph: &Graph,
    config: &ExplainerConfig,
    retention: Retention,
    anchor: Option<usize>,
) -> Result<ExplanationOutcome> {
    let start = initial_triple(graph, anchor);
    config.validate_for(&start)?;
    let scorer = Scorer::new(
        pipeline,
        graph,
        EvalOptions {
            structural_removal: config.structural_removal,
        },
    )?;
    let req = config.requirements();
    let weights = config.weights();
    let shapley = config.shapley();
    let full_sizes = start.sizes();
    let ctx = EpisodeContext {
        scorer: &scorer,
        retention,
        config: config.episode(),
        seed: config.seed,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stats = SearchStats::new();
    let mut bandit = BanditState::new(config.bandit())?;
    let mut cache = ScoreCache::default();
    let mut events = Vec::new();
    let mut rollouts = Vec::with_capacity(config.kappa);
    let mut episodes = 0;

    let score_of = |cache: &mut ScoreCache, t: &ExplanationTriple| {
        cache.get_or_compute(t, || importance_score(&scorer, t, weights, shapley, config.seed))
    };

    for rollout in 0..config.kappa {
        events.push(Event::RolloutStart {
            rollout,
            kappa: config.kappa,
            explored: stats.explored(ComponentKind::Nodes),
        });
        let budgets = config.budgets_for(rollout);
        let mut triple = start.clone();
        let mut last_score = 0.0;
        let mut spent = 0.0;
        let cost_budget = req.cost_budget(&full_sizes);
        let mut exhausted = Vec::new();
        let mut rollout_episodes = 0;
        bandit.activate_for(&triple, &req);

        while !bandit.active_arms().is_empty() {
            if req.budget_limited.enabled && spent >= cost_budget {
                break;
            }
            let context = ContextVector::new(&triple, &full_sizes, last_score);
            let (arm, how) = bandit.select_arm(rollout, &context, &mut rng, config.kappa)?;
            events.push(Event::ArmSelected { arm, how });
            if req.budget_limited.enabled {
                spent += arm_costs(&triple, req.budget_limited.c_o)?.get(arm);
            }
            let minimum = *req.minima.get(arm);
            let mut record = run_episode(
                &ctx,
                &triple,
                arm,
                *budgets.get(arm),
                minimum,
                &mut stats,
                &mut rng,
                &mut events,
            )?;
            let terminal = record.terminal().clone();
            let reward = match config.reward {
                RewardKind::Shapley => score_of(&mut cache, &terminal)?.total,
                RewardKind::FidelityPlus => fidelity_term(&scorer, &terminal, FidelityKind::Plus)?,
            };
            record.reward = Some(reward);
            backpropagate(&mut stats, &record)?;

            let refit = bandit.refit_due(arm, rollout);
            bandit.update_oracle(arm, Observation { context, reward }, refit);
            events.push(Event::OracleUpdate { arm, refit });

            if record.exhausted {
                exhausted.push(arm);
                bandit.deactivate(arm);
            } else if terminal.size(arm) <= minimum {
                bandit.deactivate(arm);
            }
            if record.prunes() == 0 && !record.exhausted {
                return Err(Error::Invariant(format!("{arm} episode made no progress")));
            }
            triple = terminal;
            last_score = reward;
            rollout_episodes += 1;
        }
        episodes += rollout_episodes;
        let score = score_of(&mut cache, &triple)?;
        rollouts.push(RolloutSummary {
            rollout,
            satisfied: requirements_satisfied(&triple, &req),
            triple,
            score,
            episodes: rollout_episodes,
            exhausted,
        });
    }

    let best_rollout = best_index(&rollouts);
    let best = &rollouts[best_rollout];
    Ok(ExplanationOutcome {
        triple: best.triple.clone(),
        score: best.score,
        best_rollout,
        diagnostics: Diagnostics {
            class: scorer.class(),
            model_evaluations: scorer.evaluations(),
            score_cache_misses: cache.misses(),
            explored_subgraphs: stats.explored(ComponentKind::Nodes),
            episodes,
        },
        rollouts,
        events,
    })
}

// First rollout with the highest total score.
fn best_index(rollouts: &[RolloutSummary]) -> usize {
    let mut best = 0;
    for (i, r) in rollouts.iter().enumerate() {
        if r.score.total > rollouts[best].score.total {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_presets_validate() {
        let d = ExplainerConfig::default();
        d.validate().unwrap();
        assert_eq!(d.episode().prior.permutations, 100);
        let p = ExplainerConfig::large_node_preset();
        p.validate().unwrap();
        assert_eq!((p.kappa, p.permutations), (1, 25));
    }

    #[test]
    fn rejects_bad_numbers() {
        let bad = |f: fn(&mut ExplainerConfig)| {
            let mut c = ExplainerConfig::default();
            f(&mut c);
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        };
        bad(|c| c.kappa = 0);
        bad(|c| c.budgets.nodes = 0);
        bad(|c| c.minima.downstream = 0);
        bad(|c| c.permutations = 0);
        bad(|c| c.n_child = 0);
        bad(|c| c.oracle_refit_batch = 0);
        bad(|c| c.total_min = Some(3));
        bad(|c| c.budget_schedule = vec![PerComponent::new(1, 0, 1)]);
    }

    #[test]
    fn unreachable_minimum_is_a_config_error() {
        let g = Graph::new(3, false, vec![(0, 1), (1, 2)], vec![vec![1.0, 0.0, 1.0]; 3])
            .unwrap()
            .with_downstream_features(vec![0.0; 3]);
        let cfg = ExplainerConfig::default(); // needs 5 nodes
        assert!(matches!(cfg.validate_for(&ExplanationTriple::full(&g)), Err(Error::Config(_))));
    }

    #[test]
    fn config_json_round_trip() {
        let cfg: ExplainerConfig = serde_json::from_str(r#"{"kappa": 3, "seed": 9, "node_order": "high2low"}"#).unwrap();
        assert_eq!(cfg.kappa, 3);
        assert_eq!(cfg.node_order, NodeOrder::High2Low);
        assert_eq!(cfg.budgets, PerComponent::new(3, 5, 5));
        let back: ExplainerConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<ExplainerConfig>(r#"{"kapa": 3}"#).is_err());
    }

    #[test]
    fn schedule_lookup() {
        let cfg = ExplainerConfig {
            budget_schedule: vec![PerComponent::new(1, 2, 3), PerComponent::new(4, 5, 6)],
            ..Default::default()
        };
        assert_eq!(cfg.budgets_for(0).nodes, 2);
        assert_eq!(cfg.budgets_for(7).nodes, 5);
    }

    #[test]
    fn disconnected_input_starts_from_largest_piece() {
        let g = Graph::new(5, false, vec![(0, 1), (2, 3), (3, 4)], vec![vec![1.0]; 5]).unwrap();
        assert_eq!(initial_triple(&g, None).subgraph_nodes, [2, 3, 4].into_iter().collect());
        assert_eq!(initial_triple(&g, Some(1)).subgraph_nodes, [0, 1].into_iter().collect());
    }
}
