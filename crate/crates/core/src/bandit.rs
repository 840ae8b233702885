//! Explore-then-exploit arm selection across the three pruning arms.
//!
//! Before the breakpoint arms are drawn uniformly from the active set; after it
//! each arm's oracle predicts the episode reward from a small context vector and
//! the best prediction wins. The oracle is a ridge regression refit lazily.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ComponentKind, ExplanationTriple, PerComponent};
use crate::log::Selection;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BanditMode {
    /// Per-arm ridge oracle on the context vector.
    #[default]
    Contextual,
    /// Running mean reward per arm, context ignored.
    Mab,
    /// Uniform choice throughout.
    Random,
}

pub const CONTEXT_DIM: usize = 4;

/// Retained fractions of nodes, node-feature columns and downstream features,
/// followed by the most recent importance score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContextVector(pub [f64; CONTEXT_DIM]);

impl ContextVector {
    pub fn new(triple: &ExplanationTriple, full: &PerComponent<usize>, last_score: f64) -> Self {
        let frac = |kind| triple.size(kind) as f64 / (*full.get(kind)).max(1) as f64;
        ContextVector([
            frac(ComponentKind::Nodes),
            frac(ComponentKind::NodeFeatures),
            frac(ComponentKind::Downstream),
            last_score,
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub context: ContextVector,
    pub reward: f64,
}

/// Ridge regression with an unpenalized intercept, fit on centered features.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeOracle {
    pub ridge: f64,
    fit: Option<(f64, [f64; CONTEXT_DIM])>,
}

impl RidgeOracle {
    pub fn new(ridge: f64) -> Self {
        RidgeOracle { ridge, fit: None }
    }

    pub fn is_fit(&self) -> bool {
        self.fit.is_some()
    }

    pub fn fit(&mut self, data: &[Observation]) {
        if data.is_empty() {
            self.fit = None;
            return;
        }
        let n = data.len() as f64;
        let mut mx = [0.0; CONTEXT_DIM];
        let mut my = 0.0;
        for o in data {
            for (m, x) in mx.iter_mut().zip(o.context.0) {
                *m += x / n;
            }
            my += o.reward / n;
        }
        let mut a = [[0.0; CONTEXT_DIM]; CONTEXT_DIM];
        let mut b = [0.0; CONTEXT_DIM];
        for o in data {
            let xc: Vec<f64> = o.context.0.iter().zip(mx).map(|(x, m)| x - m).collect();
            let yc = o.reward - my;
            for i in 0..CONTEXT_DIM {
                b[i] += xc[i] * yc;
                for j in 0..CONTEXT_DIM {
                    a[i][j] += xc[i] * xc[j];
                }
            }
        }
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += self.ridge;
        }
        let w = solve(a, b);
        let intercept = my - w.iter().zip(mx).map(|(w, m)| w * m).sum::<f64>();
        self.fit = Some((intercept, w));
    }

    /// Predicted reward; +inf until fit so untried arms are explored first.
    pub fn predict(&self, context: &ContextVector) -> f64 {
        match &self.fit {
            None => f64::INFINITY,
            Some((c, w)) => c + w.iter().zip(context.0).map(|(w, x)| w * x).sum::<f64>(),
        }
    }
}

// Gaussian elimination with partial pivoting; the ridge keeps the system nonsingular.
fn solve(mut a: [[f64; CONTEXT_DIM]; CONTEXT_DIM], mut b: [f64; CONTEXT_DIM]) -> [f64; CONTEXT_DIM] {
    const N: usize = CONTEXT_DIM;
    for col in 0..N {
        let pivot = (col..N)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        a.swap(col, pivot);
        b.swap(col, pivot);
        let p = a[col][col];
        if p.abs() < 1e-300 {
            continue;
        }
        for row in col + 1..N {
            let f = a[row][col] / p;
            if f != 0.0 {
                for k in col..N {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = [0.0; N];
    for row in (0..N).rev() {
        let s: f64 = (row + 1..N).map(|k| a[row][k] * x[k]).sum();
        x[row] = if a[row][row].abs() < 1e-300 {
            0.0
        } else {
            (b[row] - s) / a[row][row]
        };
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BanditConfig {
    pub mode: BanditMode,
    /// Rollouts before this index choose arms at random.
    pub breakpoint: usize,
    /// Refit an arm's oracle once this many observations are pending.
    pub refit_batch: usize,
    pub ridge: f64,
}

impl Default for BanditConfig {
    fn default() -> Self {
        BanditConfig {
            mode: BanditMode::Contextual,
            breakpoint: 5,
            refit_batch: 1,
            ridge: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmState {
    pub history: Vec<Observation>,
    pub oracle: RidgeOracle,
    pending: usize,
}

impl ArmState {
    fn new(ridge: f64) -> Self {
        ArmState {
            history: Vec::new(),
            oracle: RidgeOracle::new(ridge),
            pending: 0,
        }
    }

    fn refit(&mut self) {
        self.oracle.fit(&self.history);
        self.pending = 0;
    }

    fn mean_reward(&self) -> f64 {
        if self.history.is_empty() {
            f64::INFINITY
        } else {
            self.history.iter().map(|o| o.reward).sum::<f64>() / self.history.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditState {
    pub config: BanditConfig,
    arms: PerComponent<ArmState>,
    active: PerComponent<bool>,
}

impl BanditState {
    pub fn new(config: BanditConfig) -> Result<Self> {
        if config.refit_batch == 0 {
            return Err(Error::Config("oracle refit batch must be at least 1".into()));
        }
        if !(config.ridge.is_finite() && config.ridge > 0.0) {
            return Err(Error::Config("oracle ridge must be finite and > 0".into()));
        }
        let arm = || ArmState::new(config.ridge);
        Ok(BanditState {
            config,
            arms: PerComponent::new(arm(), arm(), arm()),
            active: PerComponent::new(true, true, true),
        })
    }

    pub fn arm(&self, kind: ComponentKind) -> &ArmState {
        self.arms.get(kind)
    }

    pub fn active_arms(&self) -> Vec<ComponentKind> {
        ComponentKind::ALL
            .into_iter()
            .filter(|&k| *self.active.get(k))
            .collect()
    }

    pub fn is_active(&self, kind: ComponentKind) -> bool {
        *self.active.get(kind)
    }

    /// Activates exactly the arms whose component is above its minimum.
    pub fn activate_for(&mut self, triple: &ExplanationTriple, req: &ExplanationRequirements) {
        for kind in ComponentKind::ALL {
            *self.active.get_mut(kind) = triple.size(kind) > *req.minima.get(kind);
        }
    }

    pub fn deactivate(&mut self, kind: ComponentKind) {
        *self.active.get_mut(kind) = false;
    }

    pub fn is_exploring(&self, rollout: usize) -> bool {
        self.config.mode == BanditMode::Random || rollout < self.config.breakpoint
    }

    /// Picks an arm for the next episode of `rollout`.
    pub fn select_arm(
        &mut self,
        rollout: usize,
        context: &ContextVector,
        rng: &mut ChaCha8Rng,
        kappa: usize,
    ) -> Result<(ComponentKind, Selection)> {
        let active = self.active_arms();
        if active.is_empty() {
            return Err(Error::NoActiveArms);
        }
        if self.is_exploring(rollout) {
            let arm = active[rng.gen_range(0..active.len())];
            let breakpoint = match self.config.mode {
                BanditMode::Random => kappa,
                _ => self.config.breakpoint,
            };
            return Ok((arm, Selection::Random { rollout, breakpoint }));
        }
        let mut best = active[0];
        let mut best_value = f64::NEG_INFINITY;
        for kind in active {
            let value = match self.config.mode {
                BanditMode::Mab => self.arms.get(kind).mean_reward(),
                _ => {
                    let arm = self.arms.get_mut(kind);
                    // warm-up observations are fit on first use
                    if !arm.oracle.is_fit() && !arm.history.is_empty() {
                        arm.refit();
                    }
                    arm.oracle.predict(context)
                }
            };
            if value > best_value {
                best = kind;
                best_value = value;
            }
        }
        Ok((best, Selection::Oracle))
    }

    /// Whether the next observation of `kind` in `rollout` should trigger a refit.
    pub fn refit_due(&self, kind: ComponentKind, rollout: usize) -> bool {
        self.config.mode == BanditMode::Contextual
            && rollout >= self.config.breakpoint
            && self.arms.get(kind).pending + 1 >= self.config.refit_batch
    }

    pub fn update_oracle(&mut self, kind: ComponentKind, observation: Observation, refit: bool) {
        let arm = self.arms.get_mut(kind);
        arm.history.push(observation);
        arm.pending += 1;
        if refit {
            arm.refit();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BudgetLimited {
    pub enabled: bool,
    /// Base cost per arm pull.
    pub c_o: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRequirements {
    pub minima: PerComponent<usize>,
    pub total_min: Option<usize>,
    pub budget_limited: BudgetLimited,
}

impl ExplanationRequirements {
    pub fn new(minima: PerComponent<usize>) -> Self {
        ExplanationRequirements {
            minima,
            total_min: None,
            budget_limited: BudgetLimited::default(),
        }
    }

    pub fn minima_sum(&self) -> usize {
        self.minima.downstream + self.minima.nodes + self.minima.node_features
    }

    pub fn validate(&self) -> Result<()> {
        for kind in ComponentKind::ALL {
            if *self.minima.get(kind) == 0 {
                return Err(Error::Config(format!("minimum for {kind} must be at least 1")));
            }
        }
        if let Some(t) = self.total_min {
            if t < self.minima_sum() {
                return Err(Error::Config(format!(
                    "total_min {t} is below the sum of component minima {}",
                    self.minima_sum()
                )));
            }
        }
        let c = self.budget_limited.c_o;
        if self.budget_limited.enabled && !(c.is_finite() && c >= 0.0) {
            return Err(Error::Config("budget_limited.c_o must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Total cost the budget-limited mode may spend starting from `full`.
    pub fn cost_budget(&self, full: &PerComponent<usize>) -> f64 {
        let start = full.downstream + full.nodes + full.node_features;
        start.saturating_sub(self.total_min.unwrap_or(self.minima_sum())) as f64
    }
}

/// Pull cost per arm: the total retained size over the arm's size, times `c_o`.
pub fn arm_costs(triple: &ExplanationTriple, c_o: f64) -> Result<PerComponent<f64>> {
    let sizes = triple.sizes();
    let total = (sizes.downstream + sizes.nodes + sizes.node_features) as f64;
    let cost = |kind: ComponentKind| -> Result<f64> {
        match *sizes.get(kind) {
            0 => Err(Error::InvalidTriple(format!("{kind} component is empty, no arm cost"))),
            s => Ok(total / s as f64 * c_o),
        }
    };
    Ok(PerComponent::new(
        cost(ComponentKind::Downstream)?,
        cost(ComponentKind::Nodes)?,
        cost(ComponentKind::NodeFeatures)?,
    ))
}

pub fn requirements_satisfied(triple: &ExplanationTriple, req: &ExplanationRequirements) -> bool {
    let per = ComponentKind::ALL
        .into_iter()
        .all(|k| triple.size(k) <= *req.minima.get(k));
    let sizes = triple.sizes();
    let total = sizes.downstream + sizes.nodes + sizes.node_features;
    per && req.total_min.is_none_or(|t| total <= t)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn sized(d: usize, n: usize, f: usize) -> ExplanationTriple {
        ExplanationTriple {
            retained_downstream: (0..d).collect(),
            subgraph_nodes: (0..n).collect(),
            retained_node_features: (0..f).collect(),
        }
    }

    fn ctx(x: f64) -> ContextVector {
        ContextVector([x, 0.5, 0.5, 0.0])
    }

    #[test]
    fn costs() {
        // sizes (features 2, downstream 2, nodes 5)
        let c = arm_costs(&sized(2, 5, 2), 1.0).unwrap();
        assert!((c.node_features - 4.5).abs() < 1e-12);
        assert!((c.downstream - 4.5).abs() < 1e-12);
        assert!((c.nodes - 1.8).abs() < 1e-12);

        let eq = arm_costs(&sized(3, 3, 3), 2.0).unwrap();
        assert_eq!((eq.downstream, eq.nodes, eq.node_features), (6.0, 6.0, 6.0));
        let zero = arm_costs(&sized(2, 5, 2), 0.0).unwrap();
        assert_eq!((zero.downstream, zero.nodes, zero.node_features), (0.0, 0.0, 0.0));
        assert!(arm_costs(&sized(0, 5, 2), 1.0).is_err());
    }

    #[test]
    fn requirements() {
        let req = ExplanationRequirements::new(PerComponent::new(2, 5, 2));
        assert!(requirements_satisfied(&sized(2, 5, 2), &req));
        assert!(!requirements_satisfied(&sized(3, 5, 2), &req));
        assert!(!requirements_satisfied(&sized(2, 6, 2), &req));

        let mut with_total = ExplanationRequirements::new(PerComponent::new(2, 5, 2));
        with_total.total_min = Some(9);
        assert!(requirements_satisfied(&sized(2, 5, 2), &with_total));
        with_total.total_min = Some(8);
        assert!(with_total.validate().is_err());
        assert!(ExplanationRequirements::new(PerComponent::new(0, 5, 2)).validate().is_err());
    }

    #[test]
    fn single_point_refit_interpolates() {
        let mut o = RidgeOracle::new(1e-3);
        assert_eq!(o.predict(&ctx(0.2)), f64::INFINITY);
        o.fit(&[Observation {
            context: ctx(0.2),
            reward: 0.37,
        }]);
        assert!((o.predict(&ctx(0.2)) - 0.37).abs() < 1e-9);
    }

    #[test]
    fn ridge_recovers_a_line() {
        let data: Vec<Observation> = (0..20)
            .map(|i| {
                let x = i as f64 / 20.0;
                Observation {
                    context: ctx(x),
                    reward: 1.0 + 2.0 * x,
                }
            })
            .collect();
        let mut o = RidgeOracle::new(1e-9);
        o.fit(&data);
        assert!((o.predict(&ctx(0.5)) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn append_without_refit_keeps_predictions() {
        let mut b = BanditState::new(BanditConfig::default()).unwrap();
        let obs = |r| Observation {
            context: ctx(0.3),
            reward: r,
        };
        b.update_oracle(ComponentKind::Nodes, obs(0.5), true);
        let before = b.arm(ComponentKind::Nodes).oracle.predict(&ctx(0.3));
        b.update_oracle(ComponentKind::Nodes, obs(0.9), false);
        assert_eq!(b.arm(ComponentKind::Nodes).oracle.predict(&ctx(0.3)), before);
        assert_eq!(b.arm(ComponentKind::Nodes).history.len(), 2);
    }

    #[test]
    fn refit_batches() {
        let cfg = BanditConfig {
            refit_batch: 4,
            breakpoint: 0,
            ..Default::default()
        };
        let mut b = BanditState::new(cfg).unwrap();
        let mut fired = Vec::new();
        for n in 1..=12 {
            let due = b.refit_due(ComponentKind::Downstream, 3);
            if due {
                fired.push(n);
            }
            b.update_oracle(
                ComponentKind::Downstream,
                Observation {
                    context: ctx(0.1),
                    reward: 0.0,
                },
                due,
            );
        }
        assert_eq!(fired, vec![4, 8, 12]);
        // before the breakpoint nothing is refit
        let b = BanditState::new(BanditConfig::default()).unwrap();
        assert!(!b.refit_due(ComponentKind::Downstream, 0));
    }

    #[test]
    fn selection_phases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = BanditState::new(BanditConfig::default()).unwrap();
        let (_, how) = b.select_arm(0, &ctx(0.0), &mut rng, 20).unwrap();
        assert_eq!(
            how,
            Selection::Random {
                rollout: 0,
                breakpoint: 5
            }
        );
        // after the breakpoint: predictions 0.1, 0.9, 0.3 pick the nodes arm
        for (kind, r) in ComponentKind::ALL.into_iter().zip([0.1, 0.9, 0.3]) {
            b.update_oracle(
                kind,
                Observation {
                    context: ctx(0.0),
                    reward: r,
                },
                true,
            );
        }
        assert_eq!(b.select_arm(7, &ctx(0.0), &mut rng, 20).unwrap(), (ComponentKind::Nodes, Selection::Oracle));
        // inactive arms are never chosen
        b.deactivate(ComponentKind::Nodes);
        assert_eq!(b.select_arm(7, &ctx(0.0), &mut rng, 20).unwrap().0, ComponentKind::NodeFeatures);
        b.deactivate(ComponentKind::NodeFeatures);
        for r in 0..10 {
            assert_eq!(b.select_arm(r, &ctx(0.0), &mut rng, 20).unwrap().0, ComponentKind::Downstream);
        }
        b.deactivate(ComponentKind::Downstream);
        assert!(matches!(b.select_arm(0, &ctx(0.0), &mut rng, 20), Err(Error::NoActiveArms)));
    }

    #[test]
    fn random_phase_is_uniform_over_active() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut b = BanditState::new(BanditConfig::default()).unwrap();
        b.deactivate(ComponentKind::Downstream);
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            counts[b.select_arm(0, &ctx(0.0), &mut rng, 20).unwrap().0.index()] += 1;
        }
        assert_eq!(counts[0], 0);
        assert!(counts[1].abs_diff(1500) < 150 && counts[2].abs_diff(1500) < 150);
    }

    #[test]
    fn mab_uses_running_means() {
        let cfg = BanditConfig {
            mode: BanditMode::Mab,
            breakpoint: 0,
            ..Default::default()
        };
        let mut b = BanditState::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (kind, rewards) in ComponentKind::ALL.into_iter().zip([[0.2, 0.4], [0.1, 0.1], [0.5, 0.0]]) {
            for r in rewards {
                b.update_oracle(
                    kind,
                    Observation {
                        context: ctx(0.0),
                        reward: r,
                    },
                    false,
                );
            }
        }
        assert_eq!(b.select_arm(3, &ctx(0.9), &mut rng, 20).unwrap().0, ComponentKind::Downstream);
    }
}
