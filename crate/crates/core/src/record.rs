//! The explanation record written after a run, checked on every write and read.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explainer::{Diagnostics, ExplainerConfig, ExplanationOutcome};
use crate::graph::{ComponentKind, ExplanationTriple, PerComponent};
use crate::metrics::FidelityReport;
use crate::shapley::{ImportanceScore, ImportanceWeights};

pub const RECORD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputIds {
    pub graph: String,
    pub pipeline: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplanationRecord {
    pub version: u32,
    pub inputs: InputIds,
    pub explained_class: usize,
    pub explained_node: Option<usize>,
    pub triple: ExplanationTriple,
    pub score: ImportanceScore,
    pub weights: ImportanceWeights,
    pub fidelity: Option<FidelityReport>,
    pub rollout_scores: Vec<f64>,
    pub best_rollout: usize,
    pub minima: PerComponent<usize>,
    pub satisfied: bool,
    pub seed: u64,
    /// Left out unless requested so that reruns are byte-identical.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_secs: Option<f64>,
    pub diagnostics: Diagnostics,
}

impl ExplanationRecord {
    pub fn from_outcome(
        outcome: &ExplanationOutcome,
        inputs: InputIds,
        config: &ExplainerConfig,
        explained_node: Option<usize>,
    ) -> Self {
        ExplanationRecord {
            version: RECORD_VERSION,
            inputs,
            explained_class: outcome.diagnostics.class,
            explained_node,
            triple: outcome.triple.clone(),
            score: outcome.score,
            weights: config.weights(),
            fidelity: None,
            rollout_scores: outcome.rollouts.iter().map(|r| r.score.total).collect(),
            best_rollout: outcome.best_rollout,
            minima: config.minima,
            satisfied: outcome.rollouts[outcome.best_rollout].satisfied,
            seed: config.seed,
            wall_time_secs: None,
            diagnostics: outcome.diagnostics.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Invariant(format!("explanation record: {m}")));
        if self.version != RECORD_VERSION {
            return fail(format!("unsupported version {}", self.version));
        }
        let Some(max) = self.rollout_scores.iter().copied().reduce(f64::max) else {
            return fail("no rollout scores".into());
        };
        if self.rollout_scores.iter().any(|s| !s.is_finite()) {
            return fail("non-finite rollout score".into());
        }
        if self.score.total != max {
            return fail(format!("score {} is not the best rollout score {max}", self.score.total));
        }
        if self.rollout_scores.get(self.best_rollout) != Some(&max) {
            return fail(format!("best_rollout {} does not hold the best score", self.best_rollout));
        }
        let recomputed = self.score.downstream.value
            + self.weights.lambda_subgraph * self.score.subgraph.value
            + self.weights.lambda_nodefeat * self.score.node_features.value;
        if (recomputed - self.score.total).abs() > 1e-9 * (1.0 + recomputed.abs()) {
            return fail(format!("components sum to {recomputed}, total is {}", self.score.total));
        }
        for kind in ComponentKind::ALL {
            let e = self.score.component(kind);
            if !(e.value.is_finite() && e.std_error.is_finite() && e.std_error >= 0.0) {
                return fail(format!("bad {kind} estimate"));
            }
        }
        let within = ComponentKind::ALL
            .into_iter()
            .all(|k| self.triple.size(k) <= *self.minima.get(k));
        if self.satisfied && !within {
            return fail("marked satisfied but a component is above its minimum".into());
        }
        if let Some(node) = self.explained_node {
            if !self.triple.subgraph_nodes.contains(&node) {
                return fail(format!("explained node {node} is not in the subgraph"));
            }
        }
        if let Some(t) = self.wall_time_secs {
            if !(t.is_finite() && t >= 0.0) {
                return fail("bad wall time".into());
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        Ok(serde_json::to_string_pretty(self).expect("record serializes") + "\n")
    }
}

pub fn write_record(path: impl AsRef<Path>, record: &ExplanationRecord) -> Result<()> {
    let path = path.as_ref();
    let text = record.to_json()?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn parse_record(text: &str, origin: &str) -> Result<ExplanationRecord> {
    let record: ExplanationRecord = serde_json::from_str(text).map_err(|e| Error::parse(origin, &e))?;
    record.validate()?;
    Ok(record)
}

pub fn read_record(path: impl AsRef<Path>) -> Result<ExplanationRecord> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_record(&text, &path.display().to_string())
}
