//! Fidelity of explanations and agreement with planted ground truth.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ExplanationTriple, Graph, NodeId};
use crate::model::{EvalOptions, PipelineModel, Scorer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FidelityKind {
    /// Occlusion: the explanation is removed and everything else kept.
    Plus,
    /// Restriction: only the explanation is kept.
    Minus,
}

/// |p(full input) - p(occluded or restricted input)| for the explained class.
pub fn fidelity_term(scorer: &Scorer<'_>, triple: &ExplanationTriple, kind: FidelityKind) -> Result<f64> {
    let graph = scorer.graph();
    triple.validate(graph)?;
    let full = scorer.score(&ExplanationTriple::full(graph))?;
    let masked = match kind {
        FidelityKind::Plus => scorer.score(&triple.complement(graph))?,
        FidelityKind::Minus => scorer.score(triple)?,
    };
    Ok((full - masked).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelitySeries {
    pub kind: FidelityKind,
    pub value: f64,
    pub terms: Vec<f64>,
}

pub fn fidelity(
    pipeline: &PipelineModel,
    samples: &[(&Graph, &ExplanationTriple)],
    kind: FidelityKind,
) -> Result<FidelitySeries> {
    if samples.is_empty() {
        return Err(Error::Config("fidelity needs at least one sample".into()));
    }
    let terms = samples
        .iter()
        .map(|(g, t)| {
            let scorer = Scorer::new(pipeline, g, EvalOptions::default())?;
            fidelity_term(&scorer, t, kind)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(FidelitySeries {
        kind,
        value: mean(&terms),
        terms,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub fidelity_plus: f64,
    pub fidelity_minus: f64,
    pub plus_terms: Vec<f64>,
    pub minus_terms: Vec<f64>,
    pub samples: usize,
}

impl FidelityReport {
    pub fn from_terms(plus_terms: Vec<f64>, minus_terms: Vec<f64>) -> Result<Self> {
        if plus_terms.is_empty() || plus_terms.len() != minus_terms.len() {
            return Err(Error::Config("fidelity needs matching, nonempty term lists".into()));
        }
        Ok(FidelityReport {
            fidelity_plus: mean(&plus_terms),
            fidelity_minus: mean(&minus_terms),
            samples: plus_terms.len(),
            plus_terms,
            minus_terms,
        })
    }
}

/// Both fidelities over the same samples.
pub fn fidelity_report(pipeline: &PipelineModel, samples: &[(&Graph, &ExplanationTriple)]) -> Result<FidelityReport> {
    let plus = fidelity(pipeline, samples, FidelityKind::Plus)?;
    let minus = fidelity(pipeline, samples, FidelityKind::Minus)?;
    FidelityReport::from_terms(plus.terms, minus.terms)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub motif_nodes: BTreeSet<NodeId>,
    pub downstream_features: BTreeSet<usize>,
    pub node_features: BTreeSet<usize>,
}

impl GroundTruth {
    pub fn validate(&self, graph: &Graph) -> Result<()> {
        let as_triple = ExplanationTriple {
            retained_downstream: self.downstream_features.clone(),
            subgraph_nodes: self.motif_nodes.clone(),
            retained_node_features: self.node_features.clone(),
        };
        as_triple.validate(graph)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
}

/// Precision is 0 for an empty found set, recall is 0 for an empty planted set.
pub fn precision_recall(found: &BTreeSet<usize>, planted: &BTreeSet<usize>) -> PrecisionRecall {
    let hit = found.intersection(planted).count() as f64;
    let ratio = |d: usize| if d == 0 { 0.0 } else { hit / d as f64 };
    PrecisionRecall {
        precision: ratio(found.len()),
        recall: ratio(planted.len()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthScores {
    pub nodes: PrecisionRecall,
    pub downstream: PrecisionRecall,
    pub node_features: PrecisionRecall,
}

pub fn ground_truth_scores(triple: &ExplanationTriple, truth: &GroundTruth) -> GroundTruthScores {
    GroundTruthScores {
        nodes: precision_recall(&triple.subgraph_nodes, &truth.motif_nodes),
        downstream: precision_recall(&triple.retained_downstream, &truth.downstream_features),
        node_features: precision_recall(&triple.retained_node_features, &truth.node_features),
    }
}
