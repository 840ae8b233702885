//! Joint explanations for pipelines of a message-passing graph encoder feeding a
//! tabular model: a connected subgraph, a set of node-feature columns and a set
//! of downstream features, found by tree search steered by Shapley values.

pub mod bandit;
pub mod dot;
pub mod error;
pub mod explainer;
pub mod graph;
pub mod log;
pub mod mcts;
pub mod metrics;
pub mod model;
pub mod record;
pub mod shapley;
pub mod synth;

pub use error::{Error, Result};
pub use explainer::{run_explainer, ExplainerConfig, ExplanationOutcome};
pub use graph::{ComponentKind, ExplanationTriple, Graph, NodeId, PerComponent, StateKey};
pub use model::{DownstreamModel, MessagePassingModel, PipelineModel, Scorer};
