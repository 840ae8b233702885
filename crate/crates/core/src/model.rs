//! Inference-only evaluators for the upstream message-passing model and the
//! downstream classifier, plus pipeline composition and feature scaling.
//!
//! A pipeline scores an input by embedding the (masked) graph, concatenating
//! the embedding after the downstream feature vector, and reading off the
//! downstream probability of the explained class.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{masked_features, membership, ExplanationTriple, Graph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpstreamKind {
    /// h' = act(W((1 + eps) h_i + sum_j h_j) + b)
    Gin,
    /// h' = act(W h_i + W_n mean_j h_j + b)
    Sage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    Sum,
    #[default]
    Mean,
    /// The row of the explained node (node-classification tasks).
    Node,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MessagePassingLayer {
    #[serde(default)]
    pub eps: f64,
    /// Row-major, `out x in`.
    pub weights: Vec<Vec<f64>>,
    /// SAGE only: weights applied to the mean of neighbour states.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neighbor_weights: Option<Vec<Vec<f64>>>,
    pub bias: Vec<f64>,
    /// Defaults to ReLU on hidden layers and identity on the last one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<Activation>,
}

impl MessagePassingLayer {
    pub fn input_width(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn output_width(&self) -> usize {
        self.weights.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MessagePassingModel {
    pub kind: UpstreamKind,
    pub layers: Vec<MessagePassingLayer>,
    #[serde(default)]
    pub readout: Readout,
}

fn check_matrix(name: &str, m: &[Vec<f64>], rows: usize, cols: usize) -> Result<()> {
    if m.len() != rows || m.iter().any(|r| r.len() != cols) {
        return Err(Error::InvalidModel(format!(
            "{name} must be {rows} x {cols}"
        )));
    }
    if m.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::InvalidModel(format!("{name} has non-finite entries")));
    }
    Ok(())
}

fn affine(weights: &[Vec<f64>], x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(weights) {
        *o += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    }
}

impl MessagePassingModel {
    /// Checks the width chain and returns (input width, output width).
    pub fn validate(&self) -> Result<(usize, usize)> {
        let Some(first) = self.layers.first() else {
            return Err(Error::InvalidModel("upstream model has no layers".into()));
        };
        let input = first.input_width();
        let mut width = input;
        for (k, layer) in self.layers.iter().enumerate() {
            let out = layer.output_width();
            check_matrix(&format!("layer {k} weights"), &layer.weights, out, width)?;
            if layer.bias.len() != out {
                return Err(Error::InvalidModel(format!(
                    "layer {k} bias has {} entries, expected {out}",
                    layer.bias.len()
                )));
            }
            match (self.kind, &layer.neighbor_weights) {
                (UpstreamKind::Sage, Some(wn)) => {
                    check_matrix(&format!("layer {k} neighbor_weights"), wn, out, width)?
                }
                (UpstreamKind::Sage, None) => {
                    return Err(Error::InvalidModel(format!(
                        "sage layer {k} is missing neighbor_weights"
                    )))
                }
                (UpstreamKind::Gin, Some(_)) => {
                    return Err(Error::InvalidModel(format!(
                        "gin layer {k} must not carry neighbor_weights"
                    )))
                }
                (UpstreamKind::Gin, None) => {}
            }
            if !layer.eps.is_finite() {
                return Err(Error::InvalidModel(format!("layer {k} eps is not finite")));
            }
            width = out;
        }
        Ok((input, width))
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, MessagePassingLayer::input_width)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, MessagePassingLayer::output_width)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Final-layer state of every node. With `active`, messages only travel
    /// along edges whose endpoints are both active.
    pub fn node_embeddings(
        &self,
        graph: &Graph,
        features: &[Vec<f64>],
        active: Option<&[bool]>,
    ) -> Vec<Vec<f64>> {
        let n_layers = self.layers.len();
        let mut h: Vec<Vec<f64>> = features.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let act = layer.activation.unwrap_or(if k + 1 == n_layers {
                Activation::Identity
            } else {
                Activation::Relu
            });
            let width = layer.input_width();
            let mut next = Vec::with_capacity(h.len());
            for i in 0..h.len() {
                let mut agg = vec![0.0; width];
                let mut count = 0usize;
                for &j in graph.message_sources(i) {
                    if let Some(mask) = active {
                        if !(mask[i] && mask[j]) {
                            continue;
                        }
                    }
                    for (a, x) in agg.iter_mut().zip(&h[j]) {
                        *a += x;
                    }
                    count += 1;
                }
                let mut out = layer.bias.clone();
                match self.kind {
                    UpstreamKind::Gin => {
                        let scale = 1.0 + layer.eps;
                        for (a, x) in agg.iter_mut().zip(&h[i]) {
                            *a += scale * x;
                        }
                        affine(&layer.weights, &agg, &mut out);
                    }
                    UpstreamKind::Sage => {
                        if count > 0 {
                            let inv = 1.0 / count as f64;
                            agg.iter_mut().for_each(|a| *a *= inv);
                        }
                        affine(&layer.weights, &h[i], &mut out);
                        if let Some(wn) = &layer.neighbor_weights {
                            affine(wn, &agg, &mut out);
                        }
                    }
                }
                out.iter_mut().for_each(|o| *o = act.apply(*o));
                next.push(out);
            }
            h = next;
        }
        h
    }

    /// Pools node states into a single embedding. `node` is required for node readout.
    pub fn embed(
        &self,
        graph: &Graph,
        features: &[Vec<f64>],
        node: Option<NodeId>,
        active: Option<&[bool]>,
    ) -> Result<Vec<f64>> {
        let width = features.first().map_or(self.input_width(), Vec::len);
        if width != self.input_width() {
            return Err(Error::Shape(format!(
                "graph has {width} node features, upstream model expects {}",
                self.input_width()
            )));
        }
        let states = self.node_embeddings(graph, features, active);
        let d = self.output_width();
        match self.readout {
            Readout::Node => {
                let v = node.ok_or_else(|| {
                    Error::InvalidModel("node readout needs a node-classification task".into())
                })?;
                states
                    .get(v)
                    .cloned()
                    .ok_or_else(|| Error::Shape(format!("node {v} out of range")))
            }
            Readout::Sum | Readout::Mean => {
                let mut pooled = vec![0.0; d];
                for row in &states {
                    for (p, x) in pooled.iter_mut().zip(row) {
                        *p += x;
                    }
                }
                if self.readout == Readout::Mean && !states.is_empty() {
                    let inv = 1.0 / states.len() as f64;
                    pooled.iter_mut().for_each(|p| *p *= inv);
                }
                Ok(pooled)
            }
        }
    }
}

/// Upstream embedding of an unmasked graph.
pub fn upstream_eval(
    model: &MessagePassingModel,
    graph: &Graph,
    node: Option<NodeId>,
) -> Result<Vec<f64>> {
    model.validate()?;
    model.embed(graph, graph.node_features(), node, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        values: Vec<f64>,
    },
}

/// Axis-aligned tree: `x[feature] <= threshold` goes left. Node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<TreeNode>,
}

impl DecisionTree {
    pub fn stump(feature: usize, threshold: f64, left: Vec<f64>, right: Vec<f64>) -> Self {
        DecisionTree {
            nodes: vec![
                TreeNode::Split {
                    feature,
                    threshold,
                    left: 1,
                    right: 2,
                },
                TreeNode::Leaf { values: left },
                TreeNode::Leaf { values: right },
            ],
        }
    }

    fn leaf(&self, x: &[f64]) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { values } => return values,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    fn validate(&self, t: usize, input_dim: usize, classes: usize) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidModel(format!("tree {t} is empty")));
        }
        for (i, node) in self.nodes.iter().enumerate() {
            match node {
                TreeNode::Leaf { values } => {
                    if values.len() != classes || values.iter().any(|v| !v.is_finite()) {
                        return Err(Error::InvalidModel(format!(
                            "tree {t} leaf {i} needs {classes} finite values"
                        )));
                    }
                }
                TreeNode::Split {
                    feature,
                    left,
                    right,
                    threshold,
                } => {
                    // children after parents rules out cycles
                    let ok = *feature < input_dim
                        && *left > i
                        && *right > i
                        && *left < self.nodes.len()
                        && *right < self.nodes.len()
                        && !threshold.is_nan();
                    if !ok {
                        return Err(Error::InvalidModel(format!(
                            "tree {t} split {i} is malformed"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DownstreamModel {
    /// softmax(W x + b), `W` is `classes x input`.
    LinearSoftmax { weights: Vec<Vec<f64>>, bias: Vec<f64> },
    /// softmax of summed leaf logit vectors.
    TreeEnsemble {
        num_classes: usize,
        num_features: usize,
        trees: Vec<DecisionTree>,
    },
}

fn softmax(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    logits.iter_mut().for_each(|l| *l /= total);
}

impl DownstreamModel {
    pub fn input_dim(&self) -> usize {
        match self {
            DownstreamModel::LinearSoftmax { weights, .. } => weights.first().map_or(0, Vec::len),
            DownstreamModel::TreeEnsemble { num_features, .. } => *num_features,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DownstreamModel::LinearSoftmax { weights, .. } => weights.len(),
            DownstreamModel::TreeEnsemble { num_classes, .. } => *num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let classes = self.num_classes();
        if classes == 0 {
            return Err(Error::InvalidModel("downstream model has no classes".into()));
        }
        match self {
            DownstreamModel::LinearSoftmax { weights, bias } => {
                check_matrix("downstream weights", weights, classes, self.input_dim())?;
                if bias.len() != classes || bias.iter().any(|b| !b.is_finite()) {
                    return Err(Error::InvalidModel(format!(
                        "downstream bias needs {classes} finite entries"
                    )));
                }
            }
            DownstreamModel::TreeEnsemble { trees, .. } => {
                for (t, tree) in trees.iter().enumerate() {
                    tree.validate(t, self.input_dim(), classes)?;
                }
            }
        }
        Ok(())
    }

    /// Class probabilities for one input row.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut logits = match self {
            DownstreamModel::LinearSoftmax { weights, bias } => {
                let mut out = bias.clone();
                affine(weights, x, &mut out);
                out
            }
            DownstreamModel::TreeEnsemble {
                num_classes, trees, ..
            } => {
                let mut out = vec![0.0; *num_classes];
                for tree in trees {
                    for (o, v) in out.iter_mut().zip(tree.leaf(x)) {
                        *o += v;
                    }
                }
                out
            }
        };
        softmax(&mut logits);
        logits
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Task {
    #[default]
    GraphClassification,
    /// Explain the prediction at `node`; `hops` defaults to the layer count.
    NodeClassification {
        node: NodeId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        hops: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineModel {
    pub upstream: MessagePassingModel,
    pub downstream: DownstreamModel,
    /// Neutral value for each downstream feature.
    pub baseline: Vec<f64>,
    #[serde(default)]
    pub task: Task,
    /// Class whose probability is explained; the predicted class when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explained_class: Option<usize>,
}

impl PipelineModel {
    pub fn validate(&self) -> Result<()> {
        let (_, d) = self.upstream.validate()?;
        self.downstream.validate()?;
        if self.downstream.input_dim() != self.baseline.len() + d {
            return Err(Error::InvalidModel(format!(
                "downstream expects {} inputs but baseline ({}) + embedding ({d}) give {}",
                self.downstream.input_dim(),
                self.baseline.len(),
                self.baseline.len() + d
            )));
        }
        if let Some(c) = self.explained_class {
            if c >= self.downstream.num_classes() {
                return Err(Error::InvalidModel(format!(
                    "explained class {c} out of range 0..{}",
                    self.downstream.num_classes()
                )));
            }
        }
        let node_task = matches!(self.task, Task::NodeClassification { .. });
        if (self.upstream.readout == Readout::Node) != node_task {
            return Err(Error::InvalidModel(
                "node readout goes with node-classification tasks and only with them".into(),
            ));
        }
        if let Task::NodeClassification { hops: Some(k), .. } = self.task {
            if k < self.upstream.num_layers() {
                return Err(Error::InvalidModel(format!(
                    "hops = {k} is below the {} message-passing layers",
                    self.upstream.num_layers()
                )));
            }
        }
        Ok(())
    }

    pub fn task_node(&self) -> Option<NodeId> {
        match self.task {
            Task::GraphClassification => None,
            Task::NodeClassification { node, .. } => Some(node),
        }
    }

    pub fn hops(&self) -> usize {
        match self.task {
            Task::NodeClassification { hops: Some(k), .. } => k,
            _ => self.upstream.num_layers(),
        }
    }

    pub fn num_downstream(&self) -> usize {
        self.baseline.len()
    }

    /// Same pipeline, explaining `node` instead.
    pub fn with_task_node(&self, node: NodeId) -> Self {
        let mut p = self.clone();
        if let Task::NodeClassification { node: v, .. } = &mut p.task {
            *v = node;
        }
        p
    }
}

pub fn load_pipeline(path: impl AsRef<Path>) -> Result<PipelineModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pipeline(&text, &path.display().to_string())
}

pub fn parse_pipeline(text: &str, origin: &str) -> Result<PipelineModel> {
    let p: PipelineModel = serde_json::from_str(text).map_err(|e| Error::parse(origin, &e))?;
    p.validate()?;
    Ok(p)
}

pub fn save_pipeline(path: impl AsRef<Path>, pipeline: &PipelineModel) -> Result<()> {
    pipeline.validate()?;
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(pipeline).expect("pipeline serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Also drop edges touching pruned nodes, instead of zero-padding alone.
    #[serde(default)]
    pub structural_removal: bool,
}

/// A pipeline bound to one input graph, with dimensions checked once.
///
/// Every call to [`Scorer::probability`] counts as one model evaluation.
pub struct Scorer<'a> {
    pipeline: &'a PipelineModel,
    graph: &'a Graph,
    class: usize,
    options: EvalOptions,
    evaluations: AtomicU64,
}

impl<'a> Scorer<'a> {
    pub fn new(pipeline: &'a PipelineModel, graph: &'a Graph, options: EvalOptions) -> Result<Self> {
        pipeline.validate()?;
        if graph.num_node_features() != pipeline.upstream.input_width() && graph.num_nodes() > 0 {
            return Err(Error::Shape(format!(
                "graph has {} node features, upstream model expects {}",
                graph.num_node_features(),
                pipeline.upstream.input_width()
            )));
        }
        if graph.num_downstream() != pipeline.num_downstream() {
            return Err(Error::Shape(format!(
                "graph has {} downstream features, pipeline expects {}",
                graph.num_downstream(),
                pipeline.num_downstream()
            )));
        }
        if let Some(v) = pipeline.task_node() {
            if v >= graph.num_nodes() {
                return Err(Error::Shape(format!(
                    "explained node {v} outside graph of {} nodes",
                    graph.num_nodes()
                )));
            }
        }
        let mut scorer = Scorer {
            pipeline,
            graph,
            class: 0,
            options,
            evaluations: AtomicU64::new(0),
        };
        scorer.class = match pipeline.explained_class {
            Some(c) => c,
            None => {
                let full = ExplanationTriple::full(graph);
                let probs = scorer.probabilities(&scorer.tabular_for(&full), &scorer.embedding_for(&full));
                argmax(&probs)
            }
        };
        scorer.evaluations.store(0, Ordering::Relaxed);
        Ok(scorer)
    }

    pub fn pipeline(&self) -> &'a PipelineModel {
        self.pipeline
    }

    pub fn graph(&self) -> &'a Graph {
        self.graph
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    /// Embedding with node rows outside `nodes` and columns outside `cols` zeroed.
    pub fn embedding(&self, nodes: &[bool], cols: &[bool]) -> Vec<f64> {
        let features = masked_features(self.graph, nodes, cols);
        let active = self.options.structural_removal.then_some(nodes);
        self.pipeline
            .upstream
            .embed(self.graph, &features, self.pipeline.task_node(), active)
            .expect("dimensions checked at construction")
    }

    pub fn embedding_for(&self, triple: &ExplanationTriple) -> Vec<f64> {
        let nodes = membership(&triple.subgraph_nodes, self.graph.num_nodes());
        let cols = membership(&triple.retained_node_features, self.graph.num_node_features());
        self.embedding(&nodes, &cols)
    }

    /// Observed downstream values where `observed`, baseline elsewhere.
    pub fn tabular(&self, observed: &[bool]) -> Vec<f64> {
        self.graph
            .downstream_features()
            .iter()
            .zip(&self.pipeline.baseline)
            .zip(observed)
            .map(|((&x, &b), &keep)| if keep { x } else { b })
            .collect()
    }

    pub fn tabular_for(&self, triple: &ExplanationTriple) -> Vec<f64> {
        self.tabular(&membership(&triple.retained_downstream, self.graph.num_downstream()))
    }

    fn probabilities(&self, tabular: &[f64], embedding: &[f64]) -> Vec<f64> {
        let mut input = Vec::with_capacity(tabular.len() + embedding.len());
        input.extend_from_slice(tabular);
        input.extend_from_slice(embedding);
        self.pipeline.downstream.predict_proba(&input)
    }

    /// Downstream probability of the explained class.
    pub fn probability(&self, tabular: &[f64], embedding: &[f64]) -> f64 {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        self.probabilities(tabular, embedding)[self.class]
    }

    pub fn score(&self, triple: &ExplanationTriple) -> Result<f64> {
        triple.validate(self.graph)?;
        Ok(self.probability(&self.tabular_for(triple), &self.embedding_for(triple)))
    }

    /// Like [`Scorer::score`], but with a caller-supplied downstream vector.
    pub fn score_with_downstream(&self, triple: &ExplanationTriple, downstream: &[f64]) -> Result<f64> {
        triple.validate(self.graph)?;
        if downstream.len() != self.graph.num_downstream() {
            return Err(Error::Shape(format!(
                "downstream override has {} entries, expected {}",
                downstream.len(),
                self.graph.num_downstream()
            )));
        }
        Ok(self.probability(downstream, &self.embedding_for(triple)))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Probability of the explained class for `graph` restricted to `triple`.
pub fn pipeline_eval(
    pipeline: &PipelineModel,
    graph: &Graph,
    triple: &ExplanationTriple,
    downstream_override: Option<&[f64]>,
) -> Result<f64> {
    let scorer = Scorer::new(pipeline, graph, EvalOptions::default())?;
    match downstream_override {
        Some(x) => scorer.score_with_downstream(triple, x),
        None => scorer.score(triple),
    }
}

/// The `hops`-hop neighbourhood of `v` as its own graph, with `map[new] = old`.
/// Returns the restricted graph, the map, and the new id of `v`.
pub fn restrict_to_computational_graph(
    graph: &Graph,
    v: NodeId,
    hops: usize,
) -> Result<(Graph, Vec<NodeId>, NodeId)> {
    if v >= graph.num_nodes() {
        return Err(Error::InvalidGraph(format!(
            "node {v} outside graph of {} nodes",
            graph.num_nodes()
        )));
    }
    let keep = graph.k_hop_nodes(v, hops);
    let new_v = keep.binary_search(&v).expect("v is in its own neighbourhood");
    let sub = graph.induced_subgraph(&keep)?;
    Ok((sub, keep, new_v))
}

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let Some(first) = rows.first() else {
        return Err(Error::Shape("empty dataset".into()));
    };
    let d = first.len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("rows differ in length".into()));
    }
    Ok(d)
}

/// Componentwise mean of the downstream vectors.
pub fn compute_baseline(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = check_rows(rows)?;
    let mut mean = vec![0.0; d];
    for row in rows {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    let inv = 1.0 / rows.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(mean)
}

/// Per-feature standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features with zero variance, whose std was clamped to 1.
    #[serde(default)]
    pub clamped: Vec<usize>,
}

const MIN_STD: f64 = 1e-12;

pub fn fit_scaler(rows: &[Vec<f64>]) -> Result<Scaler> {
    let mean = compute_baseline(rows)?;
    let mut var = vec![0.0; mean.len()];
    for row in rows {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let mut clamped = Vec::new();
    let std = var
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let s = (v / rows.len() as f64).sqrt();
            if s < MIN_STD {
                clamped.push(i);
                1.0
            } else {
                s
            }
        })
        .collect();
    Ok(Scaler { mean, std, clamped })
}

pub fn apply_scaler(scaler: &Scaler, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .map(|row| {
            if row.len() != scaler.mean.len() {
                return Err(Error::Shape(format!(
                    "row has {} features, scaler expects {}",
                    row.len(),
                    scaler.mean.len()
                )));
            }
            Ok(row
                .iter()
                .zip(&scaler.mean)
                .zip(&scaler.std)
                .map(|((x, m), s)| (x - m) / s)
                .collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_gin(width: usize, layers: usize) -> MessagePassingModel {
        let eye: Vec<Vec<f64>> = (0..width)
            .map(|i| (0..width).map(|j| f64::from(u8::from(i == j))).collect())
            .collect();
        MessagePassingModel {
            kind: UpstreamKind::Gin,
            layers: (0..layers)
                .map(|_| MessagePassingLayer {
                    eps: 0.0,
                    weights: eye.clone(),
                    neighbor_weights: None,
                    bias: vec![0.0; width],
                    activation: Some(Activation::Identity),
                })
                .collect(),
            readout: Readout::Sum,
        }
    }

    fn path3() -> Graph {
        Graph::new(3, false, vec![(0, 1), (1, 2)], vec![vec![1.0], vec![2.0], vec![3.0]]).unwrap()
    }

    #[test]
    fn one_gin_layer_by_hand() {
        let g = path3();
        let m = identity_gin(1, 1);
        let states = m.node_embeddings(&g, g.node_features(), None);
        assert_eq!(states, vec![vec![3.0], vec![6.0], vec![5.0]]);
        assert_eq!(upstream_eval(&m, &g, None).unwrap(), vec![14.0]);
    }

    #[test]
    fn zero_features_give_zero_embedding() {
        let g = Graph::new(3, false, vec![(0, 1), (1, 2)], vec![vec![0.0; 2]; 3]).unwrap();
        let mut m = identity_gin(2, 2);
        m.layers[0].weights = vec![vec![0.3, -1.2], vec![2.0, 0.5]];
        m.layers[0].activation = Some(Activation::Relu);
        assert_eq!(upstream_eval(&m, &g, None).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn sage_mean_aggregation() {
        let g = path3();
        let m = MessagePassingModel {
            kind: UpstreamKind::Sage,
            layers: vec![MessagePassingLayer {
                eps: 0.0,
                weights: vec![vec![1.0]],
                neighbor_weights: Some(vec![vec![10.0]]),
                bias: vec![0.5],
                activation: None,
            }],
            readout: Readout::Node,
        };
        // node 1: 2 + 10 * mean(1, 3) + 0.5
        let states = m.node_embeddings(&g, g.node_features(), None);
        assert_eq!(states[1], vec![22.5]);
        assert_eq!(m.embed(&g, g.node_features(), Some(1), None).unwrap(), vec![22.5]);
    }

    #[test]
    fn width_chain_is_checked() {
        let mut m = identity_gin(2, 2);
        m.layers[1].weights = vec![vec![1.0, 0.0, 0.0]];
        m.layers[1].bias = vec![0.0];
        assert!(m.validate().is_err());
    }

    fn linear_pipeline(weights: Vec<Vec<f64>>, baseline: Vec<f64>) -> PipelineModel {
        let c = weights.len();
        PipelineModel {
            upstream: identity_gin(1, 1),
            downstream: DownstreamModel::LinearSoftmax {
                weights,
                bias: vec![0.0; c],
            },
            baseline,
            task: Task::GraphClassification,
            explained_class: Some(0),
        }
    }

    #[test]
    fn zero_weights_give_uniform_probability() {
        let g = path3().with_downstream_features(vec![1.0, -1.0]);
        let p = linear_pipeline(vec![vec![0.0; 3]; 4], vec![0.0, 0.0]);
        for t in [ExplanationTriple::full(&g), ExplanationTriple::empty()] {
            assert!((pipeline_eval(&p, &g, &t, None).unwrap() - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn full_triple_matches_raw_score_and_empty_downstream_uses_baseline() {
        let g = path3().with_downstream_features(vec![1.0, -1.0]);
        let p = linear_pipeline(vec![vec![0.4, -0.3, 0.05], vec![0.0; 3]], vec![0.2, 0.7]);
        let raw = {
            let mut input = vec![1.0, -1.0];
            input.extend(upstream_eval(&p.upstream, &g, None).unwrap());
            p.downstream.predict_proba(&input)[0]
        };
        let full = pipeline_eval(&p, &g, &ExplanationTriple::full(&g), None).unwrap();
        assert_eq!(full, raw);

        let mut t = ExplanationTriple::full(&g);
        t.retained_downstream.clear();
        let scorer = Scorer::new(&p, &g, EvalOptions::default()).unwrap();
        assert_eq!(scorer.tabular_for(&t), vec![0.2, 0.7]);
        let with_override = pipeline_eval(&p, &g, &ExplanationTriple::full(&g), Some(&[0.2, 0.7])).unwrap();
        assert_eq!(pipeline_eval(&p, &g, &t, None).unwrap(), with_override);
    }

    #[test]
    fn tree_ensemble_sums_leaf_logits() {
        let model = DownstreamModel::TreeEnsemble {
            num_classes: 2,
            num_features: 2,
            trees: vec![
                DecisionTree::stump(0, 0.0, vec![1.0, 0.0], vec![0.0, 1.0]),
                DecisionTree::stump(1, 0.5, vec![0.5, 0.0], vec![0.0, 0.0]),
            ],
        };
        model.validate().unwrap();
        let p = model.predict_proba(&[-1.0, 0.0]);
        let expect = 1.0 / (1.0 + (-1.5f64).exp());
        assert!((p[0] - expect).abs() < 1e-15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn isolated_node_restricts_to_itself() {
        let g = Graph::new(3, false, vec![(0, 1)], vec![vec![1.0]; 3]).unwrap();
        let (sub, map, v) = restrict_to_computational_graph(&g, 2, 5).unwrap();
        assert_eq!(sub.num_nodes(), 1);
        assert_eq!(map, vec![2]);
        assert_eq!(v, 0);
        let (whole, _, _) = restrict_to_computational_graph(&g, 0, 9).unwrap();
        assert_eq!(whole.num_nodes(), 2);
        assert!(restrict_to_computational_graph(&g, 3, 1).is_err());
    }

    #[test]
    fn baselines() {
        assert_eq!(compute_baseline(&[vec![3.0, -1.0]]).unwrap(), vec![3.0, -1.0]);
        assert_eq!(
            compute_baseline(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap(),
            vec![1.0, 1.0]
        );
        assert!(compute_baseline(&[]).is_err());
    }

    #[test]
    fn scaler_cases() {
        let s = fit_scaler(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(s.clamped, vec![1]);
        let out = apply_scaler(&s, &[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(out, vec![vec![-1.0, 0.0], vec![1.0, 0.0]]);
        assert!(fit_scaler(&[]).is_err());
    }

    #[test]
    fn gin_with_four_hidden_layers_of_width_eight_loads() {
        let hidden = |inp: usize| MessagePassingLayer {
            eps: 0.1,
            weights: vec![vec![0.01; inp]; 8],
            neighbor_weights: None,
            bias: vec![0.0; 8],
            activation: None,
        };
        let p = PipelineModel {
            upstream: MessagePassingModel {
                kind: UpstreamKind::Gin,
                layers: vec![hidden(7), hidden(8), hidden(8), hidden(8)],
                readout: Readout::Mean,
            },
            downstream: DownstreamModel::LinearSoftmax {
                weights: vec![vec![0.0; 15]; 2],
                bias: vec![0.0; 2],
            },
            baseline: vec![0.0; 7],
            task: Task::GraphClassification,
            explained_class: None,
        };
        let text = serde_json::to_string(&p).unwrap();
        let back = parse_pipeline(&text, "inline").unwrap();
        assert_eq!(back, p);
        assert_eq!(back.upstream.output_width(), 8);
    }

    #[test]
    fn stump_ensemble_round_trips() {
        let p = PipelineModel {
            upstream: identity_gin(1, 1),
            downstream: DownstreamModel::TreeEnsemble {
                num_classes: 2,
                num_features: 2,
                trees: vec![DecisionTree::stump(1, 0.25, vec![0.3, -0.3], vec![-0.1, 0.1])],
            },
            baseline: vec![0.0],
            task: Task::GraphClassification,
            explained_class: Some(1),
        };
        let text = serde_json::to_string_pretty(&p).unwrap();
        assert_eq!(parse_pipeline(&text, "inline").unwrap(), p);
    }

    #[test]
    fn broken_width_chain_fails_to_load() {
        let text = r#"{
            "upstream": {"kind": "gin", "readout": "sum", "layers": [
                {"weights": [[1.0, 0.0]], "bias": [0.0]},
                {"weights": [[1.0, 0.0]], "bias": [0.0]}
            ]},
            "downstream": {"kind": "linear_softmax", "weights": [[0.0], [0.0]], "bias": [0.0, 0.0]},
            "baseline": []
        }"#;
        assert!(matches!(parse_pipeline(text, "inline"), Err(Error::InvalidModel(_))));
    }
}
