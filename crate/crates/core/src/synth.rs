//! Synthetic inputs with known answers: random base graphs, planted motifs, and
//! pipelines whose output depends only on the planted parts.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ExplanationTriple, Graph, NodeId};
use crate::metrics::GroundTruth;
use crate::model::{
    Activation, DownstreamModel, EvalOptions, MessagePassingLayer, MessagePassingModel, PipelineModel, Readout,
    Scorer, Task, UpstreamKind,
};

/// Preferential attachment: a clique on `attach` nodes, then each new node links
/// to `attach` distinct existing nodes chosen with probability proportional to degree.
pub fn generate_ba(n: usize, attach: usize, rng: &mut ChaCha8Rng) -> Result<Graph> {
    if attach == 0 || n <= attach {
        return Err(Error::Config(format!("BA graph needs n > attach >= 1, got n={n}, attach={attach}")));
    }
    let mut edges = Vec::new();
    let mut degree = vec![0usize; n];
    for u in 0..attach {
        for v in u + 1..attach {
            edges.push((u, v));
            degree[u] += 1;
            degree[v] += 1;
        }
    }
    for u in attach..n {
        let mut chosen = BTreeSet::new();
        while chosen.len() < attach {
            let total: usize = (0..u).filter(|v| !chosen.contains(v)).map(|v| degree[v]).sum();
            let pick = if total == 0 {
                let free: Vec<usize> = (0..u).filter(|v| !chosen.contains(v)).collect();
                free[rng.gen_range(0..free.len())]
            } else {
                let mut r = rng.gen_range(0..total);
                let mut pick = 0;
                for v in (0..u).filter(|v| !chosen.contains(v)) {
                    if r < degree[v] {
                        pick = v;
                        break;
                    }
                    r -= degree[v];
                }
                pick
            };
            chosen.insert(pick);
        }
        for v in chosen {
            edges.push((v, u));
            degree[v] += 1;
            degree[u] += 1;
        }
    }
    Graph::new(n, false, edges, vec![vec![1.0]; n])
}

/// Each unordered pair is an edge independently with probability `p`.
pub fn generate_er(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Result<Graph> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("edge probability must be in [0, 1], got {p}")));
    }
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.gen::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    Graph::new(n, false, edges, vec![vec![1.0]; n])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotifKind {
    /// A 4-cycle plus a roof node joined to two adjacent cycle nodes.
    House,
    Cycle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotifSpec {
    pub kind: MotifKind,
    /// Cycle length; ignored for the house.
    pub size: usize,
    /// Edges joining the motif to the base graph.
    pub attachments: usize,
}

impl MotifSpec {
    pub fn house(attachments: usize) -> Self {
        MotifSpec {
            kind: MotifKind::House,
            size: 5,
            attachments,
        }
    }

    pub fn cycle(size: usize, attachments: usize) -> Self {
        MotifSpec {
            kind: MotifKind::Cycle,
            size,
            attachments,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == MotifKind::Cycle && self.size < 3 {
            return Err(Error::Config(format!("cycle motif needs length >= 3, got {}", self.size)));
        }
        if self.attachments == 0 {
            return Err(Error::Config("motif needs at least one attachment edge".into()));
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        match self.kind {
            MotifKind::House => 5,
            MotifKind::Cycle => self.size,
        }
    }

    /// Internal edges over local ids `0..num_nodes()`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        match self.kind {
            MotifKind::House => vec![(0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (1, 4)],
            MotifKind::Cycle => (0..self.size).map(|i| (i, (i + 1) % self.size)).collect(),
        }
    }
}

/// Appends the motif with fresh ids and joins it to uniformly chosen base nodes.
/// New rows get zero node features; downstream features and label carry over.
pub fn plant_motif(graph: &Graph, spec: &MotifSpec, rng: &mut ChaCha8Rng) -> Result<(Graph, GroundTruth)> {
    spec.validate()?;
    if graph.is_directed() {
        return Err(Error::InvalidGraph("motifs are planted into undirected graphs only".into()));
    }
    let base = graph.num_nodes();
    if base == 0 {
        return Err(Error::InvalidGraph("cannot attach a motif to an empty graph".into()));
    }
    let k = spec.num_nodes();
    if spec.attachments > base * k {
        return Err(Error::Config(format!(
            "{} attachments exceed the {} possible motif-to-base edges",
            spec.attachments,
            base * k
        )));
    }
    let mut edges = graph.edges().to_vec();
    edges.extend(spec.edges().into_iter().map(|(a, b)| (base + a, base + b)));
    let mut joined = BTreeSet::new();
    while joined.len() < spec.attachments {
        let m = base + rng.gen_range(0..k);
        let b = rng.gen_range(0..base);
        joined.insert((b, m));
    }
    edges.extend(joined);

    let mut features = graph.node_features().to_vec();
    features.extend(std::iter::repeat_n(vec![0.0; graph.num_node_features()], k));
    let mut out = Graph::new(base + k, false, edges, features)?;
    if graph.num_downstream() > 0 {
        out = out.with_downstream_features(graph.downstream_features().to_vec());
    }
    if let Some(l) = graph.label() {
        out = out.with_label(l);
    }
    let truth = GroundTruth {
        motif_nodes: (base..base + k).collect(),
        ..Default::default()
    };
    Ok((out, truth))
}

/// Coefficients of the planted model: class-1 logit = a * embedding + b * x[designated] + bias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedCoefficients {
    pub a: f64,
    pub b: f64,
    pub bias: f64,
}

pub const PROBE_ROUNDS: usize = 50;
pub const PROBE_TOLERANCE: f64 = 1e-9;

/// Builds a pipeline that reads only the motif-indicator column (the single entry
/// of `truth.node_features`) and the designated downstream features, then checks
/// by random probing that every other input is ignored.
pub fn planted_pipeline(graph: &Graph, truth: &GroundTruth, rng: &mut ChaCha8Rng) -> Result<PipelineModel> {
    truth.validate(graph)?;
    let indicator = match truth.node_features.iter().collect::<Vec<_>>().as_slice() {
        [&c] => c,
        _ => {
            return Err(Error::Config(
                "planted pipeline needs exactly one indicator node-feature column".into(),
            ))
        }
    };
    if truth.downstream_features.is_empty() {
        return Err(Error::Config("planted pipeline needs a designated downstream feature".into()));
    }
    let n = graph.num_node_features();
    let d = graph.num_downstream();
    let mut w = vec![0.0; n];
    w[indicator] = 1.0;
    let upstream = MessagePassingModel {
        kind: UpstreamKind::Gin,
        layers: vec![MessagePassingLayer {
            eps: 0.0,
            weights: vec![w],
            neighbor_weights: None,
            bias: vec![0.0],
            activation: Some(Activation::Identity),
        }],
        readout: Readout::Sum,
    };
    let a = rng.gen_range(0.08..0.12);
    let b = rng.gen_range(0.9..1.1);
    let mut row = vec![0.0; d + 1];
    for &j in &truth.downstream_features {
        row[j] = b;
    }
    row[d] = a;
    let mut pipeline = PipelineModel {
        upstream,
        downstream: DownstreamModel::LinearSoftmax {
            weights: vec![vec![0.0; d + 1], row],
            bias: vec![0.0, 0.0],
        },
        baseline: vec![0.0; d],
        task: Task::GraphClassification,
        explained_class: Some(1),
    };
    // centre the class-1 logit between "nothing" and "everything"
    let full_logit = {
        let s = Scorer::new(&pipeline, graph, EvalOptions::default())?;
        let full = ExplanationTriple::full(graph);
        let emb = s.embedding_for(&full)[0];
        let tab: f64 = truth.downstream_features.iter().map(|&j| graph.downstream_features()[j]).sum();
        a * emb + b * tab
    };
    if let DownstreamModel::LinearSoftmax { bias, .. } = &mut pipeline.downstream {
        bias[1] = -full_logit / 2.0;
    }
    probe_dummies(&pipeline, graph, truth, rng)?;
    Ok(pipeline)
}

/// Randomly perturbs every input outside the ground truth and fails if any score moves.
pub fn probe_dummies(
    pipeline: &PipelineModel,
    graph: &Graph,
    truth: &GroundTruth,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let reference = Scorer::new(pipeline, graph, EvalOptions::default())?;
    let n = graph.num_node_features();
    let d = graph.num_downstream();
    for round in 0..PROBE_ROUNDS {
        let features: Vec<Vec<f64>> = graph
            .node_features()
            .iter()
            .map(|row| {
                (0..n)
                    .map(|c| if truth.node_features.contains(&c) { row[c] } else { rng.gen_range(-3.0..3.0) })
                    .collect()
            })
            .collect();
        let downstream: Vec<f64> = (0..d)
            .map(|j| {
                if truth.downstream_features.contains(&j) {
                    graph.downstream_features()[j]
                } else {
                    rng.gen_range(-3.0..3.0)
                }
            })
            .collect();
        let perturbed = graph.with_node_features(features)?.with_downstream_features(downstream);
        let scorer = Scorer::new(pipeline, &perturbed, EvalOptions::default())?;
        let triple = random_triple(graph, rng);
        for t in [ExplanationTriple::full(graph), triple] {
            let (p, q) = (reference.score(&t)?, scorer.score(&t)?);
            if (p - q).abs() >= PROBE_TOLERANCE {
                return Err(Error::InvalidModel(format!(
                    "dummy probe {round} moved the score by {:e}",
                    (p - q).abs()
                )));
            }
        }
    }
    Ok(())
}

fn random_subset(n: usize, rng: &mut ChaCha8Rng) -> BTreeSet<usize> {
    (0..n).filter(|_| rng.gen_bool(0.5)).collect()
}

/// A triple with each index kept with probability 1/2 (not necessarily connected).
pub fn random_triple(graph: &Graph, rng: &mut ChaCha8Rng) -> ExplanationTriple {
    ExplanationTriple {
        retained_downstream: random_subset(graph.num_downstream(), rng),
        subgraph_nodes: random_subset(graph.num_nodes(), rng),
        retained_node_features: random_subset(graph.num_node_features(), rng),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedConfig {
    pub base_nodes: usize,
    pub attach: usize,
    pub motif: MotifSpec,
    pub node_features: usize,
    pub downstream_features: usize,
    /// Index of the downstream feature the planted model reads.
    pub designated: usize,
    /// Observed value of the designated feature (its baseline is 0).
    pub designated_value: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            base_nodes: 20,
            attach: 2,
            motif: MotifSpec::house(1),
            node_features: 4,
            downstream_features: 4,
            designated: 0,
            designated_value: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedInstance {
    pub graph: Graph,
    pub truth: GroundTruth,
    pub pipeline: PipelineModel,
    pub seed: u64,
}

/// BA base graph, planted motif, motif indicator in column 0, and a planted pipeline.
pub fn planted_instance(config: &PlantedConfig, seed: u64) -> Result<PlantedInstance> {
    if config.node_features == 0 || config.designated >= config.downstream_features {
        return Err(Error::Config(
            "planted instance needs >= 1 node feature and a designated index below the downstream width".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = generate_ba(config.base_nodes, config.attach, &mut rng)?;
    let (graph, mut truth) = plant_motif(&base, &config.motif, &mut rng)?;
    let features: Vec<Vec<f64>> = (0..graph.num_nodes())
        .map(|v| {
            let mut row = vec![if truth.motif_nodes.contains(&v) { 1.0 } else { 0.0 }];
            row.extend((1..config.node_features).map(|_| rng.gen_range(-1.0..1.0)));
            row
        })
        .collect();
    let downstream: Vec<f64> = (0..config.downstream_features)
        .map(|j| if j == config.designated { config.designated_value } else { rng.gen_range(-1.0..1.0) })
        .collect();
    let graph = graph.with_node_features(features)?.with_downstream_features(downstream);
    truth.node_features = BTreeSet::from([0]);
    truth.downstream_features = BTreeSet::from([config.designated]);
    let pipeline = planted_pipeline(&graph, &truth, &mut rng)?;
    Ok(PlantedInstance {
        graph,
        truth,
        pipeline,
        seed,
    })
}

/// A GIN encoder with random weights (ReLU between layers, mean readout) and a
/// random linear-softmax head over `[downstream, embedding]`.
pub fn random_pipeline(
    node_features: usize,
    downstream: usize,
    hidden: usize,
    layers: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PipelineModel> {
    if layers == 0 || hidden == 0 || node_features == 0 {
        return Err(Error::Config("random pipeline needs layers, hidden and input widths >= 1".into()));
    }
    let mut mp = Vec::with_capacity(layers);
    let mut width = node_features;
    for l in 0..layers {
        let last = l + 1 == layers;
        mp.push(MessagePassingLayer {
            eps: rng.gen_range(0.0..0.5),
            weights: (0..hidden).map(|_| (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            neighbor_weights: None,
            bias: (0..hidden).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            activation: Some(if last { Activation::Identity } else { Activation::Relu }),
        });
        width = hidden;
    }
    let classes = 2;
    Ok(PipelineModel {
        upstream: MessagePassingModel {
            kind: UpstreamKind::Gin,
            layers: mp,
            readout: Readout::Mean,
        },
        downstream: DownstreamModel::LinearSoftmax {
            weights: (0..classes)
                .map(|_| (0..downstream + hidden).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            bias: (0..classes).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        },
        baseline: vec![0.0; downstream],
        task: Task::GraphClassification,
        explained_class: None,
    })
}

/// Replaces node and downstream features with uniform draws from [-1, 1).
pub fn with_random_features(graph: &Graph, node_features: usize, downstream: usize, rng: &mut ChaCha8Rng) -> Result<Graph> {
    let rows = (0..graph.num_nodes())
        .map(|_| (0..node_features).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let x = (0..downstream).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(graph.with_node_features(rows)?.with_downstream_features(x))
}

/// A connected random graph: a random spanning tree plus ER extras with probability `p`.
pub fn connected_random_graph(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Result<Graph> {
    let er = generate_er(n, p, rng)?;
    let mut order: Vec<NodeId> = (0..n).collect();
    order.shuffle(rng);
    let mut edges = er.edges().to_vec();
    for i in 1..n {
        let parent = order[rng.gen_range(0..i)];
        edges.push((parent.min(order[i]), parent.max(order[i])));
    }
    Graph::new(n, false, edges, vec![vec![1.0]; n])
}

pub fn write_truth(path: impl AsRef<Path>, truth: &GroundTruth) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(truth).expect("truth serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_truth(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display(), &e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn ba_edge_counts() {
        let g = generate_ba(5, 1, &mut rng(0)).unwrap();
        assert_eq!(g.edges().len(), 4);
        assert!(g.is_connected_within(&(0..5).collect()));
        for (n, m) in [(20, 2), (30, 3), (10, 4)] {
            let g = generate_ba(n, m, &mut rng(n as u64)).unwrap();
            assert_eq!(g.edges().len(), m * (n - m) + m * (m - 1) / 2);
            let degree_sum: usize = (0..n).map(|v| g.degree(v)).sum();
            assert_eq!(degree_sum, 2 * g.edges().len());
            assert!(g.is_connected_within(&(0..n).collect()));
        }
        assert_eq!(generate_ba(20, 2, &mut rng(3)).unwrap(), generate_ba(20, 2, &mut rng(3)).unwrap());
        assert!(generate_ba(2, 2, &mut rng(0)).is_err());
        assert!(generate_ba(5, 0, &mut rng(0)).is_err());
    }

    #[test]
    fn er_extremes() {
        assert!(generate_er(6, 0.0, &mut rng(0)).unwrap().edges().is_empty());
        assert_eq!(generate_er(6, 1.0, &mut rng(0)).unwrap().edges().len(), 15);
        assert!(generate_er(6, 1.5, &mut rng(0)).is_err());
    }

    #[test]
    fn er_edge_count_statistics() {
        let (n, p) = (30usize, 0.2);
        let pairs = (n * (n - 1) / 2) as f64;
        let sigma = (pairs * p * (1.0 - p)).sqrt();
        for seed in 0..100 {
            let m = generate_er(n, p, &mut rng(seed)).unwrap().edges().len() as f64;
            assert!((m - p * pairs).abs() <= 4.0 * sigma, "seed {seed}: {m} edges");
        }
    }

    #[test]
    fn motifs() {
        let base = generate_ba(10, 2, &mut rng(1)).unwrap();
        let (g, truth) = plant_motif(&base, &MotifSpec::house(2), &mut rng(2)).unwrap();
        assert_eq!(g.num_nodes(), 15);
        assert_eq!(g.edges().len(), base.edges().len() + 6 + 2);
        assert_eq!(truth.motif_nodes, (10..15).collect());
        assert!(g.is_connected_within(&(0..15).collect()));
        // base edges untouched
        for e in base.edges() {
            assert!(g.edges().contains(e));
        }
        let (c, _) = plant_motif(&base, &MotifSpec::cycle(6, 1), &mut rng(2)).unwrap();
        assert_eq!(c.num_nodes(), 16);
        assert_eq!(c.edges().len(), base.edges().len() + 7);
        assert!(MotifSpec::cycle(2, 1).validate().is_err());
        assert!(MotifSpec::house(0).validate().is_err());
    }

    #[test]
    fn planted_pipeline_properties() {
        let inst = planted_instance(&PlantedConfig::default(), 7).unwrap();
        let s = Scorer::new(&inst.pipeline, &inst.graph, EvalOptions::default()).unwrap();
        let full = ExplanationTriple::full(&inst.graph);

        // zeroing the indicator column gives the no-motif score
        let mut no_indicator = full.clone();
        no_indicator.retained_node_features.remove(&0);
        let mut no_nodes = full.clone();
        no_nodes.subgraph_nodes.clear();
        assert_eq!(s.score(&no_indicator).unwrap(), s.score(&no_nodes).unwrap());

        // designated feature sweep is monotone
        let mut last = f64::NEG_INFINITY;
        for step in 0..10 {
            let mut x = inst.graph.downstream_features().to_vec();
            x[0] = -2.0 + 0.5 * step as f64;
            let p = s.score_with_downstream(&full, &x).unwrap();
            assert!(p > last);
            last = p;
        }
    }

    #[test]
    fn probe_rejects_a_leaky_model() {
        let mut inst = planted_instance(&PlantedConfig::default(), 3).unwrap();
        if let DownstreamModel::LinearSoftmax { weights, .. } = &mut inst.pipeline.downstream {
            weights[1][2] = 0.3; // reads a non-designated feature
        }
        assert!(probe_dummies(&inst.pipeline, &inst.graph, &inst.truth, &mut rng(0)).is_err());
    }

    #[test]
    fn truth_sidecar_round_trip() {
        let inst = planted_instance(&PlantedConfig::default(), 1).unwrap();
        let dir = std::env::temp_dir().join(format!("gemx-truth-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("truth.json");
        write_truth(&path, &inst.truth).unwrap();
        assert_eq!(read_truth(&path).unwrap(), inst.truth);
        std::fs::remove_dir_all(&dir).ok();
    }
}
