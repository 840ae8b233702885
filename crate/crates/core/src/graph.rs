//! Graph representation, zero-padding masks, and explanation-triple bookkeeping.
//!
//! An explanation is a triple of retained index sets: downstream (tabular)
//! features, a connected set of subgraph nodes, and node-feature columns.
//! Everything outside the retained sets is neutralized at evaluation time:
//! node features by zero-padding, downstream features by the baseline vector.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;

/// One of the three explanation components, and equally one of the three
/// pruning arms of the global search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Downstream,
    Nodes,
    NodeFeatures,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 3] = [
        ComponentKind::Downstream,
        ComponentKind::Nodes,
        ComponentKind::NodeFeatures,
    ];

    /// Arm name as it appears in the progress log.
    pub fn label(self) -> &'static str {
        match self {
            ComponentKind::Downstream => "downstream",
            ComponentKind::Nodes => "nodes",
            ComponentKind::NodeFeatures => "graph_feat",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        ComponentKind::ALL.into_iter().find(|k| k.label() == label)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A value per explanation component, in (downstream, nodes, node_features) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PerComponent<T> {
    pub downstream: T,
    pub nodes: T,
    pub node_features: T,
}

impl<T> PerComponent<T> {
    pub fn new(downstream: T, nodes: T, node_features: T) -> Self {
        PerComponent {
            downstream,
            nodes,
            node_features,
        }
    }

    pub fn get(&self, kind: ComponentKind) -> &T {
        match kind {
            ComponentKind::Downstream => &self.downstream,
            ComponentKind::Nodes => &self.nodes,
            ComponentKind::NodeFeatures => &self.node_features,
        }
    }

    pub fn get_mut(&mut self, kind: ComponentKind) -> &mut T {
        match kind {
            ComponentKind::Downstream => &mut self.downstream,
            ComponentKind::Nodes => &mut self.nodes,
            ComponentKind::NodeFeatures => &mut self.node_features,
        }
    }
}

/// On-disk shape of a graph. `Graph` converts to and from it, validating on the way in.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    num_nodes: usize,
    #[serde(default)]
    directed: bool,
    #[serde(default)]
    edges: Vec<[usize; 2]>,
    node_features: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edge_features: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    downstream_features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
}

/// An attributed graph with optional downstream (tabular) features.
///
/// Immutable once built; masking and pruning produce new values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphRecord", into = "GraphRecord")]
pub struct Graph {
    num_nodes: usize,
    directed: bool,
    edges: Vec<(NodeId, NodeId)>,
    node_features: Vec<Vec<f64>>,
    feature_width: usize,
    edge_features: Option<Vec<Vec<f64>>>,
    downstream_features: Option<Vec<f64>>,
    label: Option<usize>,
    // Sources of incoming messages per node.
    message_sources: Vec<Vec<NodeId>>,
    // Sorted undirected neighbourhoods, used for connectivity and degrees.
    adjacency: Vec<Vec<NodeId>>,
}

impl TryFrom<GraphRecord> for Graph {
    type Error = Error;

    fn try_from(rec: GraphRecord) -> Result<Self> {
        let edges = rec.edges.iter().map(|e| (e[0], e[1])).collect();
        let mut g = Graph::new(rec.num_nodes, rec.directed, edges, rec.node_features)?;
        if let Some(ef) = rec.edge_features {
            g = g.with_edge_features_raw(ef, &rec.edges)?;
        }
        if let Some(x) = rec.downstream_features {
            g = g.with_downstream_features(x);
        }
        g.label = rec.label;
        Ok(g)
    }
}

impl From<Graph> for GraphRecord {
    fn from(g: Graph) -> Self {
        GraphRecord {
            num_nodes: g.num_nodes,
            directed: g.directed,
            edges: g.edges.iter().map(|&(u, v)| [u, v]).collect(),
            node_features: g.node_features,
            edge_features: g.edge_features,
            downstream_features: g.downstream_features,
            label: g.label,
        }
    }
}

impl Graph {
    /// Builds a graph, rejecting out-of-range endpoints and (for undirected
    /// graphs) self-loops. Duplicate edges are collapsed, keeping the first.
    pub fn new(
        num_nodes: usize,
        directed: bool,
        edges: Vec<(NodeId, NodeId)>,
        node_features: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if node_features.len() != num_nodes {
            return Err(Error::InvalidGraph(format!(
                "node_features has {} rows, expected num_nodes = {}",
                node_features.len(),
                num_nodes
            )));
        }
        let feature_width = node_features.first().map_or(0, Vec::len);
        if let Some((i, row)) = node_features
            .iter()
            .enumerate()
            .find(|(_, r)| r.len() != feature_width)
        {
            return Err(Error::InvalidGraph(format!(
                "node_features row {i} has {} entries, expected {feature_width}",
                row.len()
            )));
        }

        let mut seen = BTreeSet::new();
        let mut kept = Vec::with_capacity(edges.len());
        for (idx, &(u, v)) in edges.iter().enumerate() {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::InvalidGraph(format!(
                    "edge {idx} = [{u}, {v}] has an endpoint outside 0..{num_nodes}"
                )));
            }
            if u == v && !directed {
                return Err(Error::InvalidGraph(format!(
                    "edge {idx} is a self-loop on node {u}"
                )));
            }
            let key = if directed { (u, v) } else { (u.min(v), u.max(v)) };
            if seen.insert(key) {
                kept.push((u, v));
            }
        }

        let mut g = Graph {
            num_nodes,
            directed,
            edges: kept,
            node_features,
            feature_width,
            edge_features: None,
            downstream_features: None,
            label: None,
            message_sources: Vec::new(),
            adjacency: Vec::new(),
        };
        g.rebuild_adjacency();
        Ok(g)
    }

    fn rebuild_adjacency(&mut self) {
        let mut sources = vec![Vec::new(); self.num_nodes];
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            sources[v].push(u);
            if !self.directed {
                sources[u].push(v);
            }
            if u != v {
                adj[u].push(v);
                adj[v].push(u);
            }
        }
        for list in sources.iter_mut().chain(adj.iter_mut()) {
            list.sort_unstable();
            list.dedup();
        }
        self.message_sources = sources;
        self.adjacency = adj;
    }

    pub fn with_downstream_features(mut self, x: Vec<f64>) -> Self {
        self.downstream_features = Some(x);
        self
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    /// Attaches edge features, one row per edge in the graph's (deduplicated) edge list.
    pub fn with_edge_features(mut self, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != self.edges.len() {
            return Err(Error::InvalidGraph(format!(
                "edge_features has {} rows, expected {} (one per edge)",
                rows.len(),
                self.edges.len()
            )));
        }
        self.edge_features = Some(rows);
        Ok(self)
    }

    // Edge features given against the raw (possibly duplicated) edge list.
    fn with_edge_features_raw(self, rows: Vec<Vec<f64>>, raw: &[[usize; 2]]) -> Result<Self> {
        if rows.len() != raw.len() {
            return Err(Error::InvalidGraph(format!(
                "edge_features has {} rows, expected {} (one per edge)",
                rows.len(),
                raw.len()
            )));
        }
        let mut seen = BTreeSet::new();
        let kept = raw
            .iter()
            .zip(rows)
            .filter(|(e, _)| {
                let key = if self.directed {
                    (e[0], e[1])
                } else {
                    (e[0].min(e[1]), e[0].max(e[1]))
                };
                seen.insert(key)
            })
            .map(|(_, r)| r)
            .collect();
        self.with_edge_features(kept)
    }

    /// Same topology and metadata, different node-feature matrix.
    pub fn with_node_features(&self, node_features: Vec<Vec<f64>>) -> Result<Self> {
        if node_features.len() != self.num_nodes {
            return Err(Error::Shape(format!(
                "{} feature rows for {} nodes",
                node_features.len(),
                self.num_nodes
            )));
        }
        let width = node_features.first().map_or(0, Vec::len);
        if node_features.iter().any(|r| r.len() != width) {
            return Err(Error::Shape("ragged node-feature matrix".into()));
        }
        let mut g = self.clone();
        g.node_features = node_features;
        g.feature_width = width;
        Ok(g)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn edges(&self) -> &[(NodeId, NodeId)] {
        &self.edges
    }

    pub fn node_features(&self) -> &[Vec<f64>] {
        &self.node_features
    }

    pub fn num_node_features(&self) -> usize {
        self.feature_width
    }

    pub fn edge_features(&self) -> Option<&[Vec<f64>]> {
        self.edge_features.as_deref()
    }

    /// Downstream feature vector; empty when the graph carries none.
    pub fn downstream_features(&self) -> &[f64] {
        self.downstream_features.as_deref().unwrap_or(&[])
    }

    pub fn num_downstream(&self) -> usize {
        self.downstream_features().len()
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    /// Nodes whose messages flow into `v`.
    pub fn message_sources(&self, v: NodeId) -> &[NodeId] {
        &self.message_sources[v]
    }

    /// Undirected neighbourhood of `v`, sorted.
    pub fn neighbors(&self, v: NodeId) -> &[NodeId] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.adjacency[v].len()
    }

    /// Degree of `v` counting only neighbours inside `within`.
    pub fn degree_within(&self, v: NodeId, within: &BTreeSet<NodeId>) -> usize {
        self.adjacency[v].iter().filter(|u| within.contains(u)).count()
    }

    /// Connected components of the subgraph induced by `nodes`, edges taken as undirected.
    /// Components are returned in order of their smallest node id.
    pub fn components_within(&self, nodes: &BTreeSet<NodeId>) -> Vec<BTreeSet<NodeId>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for &start in nodes {
            if seen.contains(&start) {
                continue;
            }
            let mut comp = BTreeSet::new();
            let mut queue = VecDeque::from([start]);
            seen.insert(start);
            while let Some(u) = queue.pop_front() {
                comp.insert(u);
                for &w in &self.adjacency[u] {
                    if nodes.contains(&w) && seen.insert(w) {
                        queue.push_back(w);
                    }
                }
            }
            out.push(comp);
        }
        out
    }

    pub fn is_connected_within(&self, nodes: &BTreeSet<NodeId>) -> bool {
        self.components_within(nodes).len() <= 1
    }

    /// Nodes within `hops` undirected hops of `v`, in ascending id order.
    pub fn k_hop_nodes(&self, v: NodeId, hops: usize) -> Vec<NodeId> {
        let mut dist = vec![usize::MAX; self.num_nodes];
        dist[v] = 0;
        let mut queue = VecDeque::from([v]);
        while let Some(u) = queue.pop_front() {
            if dist[u] == hops {
                continue;
            }
            for &w in &self.adjacency[u] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[u] + 1;
                    queue.push_back(w);
                }
            }
        }
        (0..self.num_nodes).filter(|&u| dist[u] != usize::MAX).collect()
    }

    /// Subgraph induced by `keep` (ascending old ids). Node `i` of the result is `keep[i]`.
    pub fn induced_subgraph(&self, keep: &[NodeId]) -> Result<Graph> {
        let mut new_id = vec![usize::MAX; self.num_nodes];
        for (i, &old) in keep.iter().enumerate() {
            if old >= self.num_nodes {
                return Err(Error::InvalidGraph(format!("node {old} out of range")));
            }
            new_id[old] = i;
        }
        let mut edges = Vec::new();
        let mut edge_rows = Vec::new();
        for (idx, &(u, v)) in self.edges.iter().enumerate() {
            if new_id[u] != usize::MAX && new_id[v] != usize::MAX {
                edges.push((new_id[u], new_id[v]));
                if let Some(ef) = &self.edge_features {
                    edge_rows.push(ef[idx].clone());
                }
            }
        }
        let features = keep.iter().map(|&o| self.node_features[o].clone()).collect();
        let mut g = Graph::new(keep.len(), self.directed, edges, features)?;
        if self.edge_features.is_some() {
            g = g.with_edge_features(edge_rows)?;
        }
        g.downstream_features = self.downstream_features.clone();
        g.label = self.label;
        Ok(g)
    }
}

/// Reads a graph file (JSON).
pub fn read_graph(path: impl AsRef<Path>) -> Result<Graph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_graph(&text, &path.display().to_string())
}

/// Parses graph JSON; `origin` labels error messages.
pub fn parse_graph(text: &str, origin: &str) -> Result<Graph> {
    serde_json::from_str(text).map_err(|e| Error::parse(origin, &e))
}

pub fn write_graph(path: impl AsRef<Path>, graph: &Graph) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(graph).expect("graph serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// The retained parts of an input: downstream features, connected subgraph, node-feature columns.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExplanationTriple {
    pub retained_downstream: BTreeSet<usize>,
    pub subgraph_nodes: BTreeSet<NodeId>,
    pub retained_node_features: BTreeSet<usize>,
}

impl ExplanationTriple {
    /// The whole input: every downstream feature, node and node-feature column.
    pub fn full(graph: &Graph) -> Self {
        ExplanationTriple {
            retained_downstream: (0..graph.num_downstream()).collect(),
            subgraph_nodes: (0..graph.num_nodes()).collect(),
            retained_node_features: (0..graph.num_node_features()).collect(),
        }
    }

    pub fn empty() -> Self {
        ExplanationTriple {
            retained_downstream: BTreeSet::new(),
            subgraph_nodes: BTreeSet::new(),
            retained_node_features: BTreeSet::new(),
        }
    }

    pub fn component(&self, kind: ComponentKind) -> &BTreeSet<usize> {
        match kind {
            ComponentKind::Downstream => &self.retained_downstream,
            ComponentKind::Nodes => &self.subgraph_nodes,
            ComponentKind::NodeFeatures => &self.retained_node_features,
        }
    }

    pub fn component_mut(&mut self, kind: ComponentKind) -> &mut BTreeSet<usize> {
        match kind {
            ComponentKind::Downstream => &mut self.retained_downstream,
            ComponentKind::Nodes => &mut self.subgraph_nodes,
            ComponentKind::NodeFeatures => &mut self.retained_node_features,
        }
    }

    pub fn size(&self, kind: ComponentKind) -> usize {
        self.component(kind).len()
    }

    pub fn sizes(&self) -> PerComponent<usize> {
        PerComponent::new(
            self.retained_downstream.len(),
            self.subgraph_nodes.len(),
            self.retained_node_features.len(),
        )
    }

    /// Index ranges only; connectivity is a search invariant checked separately.
    pub fn validate(&self, graph: &Graph) -> Result<()> {
        let bounds = PerComponent::new(
            graph.num_downstream(),
            graph.num_nodes(),
            graph.num_node_features(),
        );
        for kind in ComponentKind::ALL {
            let bound = *bounds.get(kind);
            if let Some(&bad) = self.component(kind).iter().find(|&&i| i >= bound) {
                return Err(Error::InvalidTriple(format!(
                    "{kind} index {bad} out of range 0..{bound}"
                )));
            }
        }
        Ok(())
    }

    pub fn is_connected(&self, graph: &Graph) -> bool {
        graph.is_connected_within(&self.subgraph_nodes)
    }

    /// The complement of every component, as used by occlusion fidelity.
    pub fn complement(&self, graph: &Graph) -> Self {
        let comp = |set: &BTreeSet<usize>, n: usize| (0..n).filter(|i| !set.contains(i)).collect();
        ExplanationTriple {
            retained_downstream: comp(&self.retained_downstream, graph.num_downstream()),
            subgraph_nodes: comp(&self.subgraph_nodes, graph.num_nodes()),
            retained_node_features: comp(&self.retained_node_features, graph.num_node_features()),
        }
    }

    pub fn key(&self, kind: ComponentKind) -> StateKey {
        state_key(self, kind)
    }

    /// Stable 64-bit digest of all three components.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for kind in ComponentKind::ALL {
            h.write(kind.index() as u64 + 0x100);
            for &i in self.component(kind) {
                h.write(i as u64);
            }
        }
        h.finish()
    }
}

/// Zero-padding: rows of nodes outside the subgraph become zero, and retained
/// nodes keep only the retained feature columns. Topology, edge features and
/// downstream features are left as they are.
pub fn apply_masks(graph: &Graph, triple: &ExplanationTriple) -> Result<Graph> {
    triple.validate(graph)?;
    let nodes = membership(&triple.subgraph_nodes, graph.num_nodes());
    let cols = membership(&triple.retained_node_features, graph.num_node_features());
    graph.with_node_features(masked_features(graph, &nodes, &cols))
}

pub(crate) fn membership(set: &BTreeSet<usize>, n: usize) -> Vec<bool> {
    let mut m = vec![false; n];
    for &i in set {
        m[i] = true;
    }
    m
}

pub(crate) fn masked_features(graph: &Graph, nodes: &[bool], cols: &[bool]) -> Vec<Vec<f64>> {
    graph
        .node_features()
        .iter()
        .zip(nodes)
        .map(|(row, &keep_node)| {
            row.iter()
                .zip(cols)
                .map(|(&x, &keep_col)| if keep_node && keep_col { x } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Which component survives when a prune disconnects the subgraph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Retention {
    /// Keep the largest component; ties go to the one holding the smallest node id.
    Largest,
    /// Keep the component containing this node, or the largest if it was removed.
    Anchor(NodeId),
}

/// Removes `node` from the subgraph and restores connectivity per `retention`.
pub fn prune_node(
    triple: &ExplanationTriple,
    graph: &Graph,
    node: NodeId,
    retention: Retention,
) -> Result<ExplanationTriple> {
    if !triple.subgraph_nodes.contains(&node) {
        return Err(Error::InvalidTriple(format!(
            "node {node} is not in the subgraph"
        )));
    }
    if triple.subgraph_nodes.len() == 1 {
        return Err(Error::InvalidTriple(
            "removing the last node would empty the subgraph".into(),
        ));
    }
    let mut remaining = triple.subgraph_nodes.clone();
    remaining.remove(&node);
    let components = graph.components_within(&remaining);
    let anchored = match retention {
        Retention::Anchor(v) => components.iter().position(|c| c.contains(&v)),
        Retention::Largest => None,
    };
    let chosen = match anchored {
        Some(i) => i,
        // Components come ordered by smallest id, so the first maximum wins ties.
        None => {
            let best = components.iter().map(BTreeSet::len).max().unwrap_or(0);
            components.iter().position(|c| c.len() == best).unwrap_or(0)
        }
    };
    let mut out = triple.clone();
    out.subgraph_nodes = components.into_iter().nth(chosen).unwrap_or_default();
    debug_assert!(out.is_connected(graph));
    Ok(out)
}

/// Canonical, component-scoped key of one index set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateKey {
    pub kind: ComponentKind,
    pub indices: Vec<usize>,
}

impl StateKey {
    pub fn new(kind: ComponentKind, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut indices: Vec<usize> = indices.into_iter().collect();
        indices.sort_unstable();
        indices.dedup();
        StateKey { kind, indices }
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        h.write(self.kind.index() as u64 + 0x100);
        for &i in &self.indices {
            h.write(i as u64);
        }
        h.finish()
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.indices.is_empty() {
            return write!(f, "{}:{{}}", self.kind.label());
        }
        write!(f, "{}:{{", self.kind.label())?;
        for (i, idx) in self.indices.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{idx}")?;
        }
        f.write_str("}")
    }
}

pub fn state_key(triple: &ExplanationTriple, kind: ComponentKind) -> StateKey {
    StateKey {
        kind,
        indices: triple.component(kind).iter().copied().collect(),
    }
}

// FNV-1a over u64 words; stable across platforms and toolchains, unlike std's hasher.
pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write(&mut self, word: u64) {
        for b in word.to_le_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

/// Mixes a run seed with a per-call salt into an independent stream seed.
pub(crate) fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut h = Fnv::new();
    h.write(seed);
    h.write(salt);
    // splitmix64 finalizer
    let mut z = h.finish();
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
