//! Graphviz export of an explanation.
//!
//! Explanation nodes are drawn larger with a thick outline and the caller's
//! highlight colour; retained features are listed in a separate note node.

use std::fmt::Write as _;

use crate::graph::{ExplanationTriple, Graph};

#[derive(Debug, Clone, PartialEq)]
pub struct DotOptions {
    pub name: String,
    pub highlight: String,
    pub base: String,
    /// Optional display names for node-feature columns and downstream features.
    pub node_feature_names: Option<Vec<String>>,
    pub downstream_names: Option<Vec<String>>,
}

impl Default for DotOptions {
    fn default() -> Self {
        DotOptions {
            name: "explanation".into(),
            highlight: "#d62728".into(),
            base: "#dddddd".into(),
            node_feature_names: None,
            downstream_names: None,
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn names(indices: &std::collections::BTreeSet<usize>, table: Option<&Vec<String>>) -> String {
    if indices.is_empty() {
        return "(none)".into();
    }
    indices
        .iter()
        .map(|&i| match table.and_then(|t| t.get(i)) {
            Some(n) => escape(n),
            None => i.to_string(),
        })
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn to_dot(graph: &Graph, triple: &ExplanationTriple, options: &DotOptions) -> String {
    let (kw, arrow) = if graph.is_directed() { ("digraph", "->") } else { ("graph", "--") };
    let mut out = String::new();
    let _ = writeln!(out, "{kw} \"{}\" {{", escape(&options.name));
    let _ = writeln!(
        out,
        "  node [shape=circle, style=filled, fixedsize=true, width=0.4, fillcolor=\"{}\"];",
        escape(&options.base)
    );
    for v in 0..graph.num_nodes() {
        if triple.subgraph_nodes.contains(&v) {
            let _ = writeln!(
                out,
                "  {v} [width=0.75, penwidth=3, fillcolor=\"{}\"];",
                escape(&options.highlight)
            );
        } else {
            let _ = writeln!(out, "  {v};");
        }
    }
    for &(u, v) in graph.edges() {
        let inside = triple.subgraph_nodes.contains(&u) && triple.subgraph_nodes.contains(&v);
        if inside {
            let _ = writeln!(out, "  {u} {arrow} {v} [penwidth=3];");
        } else {
            let _ = writeln!(out, "  {u} {arrow} {v};");
        }
    }
    let _ = writeln!(
        out,
        "  features [shape=box, style=\"filled,bold\", fixedsize=false, penwidth=3, fillcolor=white, label=\"node features: {}\\ldownstream features: {}\\l\"];",
        names(&triple.retained_node_features, options.node_feature_names.as_ref()),
        names(&triple.retained_downstream, options.downstream_names.as_ref())
    );
    out.push_str("}\n");
    out
}
