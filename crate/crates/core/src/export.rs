//! Interpretability export: serialize a learned graph for one
//! scene/question pair as JSON and as Graphviz DOT, where edge pen width
//! scales with the edge weight and node size with the node's total degree.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::LearnedGraph;
use crate::tensor::Tensor2;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExportEdge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExportNode {
    pub index: usize,
    /// Normalized box corners (x1, y1, x2, y2).
    pub box_corners: [f64; 4],
    pub degree: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphExport {
    pub image_id: u64,
    pub question: String,
    /// Predicted answer and its logit, when a prediction was made.
    pub answer: Option<String>,
    pub score: Option<f64>,
    pub nodes: Vec<ExportNode>,
    pub edges: Vec<ExportEdge>,
}

impl GraphExport {
    pub fn from_graph(
        graph: &LearnedGraph,
        boxes: &Tensor2,
        image_id: u64,
        question: &str,
        answer: Option<(String, f64)>,
    ) -> Result<Self> {
        let degrees = graph.node_degrees();
        let nodes = (0..graph.n())
            .map(|i| {
                let b = boxes.row(i);
                ExportNode {
                    index: i,
                    box_corners: [b[0], b[1], b[2], b[3]],
                    degree: degrees[i],
                }
            })
            .collect();
        let mut edges = Vec::new();
        for (i, (nbrs, alphas)) in graph.neighborhoods.iter().zip(&graph.alpha).enumerate() {
            for (&j, &w) in nbrs.iter().zip(alphas) {
                edges.push(ExportEdge {
                    from: i,
                    to: j,
                    weight: w,
                });
            }
        }
        let (answer, score) = match answer {
            Some((a, s)) => (Some(a), Some(s)),
            None => (None, None),
        };
        Ok(GraphExport {
            image_id,
            question: question.to_string(),
            answer,
            score,
            nodes,
            edges,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| crate::error::Error::State(e.to_string()))
    }

    /// Graphviz DOT rendering. Node diameter grows with degree, edge pen
    /// width with the edge weight; self loops are kept.
    pub fn to_dot(&self) -> String {
        let max_degree = self
            .nodes
            .iter()
            .map(|n| n.degree)
            .fold(f64::MIN, f64::max)
            .max(1e-12);
        let mut out = String::from("digraph scene {\n");
        out.push_str("  node [shape=circle, fixedsize=true];\n");
        for n in &self.nodes {
            let size = 0.3 + 0.7 * (n.degree / max_degree);
            out.push_str(&format!(
                "  n{} [width={:.3}, label=\"{}\", tooltip=\"box=({:.2},{:.2},{:.2},{:.2}) degree={:.3}\"];\n",
                n.index,
                size,
                n.index,
                n.box_corners[0],
                n.box_corners[1],
                n.box_corners[2],
                n.box_corners[3],
                n.degree
            ));
        }
        for e in &self.edges {
            out.push_str(&format!(
                "  n{} -> n{} [penwidth={:.3}, label=\"{:.2}\"];\n",
                e.from,
                e.to,
                0.2 + 4.0 * e.weight,
                e.weight
            ));
        }
        out.push_str(&format!("  label=\"{}\";\n", self.question.replace('"', "'")));
        out.push_str("}\n");
        out
    }
}
