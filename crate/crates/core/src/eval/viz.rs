//! Plot-ready export of node scores, node weights and final-layer attention.

use serde_json::{json, Value};
use std::path::Path;

use crate::detection::box_center;
use crate::error::{Error, Result};
use crate::graph::VideoGraph;
use crate::model::GraphOutput;

use super::report::write_json;

/// `{"video_id", "label", "graph_logit", "probability", "nodes": [...], "edges": [...]}`.
/// Each node carries `id, t, cx, cy, conf, score, beta`; each edge `src, dst, alpha`,
/// with `alpha` the head-mean of the final layer.
pub fn visualization_json(graph: &VideoGraph, output: &GraphOutput) -> Result<Value> {
    if output.node_scores.len() != graph.num_nodes() || output.node_weights.len() != graph.num_nodes() {
        return Err(Error::Shape(format!(
            "output covers {} nodes, graph has {}",
            output.node_scores.len(),
            graph.num_nodes()
        )));
    }
    let alpha = output.final_attention();
    if alpha.len() != graph.num_edges() && graph.num_edges() > 0 {
        return Err(Error::Shape(format!(
            "output carries attention for {} edges, graph has {}",
            alpha.len(),
            graph.num_edges()
        )));
    }
    let nodes: Vec<Value> = graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let (cx, cy) = box_center(&n.bbox);
            json!({
                "id": n.node_id,
                "t": n.frame_index,
                "cx": cx,
                "cy": cy,
                "conf": n.bbox.confidence(),
                "score": output.node_scores[i],
                "beta": output.node_weights[i],
            })
        })
        .collect();
    let edges: Vec<Value> = graph
        .edges
        .iter()
        .zip(&alpha)
        .map(|(e, a)| json!({"src": e.src, "dst": e.dst, "alpha": a}))
        .collect();
    Ok(json!({
        "video_id": graph.video_id,
        "label": graph.label,
        "graph_logit": output.graph_logit,
        "probability": output.probability,
        "nodes": nodes,
        "edges": edges,
    }))
}

pub fn export_visualization(graph: &VideoGraph, output: &GraphOutput, path: impl AsRef<Path>) -> Result<()> {
    write_json(&visualization_json(graph, output)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, init_params, ModelConfig};
    use crate::rng::rng_for;
    use crate::train::gradcheck::random_graph;

    #[test]
    fn export_is_complete_and_consistent() {
        let cfg = ModelConfig::default();
        let params = init_params(&cfg, 0).unwrap();
        let g = random_graph(&mut rng_for(5, 5), 8, 0.5, cfg.feature_mask);
        let out = forward(&g, &params, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("viz.json");
        export_visualization(&g, &out, &path).unwrap();
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let nodes = v["nodes"].as_array().unwrap();
        let edges = v["edges"].as_array().unwrap();
        assert_eq!(nodes.len(), g.num_nodes());
        assert_eq!(edges.len(), g.num_edges());
        let beta: f64 = nodes.iter().map(|n| n["beta"].as_f64().unwrap()).sum();
        assert!((beta - 1.0).abs() < 1e-9);
        for e in edges {
            assert!((0.0..=1.0).contains(&e["alpha"].as_f64().unwrap()));
        }
        for key in ["t", "cx", "cy", "conf", "score", "beta"] {
            assert!(nodes[0].get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn empty_graph_exports_empty_arrays() {
        let cfg = ModelConfig::default();
        let params = init_params(&cfg, 0).unwrap();
        let g = VideoGraph {
            video_id: "e".into(),
            label: 0,
            nodes: vec![],
            edges: vec![],
        };
        let out = forward(&g, &params, &cfg).unwrap();
        let v = visualization_json(&g, &out).unwrap();
        assert_eq!(v["nodes"], json!([]));
        assert_eq!(v["edges"], json!([]));
        assert_eq!(v["graph_logit"], json!(-1.0));
    }
}
