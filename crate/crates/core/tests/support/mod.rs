//! Shared test fixtures: an independent straight-line forward pass and the
//! fixed path graph.

#![allow(dead_code, clippy::needless_range_loop)]

use gada::detection::BoundingBox;
use gada::graph::{edge_features, Edge, FeatureMask, Node, VideoGraph};
use gada::model::{ModelConfig, Parameters};

/// Straight-line evaluation of the model equations from the named tensors,
/// without packing, batching or matrix kernels. Returns (scores, beta, logit).
pub fn reference_forward(graph: &VideoGraph, params: &Parameters, cfg: &ModelConfig) -> (Vec<f64>, Vec<f64>, f64) {
    let n = graph.nodes.len();
    if n == 0 {
        return (vec![], vec![], -1.0);
    }
    let t = |name: &str| params.get(name).unwrap();
    let at = |name: &str, i: usize, j: usize| {
        let x = t(name);
        x.data[i * x.shape[1] + j]
    };
    let dm = cfg.hidden_dim;
    let d = cfg.head_dim();
    let ef = |e: &Edge| -> Vec<f64> {
        if cfg.use_edge_features {
            e.features.to_vec()
        } else {
            vec![0.0; 3]
        }
    };

    let mut h: Vec<Vec<f64>> = graph
        .nodes
        .iter()
        .map(|node| {
            (0..dm)
                .map(|j| {
                    let mut s = t("embed.b").data[j];
                    for (i, x) in node.features.iter().enumerate() {
                        s += x * at("embed.W", i, j);
                    }
                    s
                })
                .collect()
        })
        .collect();

    let mut last_alpha = vec![vec![0.0; graph.edges.len()]; cfg.num_heads];
    for l in 1..=cfg.num_layers {
        let mut next = vec![vec![0.0; dm]; n];
        let mut concat = vec![vec![0.0; cfg.num_heads * d]; n];
        for head in 1..=cfg.num_heads {
            let p = format!("{l}.{head}");
            let proj = |w: &str, v: usize| -> Vec<f64> {
                (0..d)
                    .map(|k| (0..dm).map(|i| h[v][i] * at(&format!("{p}.{w}"), i, k)).sum())
                    .collect()
            };
            for v in 0..n {
                let incoming: Vec<usize> = (0..graph.edges.len()).filter(|&e| graph.edges[e].dst == v).collect();
                if incoming.is_empty() {
                    continue;
                }
                let q = proj("Wq", v);
                let mut logits = Vec::new();
                for &e in &incoming {
                    let u = graph.edges[e].src;
                    let k = proj("Wk", u);
                    let mut s: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt();
                    for (f, x) in ef(&graph.edges[e]).iter().enumerate() {
                        s += x * t(&format!("{p}.psi.w")).data[f];
                    }
                    s += t(&format!("{p}.psi.b")).data[0];
                    logits.push(s);
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|s| (s - max).exp()).sum();
                for (idx, &e) in incoming.iter().enumerate() {
                    let alpha = (logits[idx] - max).exp() / z;
                    if l == cfg.num_layers {
                        last_alpha[head - 1][e] = alpha;
                    }
                    let u = graph.edges[e].src;
                    let mut input = h[u].clone();
                    input.extend(ef(&graph.edges[e]));
                    let hidden: Vec<f64> = (0..cfg.phi_hidden)
                        .map(|j| {
                            let s: f64 = input.iter().enumerate().map(|(i, x)| x * at(&format!("{p}.phi.W1"), i, j)).sum();
                            (s + t(&format!("{p}.phi.b1")).data[j]).max(0.0)
                        })
                        .collect();
                    for k in 0..d {
                        let s: f64 = hidden.iter().enumerate().map(|(j, a)| a * at(&format!("{p}.phi.W2"), j, k)).sum();
                        concat[v][(head - 1) * d + k] += alpha * (s + t(&format!("{p}.phi.b2")).data[k]);
                    }
                }
            }
        }
        for v in 0..n {
            for j in 0..dm {
                let mut s = t(&format!("{l}.bout")).data[j];
                for i in 0..dm {
                    s += h[v][i] * at(&format!("{l}.Wself"), i, j);
                }
                for i in 0..cfg.num_heads * d {
                    s += concat[v][i] * at(&format!("{l}.Wout"), i, j);
                }
                next[v][j] = if l < cfg.num_layers { s.max(0.0) } else { s };
            }
        }
        h = next;
    }

    let scores: Vec<f64> = h
        .iter()
        .map(|hv| {
            let s: f64 = hv.iter().zip(&t("read.w").data).map(|(a, b)| a * b).sum();
            (s + t("read.b").data[0]).tanh()
        })
        .collect();
    let mut beta = vec![0.0; n];
    for (e, edge) in graph.edges.iter().enumerate() {
        for head in &last_alpha {
            beta[edge.src] += head[e] / cfg.num_heads as f64;
        }
    }
    let total: f64 = beta.iter().sum();
    if graph.edges.is_empty() {
        beta = vec![1.0 / n as f64; n];
    } else if cfg.normalize_beta {
        for b in &mut beta {
            *b /= total;
        }
    }
    let logit = beta.iter().zip(&scores).map(|(b, y)| b * y).sum();
    (scores, beta, logit)
}

/// Every weight tensor filled with `weight`, every bias zero. Bias tensors are
/// the ones whose last name segment starts with `b`.
pub fn constant_params(cfg: &ModelConfig, weight: f64) -> Parameters {
    let mut p = Parameters::zeros(cfg);
    for (name, t) in p.iter_mut() {
        let last = name.rsplit('.').next().unwrap_or_default();
        if !last.starts_with('b') {
            t.data.fill(weight);
        }
    }
    p
}

/// Three detections in consecutive frames joined as a path, both directions.
pub fn path_graph() -> VideoGraph {
    let boxes = [
        BoundingBox::new(0.10, 0.10, 0.20, 0.20, 0.90).unwrap(),
        BoundingBox::new(0.15, 0.12, 0.20, 0.18, 0.60).unwrap(),
        BoundingBox::new(0.22, 0.15, 0.15, 0.20, 0.30).unwrap(),
    ];
    let mask = FeatureMask::default();
    let nodes: Vec<Node> = boxes
        .iter()
        .enumerate()
        .map(|(i, b)| Node {
            node_id: i,
            frame_index: i as u64,
            bbox: *b,
            features: mask.extract(b),
            label: 1,
        })
        .collect();
    let mut edges = Vec::new();
    for (a, b) in [(0, 1), (1, 2)] {
        let f = edge_features(&nodes[a], &nodes[b]);
        edges.push(Edge { src: a, dst: b, features: f });
        edges.push(Edge { src: b, dst: a, features: f });
    }
    VideoGraph {
        video_id: "path".into(),
        label: 1,
        nodes,
        edges,
    }
}
