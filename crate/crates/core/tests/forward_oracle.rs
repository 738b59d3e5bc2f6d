//! Engine output against the straight-line reference.

mod support;

use gada::detection::BoundingBox;
use gada::graph::Node;
use gada::model::{forward, init_params, ModelConfig};
use gada::rng::rng_for;
use gada::train::gradcheck::random_graph;
use support::{constant_params, path_graph, reference_forward};

#[test]
fn path_graph_matches_reference_with_constant_weights() {
    let cfg = ModelConfig::default();
    let params = constant_params(&cfg, 0.1);
    let g = path_graph();
    let out = forward(&g, &params, &cfg).unwrap();
    let (scores, beta, logit) = reference_forward(&g, &params, &cfg);
    assert!((out.graph_logit - logit).abs() <= 1e-12, "{} vs {}", out.graph_logit, logit);
    for (a, b) in out.node_scores.iter().zip(&scores) {
        assert!((a - b).abs() <= 1e-12);
    }
    for (a, b) in out.node_weights.iter().zip(&beta) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn random_graphs_match_reference() {
    let mut rng = rng_for(99, 0);
    for (i, &(n, p)) in [(1, 0.0), (4, 0.5), (7, 0.3), (10, 0.6)].iter().enumerate() {
        for &(normalize_beta, use_edge_features) in &[(true, true), (false, true), (true, false)] {
            let cfg = ModelConfig {
                normalize_beta,
                use_edge_features,
                ..ModelConfig::default()
            };
            let params = init_params(&cfg, i as u64).unwrap();
            let g = random_graph(&mut rng, n, p, cfg.feature_mask);
            let out = forward(&g, &params, &cfg).unwrap();
            let (_, _, logit) = reference_forward(&g, &params, &cfg);
            assert!((out.graph_logit - logit).abs() <= 1e-12, "{} vs {}", out.graph_logit, logit);
        }
    }
}

#[test]
fn attention_bias_constant_cancels() {
    let cfg = ModelConfig::default();
    let mut params = init_params(&cfg, 40).unwrap();
    let g = random_graph(&mut rng_for(40, 0), 9, 0.5, cfg.feature_mask);
    let before = forward(&g, &params, &cfg).unwrap();
    for l in 1..=cfg.num_layers {
        for h in 1..=cfg.num_heads {
            params.get_mut(&format!("{l}.{h}.psi.b")).unwrap().data[0] = 0.3 * (l * h) as f64 - 1.0;
        }
    }
    let after = forward(&g, &params, &cfg).unwrap();
    let (_, _, reference) = reference_forward(&g, &params, &cfg);
    assert!((after.graph_logit - reference).abs() <= 1e-12);
    assert!((after.graph_logit - before.graph_logit).abs() <= 1e-12);
}

#[test]
fn isolated_node_does_not_influence_others() {
    let cfg = ModelConfig::default();
    let params = init_params(&cfg, 9).unwrap();
    let mut g = path_graph();
    let lonely = BoundingBox::new(0.7, 0.7, 0.1, 0.1, 0.5).unwrap();
    g.nodes.push(Node {
        node_id: 3,
        frame_index: 1,
        bbox: lonely,
        features: cfg.feature_mask.extract(&lonely),
        label: -1,
    });
    let a = forward(&g, &params, &cfg).unwrap();
    g.nodes[3].features = vec![0.3, 0.9, 0.99];
    let b = forward(&g, &params, &cfg).unwrap();
    assert_eq!(&a.node_scores[..3], &b.node_scores[..3]);
    assert_ne!(a.node_scores[3], b.node_scores[3]);
    assert_eq!(a.node_weights[3], 0.0);
    assert_eq!(a.graph_logit, b.graph_logit);
}
