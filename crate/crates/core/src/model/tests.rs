use super::*;
use crate::graph::{Edge, Node};
use crate::rng::rng_for;
use crate::train::gradcheck::random_graph;
use crate::train::loss::sigmoid;

#[test]
fn init_is_deterministic_and_shaped() {
    let cfg = ModelConfig::default();
    let a = init_params(&cfg, 5).unwrap();
    assert_eq!(a, init_params(&cfg, 5).unwrap());
    assert_ne!(a, init_params(&cfg, 6).unwrap());
    a.check_shapes(&cfg).unwrap();
    assert_eq!(a.num_scalars(), parameter_count(&cfg));
    assert_eq!(parameter_count(&cfg), 82_161);
    assert_eq!(a.names().next(), Some("embed.W"));
    assert_eq!(a.names().last(), Some("read.b"));
    assert_eq!(a.get("1.1.phi.W1").unwrap().shape, vec![67, 32]);
    assert_eq!(a.get("3.Wout").unwrap().shape, vec![64, 64]);
    for (name, t) in a.iter() {
        if name.ends_with(".b") || name.contains(".b1") || name.contains(".b2") || name.ends_with("bout") {
            assert!(t.data.iter().all(|&v| v == 0.0), "{name} should start at zero");
        }
    }
    let w = a.get("1.Wself").unwrap();
    let bound = (6.0f64 / 128.0).sqrt();
    assert!(w.data.iter().all(|v| v.abs() <= bound));
}

#[test]
fn invalid_model_config_rejected() {
    let cfg = ModelConfig {
        num_heads: 3,
        ..ModelConfig::default()
    };
    assert!(matches!(init_params(&cfg, 0), Err(Error::Config(_))));
    let cfg = ModelConfig {
        node_in_dim: 4,
        ..ModelConfig::default()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn empty_graph_has_fixed_negative_logit() {
    let cfg = ModelConfig::default();
    let params = init_params(&cfg, 1).unwrap();
    let g = VideoGraph {
        video_id: "e".into(),
        label: 1,
        nodes: vec![],
        edges: vec![],
    };
    let out = forward(&g, &params, &cfg).unwrap();
    assert_eq!(out.graph_logit, -1.0);
    assert_eq!(out.probability, sigmoid(-1.0));
    assert!(out.node_scores.is_empty() && out.node_weights.is_empty());
}

#[test]
fn attention_and_node_weights_are_distributions() {
    let cfg = ModelConfig::default();
    let mut rng = rng_for(4, 0);
    for seed in 0..8 {
        let params = init_params(&cfg, seed).unwrap();
        let g = random_graph(&mut rng, 3 + seed as usize, 0.4, cfg.feature_mask);
        let out = forward(&g, &params, &cfg).unwrap();
        for layer in &out.attention {
            for head in layer {
                for v in 0..g.num_nodes() {
                    let incoming: Vec<f64> = g.edges.iter().zip(head).filter(|(e, _)| e.dst == v).map(|(_, a)| *a).collect();
                    if !incoming.is_empty() {
                        assert!((incoming.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                    }
                    assert!(incoming.iter().all(|a| (0.0..=1.0).contains(a)));
                }
            }
        }
        assert!((out.node_weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        assert!(out.node_weights.iter().all(|&b| b >= 0.0));
        assert!(out.node_scores.iter().all(|y| y.abs() < 1.0));
        assert!((-1.0..=1.0).contains(&out.graph_logit));
        assert_eq!(out.probability, sigmoid(out.graph_logit));
    }
}

#[test]
fn constant_scores_give_that_logit() {
    let cfg = ModelConfig::default();
    let mut params = init_params(&cfg, 2).unwrap();
    params.get_mut("read.w").unwrap().data.fill(0.0);
    params.get_mut("read.b").unwrap().data[0] = 0.37;
    let g = random_graph(&mut rng_for(8, 0), 9, 0.3, cfg.feature_mask);
    let out = forward(&g, &params, &cfg).unwrap();
    assert!((out.graph_logit - 0.37f64.tanh()).abs() < 1e-12);
}

#[test]
fn node_permutation_leaves_logit_unchanged() {
    let cfg = ModelConfig::default();
    let params = init_params(&cfg, 3).unwrap();
    let mut rng = rng_for(12, 0);
    let g = random_graph(&mut rng, 11, 0.35, cfg.feature_mask);
    let perm: Vec<usize> = (0..11).map(|i| (i * 7 + 3) % 11).collect();
    let mut nodes: Vec<Node> = vec![g.nodes[0].clone(); 11];
    for (old, &new) in perm.iter().enumerate() {
        nodes[new] = Node {
            node_id: new,
            ..g.nodes[old].clone()
        };
    }
    let mut edges: Vec<Edge> = g
        .edges
        .iter()
        .map(|e| Edge {
            src: perm[e.src],
            dst: perm[e.dst],
            features: e.features,
        })
        .collect();
    edges.reverse();
    let h = VideoGraph {
        nodes,
        edges,
        ..g.clone()
    };
    let a = forward(&g, &params, &cfg).unwrap();
    let b = forward(&h, &params, &cfg).unwrap();
    assert!((a.graph_logit - b.graph_logit).abs() <= 1e-9);
    for (old, &new) in perm.iter().enumerate() {
        assert!((a.node_scores[old] - b.node_scores[new]).abs() <= 1e-9);
        assert!((a.node_weights[old] - b.node_weights[new]).abs() <= 1e-9);
    }
}

#[test]
fn edgeless_graph_weights_are_uniform() {
    let cfg = ModelConfig::default();
    let params = init_params(&cfg, 1).unwrap();
    let g = random_graph(&mut rng_for(1, 1), 4, 0.0, cfg.feature_mask);
    let out = forward(&g, &params, &cfg).unwrap();
    assert!(out.node_weights.iter().all(|&b| b == 0.25));
    let mean = out.node_scores.iter().sum::<f64>() / 4.0;
    assert!((out.graph_logit - mean).abs() < 1e-15);
}

#[test]
fn forward_is_deterministic_and_batch_consistent() {
    let cfg = ModelConfig::default();
    let params = init_params(&cfg, 21).unwrap();
    let mut rng = rng_for(2, 2);
    let graphs: Vec<VideoGraph> = (0..5).map(|i| random_graph(&mut rng, 2 + 2 * i, 0.4, cfg.feature_mask)).collect();
    let model = Model::new(&params, &cfg).unwrap();
    let refs: Vec<&VideoGraph> = graphs.iter().collect();
    let batched = model.logits(&refs).unwrap();
    for (g, z) in graphs.iter().zip(&batched) {
        let single = model.forward(g).unwrap();
        assert!((single.graph_logit - z).abs() < 1e-12);
        assert_eq!(single, model.forward(g).unwrap());
    }
}

#[test]
fn feature_length_mismatch_is_a_shape_error() {
    let cfg = ModelConfig::default();
    let params = init_params(&cfg, 0).unwrap();
    let g = random_graph(&mut rng_for(0, 0), 3, 0.5, crate::graph::FeatureMask::ALL);
    assert!(matches!(forward(&g, &params, &cfg), Err(Error::Shape(_))));
}

#[test]
fn packing_round_trips() {
    let cfg = ModelConfig::default();
    let params = init_params(&cfg, 77).unwrap();
    let packed = Packed::from_params(&params, &cfg).unwrap();
    assert_eq!(packed.to_params(&cfg), params);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = ModelConfig::default();
    let params = init_params(&cfg, 31).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&params, &cfg, &path).unwrap();
    let (loaded, loaded_cfg) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded_cfg, cfg);
    assert_eq!(loaded, params);
    let g = random_graph(&mut rng_for(31, 0), 6, 0.5, cfg.feature_mask);
    let a = forward(&g, &params, &cfg).unwrap().graph_logit;
    let b = forward(&g, &loaded, &loaded_cfg).unwrap().graph_logit;
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let cfg = ModelConfig::default();
    let params = init_params(&cfg, 31).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&params, &cfg, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Parse { .. })));
}

#[test]
fn checkpoint_with_foreign_config_names_the_tensor() {
    let cfg = ModelConfig::default();
    let params = init_params(&cfg, 31).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    save_checkpoint(&params, &cfg, &path).unwrap();
    let mut value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    value["config"]["phi_hidden"] = serde_json::json!(16);
    std::fs::write(&path, value.to_string()).unwrap();
    match load_checkpoint(&path) {
        Err(Error::Shape(msg)) => assert!(msg.contains("1.1.phi.W1"), "{msg}"),
        other => panic!("expected shape error, got {other:?}"),
    }
    let other = ModelConfig {
        hidden_dim: 32,
        ..cfg
    };
    match Model::new(&params, &other) {
        Err(Error::Shape(msg)) => assert!(msg.contains("embed.W"), "{msg}"),
        other => panic!("expected shape error, got {other:?}"),
    }
}
