//! Central finite-difference verification of [`super::backward`].
//!
//! The difference quotient is taken on a double-double evaluation of the loss.
//! In plain doubles the rounding noise of `L(theta + h) - L(theta - h)` is
//! about `1e-16 / h`, which swamps gradients below roughly `1e-7`.
//!
//! A coordinate whose perturbation flips any ReLU input between `theta - h` and
//! `theta + h` straddles a kink, where the difference quotient does not estimate
//! the derivative. The step is shrunk tenfold until the two sides agree; a
//! coordinate still straddling at the smallest step is replaced by another one
//! from the same tensor.

use rand::Rng;
use serde::Serialize;

use crate::detection::BoundingBox;
use crate::error::{Error, Result};
use crate::graph::{edge_features, Edge, FeatureMask, Node, VideoGraph};
use crate::model::{init_params, Gradients, ModelConfig, Parameters};
use crate::rng::{derive_seed, rng_for, streams};

use super::backward;
use super::dd::{Dd, DotAcc};

/// Smallest step tried when shrinking around a ReLU kink.
const MIN_STEP: f64 = 1e-8;
/// Replacement draws per tensor before a kink-bound coordinate is given up.
const MAX_RESAMPLES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub fd_step: f64,
    pub tolerance: f64,
    /// Coordinates to check; every tensor receives at least one.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            fd_step: 1e-5,
            tolerance: 1e-4,
            samples: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordinateCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub step: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate attaining `max_rel_error`.
    pub worst: Option<CoordinateCheck>,
    pub checked: usize,
    pub tensors_covered: usize,
    /// Coordinates abandoned because every step straddled a ReLU kink.
    pub kink_skips: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Checks the analytic gradient of the single-graph loss at `params`.
pub fn grad_check(graph: &VideoGraph, params: &Parameters, cfg: &ModelConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (_, grads) = backward(graph, params, cfg)?;
    check_gradients(graph, params, cfg, &grads, opts)
}

/// Compares `grads` with central differences of the loss on sampled coordinates.
pub fn check_gradients(
    graph: &VideoGraph,
    params: &Parameters,
    cfg: &ModelConfig,
    grads: &Gradients,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-4).contains(&opts.fd_step) {
        return Err(Error::Config(format!("fd_step must lie in [1e-6, 1e-4], got {}", opts.fd_step)));
    }
    params.check_shapes(cfg)?;
    params.check_congruent(grads)?;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut rng = rng_for(opts.seed, streams::GRADCHECK);

    let mut order: Vec<usize> = (0..names.len()).collect();
    while order.len() < opts.samples {
        order.push(rng.random_range(0..names.len()));
    }

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tensors_covered: 0,
        kink_skips: 0,
        tolerance: opts.tolerance,
        passed: true,
    };
    let mut covered = vec![false; names.len()];
    for t in order {
        let name = &names[t];
        let len = params.get(name).unwrap().len();
        for _ in 0..MAX_RESAMPLES {
            let index = rng.random_range(0..len);
            match probe_coordinate(graph, &mut probe, cfg, name, index, opts.fd_step) {
                Some((numeric, step)) => {
                    let analytic = grads.get(name).unwrap().data[index];
                    let rel_error = relative_error(analytic, numeric);
                    report.checked += 1;
                    covered[t] = true;
                    if report.worst.is_none() || rel_error > report.max_rel_error {
                        report.max_rel_error = rel_error;
                        report.worst = Some(CoordinateCheck {
                            tensor: name.clone(),
                            index,
                            analytic,
                            numeric,
                            step,
                            rel_error,
                        });
                    }
                    break;
                }
                None => report.kink_skips += 1,
            }
        }
    }
    report.tensors_covered = covered.iter().filter(|&&c| c).count();
    report.passed = report.max_rel_error <= opts.tolerance && report.tensors_covered == names.len();
    Ok(report)
}

/// Node counts of the graphs drawn by [`check_random_graphs`].
pub const RANDOM_GRAPH_NODES: std::ops::RangeInclusive<usize> = 3..=12;

/// Gradient checks on `count` seeded random graphs with 3 to 12 nodes, each
/// under its own freshly initialized parameters.
pub fn check_random_graphs(cfg: &ModelConfig, count: usize, seed: u64, opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    cfg.validate()?;
    (0..count as u64)
        .map(|k| {
            let sub = derive_seed(seed, streams::GRADCHECK + 1 + k);
            let mut rng = rng_for(sub, 0);
            let n = rng.random_range(RANDOM_GRAPH_NODES);
            let p_edge = rng.random_range(0.2..0.8);
            let graph = random_graph(&mut rng, n, p_edge, cfg.feature_mask);
            let params = init_params(cfg, sub)?;
            grad_check(&graph, &params, cfg, &GradCheckOptions { seed: sub, ..*opts })
        })
        .collect()
}

fn random_box<R: Rng + ?Sized>(rng: &mut R) -> BoundingBox {
    let w = rng.random_range(0.05..0.4);
    let h = rng.random_range(0.05..0.4);
    let (x, y) = (rng.random::<f64>() * (1.0 - w), rng.random::<f64>() * (1.0 - h));
    BoundingBox::new(x, y, w, h, rng.random_range(0.02..1.0)).expect("box lies inside the frame")
}

/// `n` nodes on frames `0, 1, ...` (consecutive nodes share a frame with
/// probability 0.2), each pair on distinct frames linked in both directions
/// with probability `p_edge`. Labels and boxes are uniform at random.
pub fn random_graph<R: Rng + ?Sized>(rng: &mut R, n: usize, p_edge: f64, mask: FeatureMask) -> VideoGraph {
    let mut nodes = Vec::with_capacity(n);
    let mut t = 0u64;
    for i in 0..n {
        if i > 0 && rng.random::<f64>() < 0.8 {
            t += 1;
        }
        let b = random_box(rng);
        nodes.push(Node {
            node_id: i,
            frame_index: t,
            bbox: b,
            features: mask.extract(&b),
            label: if rng.random::<bool>() { 1 } else { -1 },
        });
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if nodes[i].frame_index != nodes[j].frame_index && rng.random::<f64>() < p_edge {
                let f = edge_features(&nodes[i], &nodes[j]);
                edges.push(Edge { src: i, dst: j, features: f });
                edges.push(Edge { src: j, dst: i, features: f });
            }
        }
    }
    VideoGraph {
        video_id: "random".into(),
        label: u8::from(rng.random::<bool>()),
        nodes,
        edges,
    }
}

/// Central difference at one coordinate, or `None` if every step straddles a kink.
/// Both sides are evaluated in double-double, so cancellation in `L+ - L-`
/// costs no accuracy at the checked step sizes.
fn probe_coordinate(
    graph: &VideoGraph,
    probe: &mut Parameters,
    cfg: &ModelConfig,
    name: &str,
    index: usize,
    fd_step: f64,
) -> Option<(f64, f64)> {
    let theta = probe.get(name).unwrap().data[index];
    let mut step = fd_step;
    let result = loop {
        let (up, down) = (theta + step, theta - step);
        let mut side = |value: f64| {
            probe.get_mut(name).unwrap().data[index] = value;
            dd_loss(graph, probe, cfg)
        };
        let (plus, sig_plus) = side(up);
        let (minus, sig_minus) = side(down);
        if sig_plus == sig_minus {
            // up - down is exact in double-double even when 2 * step is not.
            let numeric = ((plus - minus) / (Dd::from(up) - Dd::from(down))).to_f64();
            break Some((numeric, step));
        }
        step *= 0.1;
        if step < MIN_STEP * 0.5 {
            break None;
        }
    };
    probe.get_mut(name).unwrap().data[index] = theta;
    result
}

fn positive(x: Dd) -> bool {
    x.hi > 0.0 || (x.hi == 0.0 && x.lo > 0.0)
}

/// Single-graph loss in double-double, computed node by node from the named
/// tensors without the batched engine, together with the sign of every ReLU
/// input in evaluation order. Shapes must already be checked.
fn dd_loss(graph: &VideoGraph, params: &Parameters, cfg: &ModelConfig) -> (Dd, Vec<bool>) {
    let mut signs = Vec::new();
    let n = graph.nodes.len();
    if n == 0 {
        return (dd_graph_loss(Dd::from(-1.0), graph.label), signs);
    }
    let t = |name: &str| params.get(name).expect("shapes checked").data.as_slice();
    let (dm, d, heads, ph) = (cfg.hidden_dim, cfg.head_dim(), cfg.num_heads, cfg.phi_hidden);
    let sqrt_d = Dd::from((d as f64).sqrt());
    let ef: Vec<[f64; 3]> = graph
        .edges
        .iter()
        .map(|e| if cfg.use_edge_features { e.features } else { [0.0; 3] })
        .collect();
    let mut incoming = vec![Vec::new(); n];
    for (e, edge) in graph.edges.iter().enumerate() {
        incoming[edge.dst].push(e);
    }

    let (ew, eb) = (t("embed.W"), t("embed.b"));
    let mut h: Vec<Vec<Dd>> = graph
        .nodes
        .iter()
        .map(|node| {
            (0..dm)
                .map(|j| {
                    let mut acc = DotAcc::new(Dd::from(eb[j]));
                    for (i, &x) in node.features.iter().enumerate() {
                        acc.add_f64(x, ew[i * dm + j]);
                    }
                    acc.value()
                })
                .collect()
        })
        .collect();

    // Head-summed final-layer attention per edge.
    let mut alpha_sum = vec![Dd::ZERO; graph.edges.len()];
    for l in 1..=cfg.num_layers {
        let last = l == cfg.num_layers;
        let mut concat = vec![vec![Dd::ZERO; heads * d]; n];
        for head in 1..=heads {
            let p = format!("{l}.{head}");
            let w = |suffix: &str| t(&format!("{p}.{suffix}"));
            let (wq, wk, w1, b1, w2, b2) = (w("Wq"), w("Wk"), w("phi.W1"), w("phi.b1"), w("phi.W2"), w("phi.b2"));
            let (psi_w, psi_b) = (w("psi.w"), w("psi.b")[0]);
            let proj = |m: &[f64], v: usize| -> Vec<Dd> {
                (0..d)
                    .map(|k| {
                        let mut acc = DotAcc::new(Dd::ZERO);
                        for (i, &x) in h[v].iter().enumerate() {
                            acc.add(x, m[i * d + k]);
                        }
                        acc.value()
                    })
                    .collect()
            };
            let keys: Vec<Vec<Dd>> = (0..n).map(|u| proj(wk, u)).collect();
            // Source-node part of the value network's first layer, shared by all out-edges.
            let node_part: Vec<Vec<Dd>> = (0..n)
                .map(|u| {
                    (0..ph)
                        .map(|j| {
                            let mut acc = DotAcc::new(Dd::from(b1[j]));
                            for (i, &x) in h[u].iter().enumerate() {
                                acc.add(x, w1[i * ph + j]);
                            }
                            acc.value()
                        })
                        .collect()
                })
                .collect();
            for v in 0..n {
                let inc = &incoming[v];
                if inc.is_empty() {
                    continue;
                }
                let q = proj(wq, v);
                let logits: Vec<Dd> = inc
                    .iter()
                    .map(|&e| {
                        let u = graph.edges[e].src;
                        let dot = q.iter().zip(&keys[u]).fold(Dd::ZERO, |s, (&a, &b)| s + a * b);
                        let mut acc = DotAcc::new(dot / sqrt_d);
                        for (&x, &c) in ef[e].iter().zip(psi_w) {
                            acc.add_f64(x, c);
                        }
                        acc.add_f64(1.0, psi_b);
                        acc.value()
                    })
                    .collect();
                let max = logits.iter().copied().fold(logits[0], |a, b| if b.hi > a.hi { b } else { a });
                let exps: Vec<Dd> = logits.iter().map(|&s| (s - max).exp()).collect();
                let z = exps.iter().fold(Dd::ZERO, |a, &b| a + b);
                for (&e, &x) in inc.iter().zip(&exps) {
                    let alpha = x / z;
                    if last {
                        alpha_sum[e] = alpha_sum[e] + alpha;
                    }
                    let u = graph.edges[e].src;
                    let hidden: Vec<Dd> = (0..ph)
                        .map(|j| {
                            let mut acc = DotAcc::new(node_part[u][j]);
                            for (f, &x) in ef[e].iter().enumerate() {
                                acc.add_f64(x, w1[(dm + f) * ph + j]);
                            }
                            let pre = acc.value();
                            signs.push(positive(pre));
                            pre.max0()
                        })
                        .collect();
                    for k in 0..d {
                        let mut acc = DotAcc::new(Dd::from(b2[k]));
                        for (j, &a) in hidden.iter().enumerate() {
                            acc.add(a, w2[j * d + k]);
                        }
                        let slot = &mut concat[v][(head - 1) * d + k];
                        *slot = *slot + alpha * acc.value();
                    }
                }
            }
        }
        let (wself, wout, bout) = (t(&format!("{l}.Wself")), t(&format!("{l}.Wout")), t(&format!("{l}.bout")));
        h = (0..n)
            .map(|v| {
                (0..dm)
                    .map(|j| {
                        let mut acc = DotAcc::new(Dd::from(bout[j]));
                        for (i, &x) in h[v].iter().enumerate() {
                            acc.add(x, wself[i * dm + j]);
                        }
                        for (i, &x) in concat[v].iter().enumerate() {
                            acc.add(x, wout[i * dm + j]);
                        }
                        let pre = acc.value();
                        if last {
                            pre
                        } else {
                            signs.push(positive(pre));
                            pre.max0()
                        }
                    })
                    .collect()
            })
            .collect();
    }

    let (rw, rb) = (t("read.w"), t("read.b")[0]);
    let scores: Vec<Dd> = h
        .iter()
        .map(|hv| {
            let mut acc = DotAcc::new(Dd::from(rb));
            for (&x, &c) in hv.iter().zip(rw) {
                acc.add(x, c);
            }
            acc.value().tanh()
        })
        .collect();
    let beta: Vec<Dd> = if graph.edges.is_empty() {
        vec![Dd::ONE / Dd::from(n as f64); n]
    } else {
        let mut beta = vec![Dd::ZERO; n];
        for (edge, &a) in graph.edges.iter().zip(&alpha_sum) {
            beta[edge.src] = beta[edge.src] + a / Dd::from(heads as f64);
        }
        if cfg.normalize_beta {
            let total = beta.iter().fold(Dd::ZERO, |a, &b| a + b);
            beta.iter().map(|&b| b / total).collect()
        } else {
            beta
        }
    };
    let logit = beta.iter().zip(&scores).fold(Dd::ZERO, |a, (&b, &s)| a + b * s);
    let sq = scores
        .iter()
        .zip(&graph.nodes)
        .fold(Dd::ZERO, |a, (&s, node)| {
            let r = s - Dd::from(f64::from(node.label));
            a + r * r
        });
    (sq / Dd::from(n as f64) + dd_graph_loss(logit, graph.label), signs)
}

/// `softplus(z) - y z`, as in [`super::loss::graph_loss`].
fn dd_graph_loss(z: Dd, label: u8) -> Dd {
    let soft = z.max0() + (Dd::ONE + (-z.abs()).exp()).ln();
    if label == 1 {
        soft - z
    } else {
        soft
    }
}
