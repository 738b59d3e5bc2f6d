//! Joint loss, exact gradients, Adam, and the balanced-batch training loop.

pub mod adam;
mod dd;
pub mod gradcheck;
pub mod loss;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detection::Dataset;
use crate::error::{Error, Result};
use crate::eval::metrics::auc_of;
use crate::graph::{build_graph, GraphConfig, VideoGraph};
use crate::model::engine::{self, Batch, Packed};
use crate::model::{init_params, Gradients, Model, ModelConfig, Parameters};
use crate::rng::{derive_seed, rng_for, streams};
use crate::synth::{perturb_dataset, PerturbConfig};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{check_gradients, grad_check, GradCheckOptions, GradCheckReport};
pub use loss::{graph_loss, graph_loss_grad, node_loss, sigmoid, LossBreakdown};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Optimizer steps; each step consumes one balanced batch.
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs between graph regenerations from the noise schedule.
    pub regen_interval: usize,
    /// Leading noise-schedule entries never used for regeneration.
    pub warmup_exclusion: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Epochs between validation AUC evaluations.
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            epochs: 2000,
            batch_size: 100,
            regen_interval: 50,
            warmup_exclusion: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            eval_interval: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return bad(format!("batch_size must be positive and even, got {}", self.batch_size));
        }
        if self.regen_interval == 0 || self.eval_interval == 0 {
            return bad("regen_interval and eval_interval must be >= 1".into());
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2) && self.adam_eps > 0.0) {
            return bad("adam_beta1 and adam_beta2 must lie in [0, 1) and adam_eps must be > 0".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Loss terms of one graph under `params`. An empty graph contributes only the
/// graph term at the fixed logit.
pub fn total_loss(graph: &VideoGraph, params: &Parameters, cfg: &ModelConfig) -> Result<LossBreakdown> {
    let model = Model::new(params, cfg)?;
    let batch = Batch::new(&[graph], cfg)?;
    let pass = engine::forward(model.packed(), cfg, &batch, false);
    Ok(graph_terms(&pass.scores, batch.node_labels(), pass.logits[0], graph.label))
}

fn graph_terms(scores: &[f64], labels: &[f64], logit: f64, label: u8) -> LossBreakdown {
    let node = if scores.is_empty() {
        0.0
    } else {
        node_loss(scores, labels).expect("lengths agree")
    };
    LossBreakdown::new(node, graph_loss(logit, label))
}

/// Gradient of [`total_loss`] with respect to every parameter.
pub fn backward(graph: &VideoGraph, params: &Parameters, cfg: &ModelConfig) -> Result<(LossBreakdown, Gradients)> {
    let model = Model::new(params, cfg)?;
    let (loss, grad) = batch_gradient(model.packed(), cfg, &[graph])?;
    Ok((loss, grad.to_params(cfg)))
}

/// Mean loss and mean gradient over `graphs`, in one disjoint-union pass.
pub(crate) fn batch_gradient(packed: &Packed, cfg: &ModelConfig, graphs: &[&VideoGraph]) -> Result<(LossBreakdown, Packed)> {
    let batch = Batch::new(graphs, cfg)?;
    let pass = engine::forward(packed, cfg, &batch, true);
    let scale = 1.0 / graphs.len() as f64;
    let labels = batch.node_labels();
    let mut d_scores = vec![0.0; batch.num_nodes()];
    let mut d_logits = vec![0.0; batch.num_graphs()];
    let (mut node, mut graph) = (0.0, 0.0);
    #[allow(clippy::needless_range_loop)] // `g` also indexes the batch ranges.
    for g in 0..batch.num_graphs() {
        let nodes = batch.graph_nodes(g);
        let z = pass.logits[g];
        let terms = graph_terms(&pass.scores[nodes.clone()], &labels[nodes.clone()], z, batch.label(g));
        node += terms.node;
        graph += terms.graph;
        if nodes.is_empty() {
            continue;
        }
        let k = nodes.len() as f64;
        for v in nodes {
            d_scores[v] = scale * 2.0 * (pass.scores[v] - labels[v]) / k;
        }
        d_logits[g] = scale * graph_loss_grad(z, batch.label(g));
    }
    let grad = engine::backward(packed, cfg, &batch, &pass, &d_scores, &d_logits);
    Ok((LossBreakdown::new(node * scale, graph * scale), grad))
}

/// One training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub node_loss: f64,
    pub graph_loss: f64,
    /// Validation AUC after this epoch's update, on evaluation epochs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Validation AUC of the initial parameters.
    pub initial_val_auc: f64,
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were returned; `None` means the initialization.
    pub best_epoch: Option<usize>,
    pub best_val_auc: f64,
}

impl TrainHistory {
    /// Writes one JSON object per epoch.
    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            let line = serde_json::to_string(r).expect("records serialize");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Graphs of a dataset, split by class for balanced sampling.
struct TrainGraphs {
    graphs: Vec<VideoGraph>,
    positives: Vec<usize>,
    negatives: Vec<usize>,
}

impl TrainGraphs {
    fn build(dataset: &Dataset, gcfg: &GraphConfig) -> Self {
        let graphs: Vec<VideoGraph> = dataset.records().iter().map(|r| build_graph(r, gcfg)).collect();
        let (positives, negatives) = (0..graphs.len()).partition(|&i| graphs[i].label == 1);
        TrainGraphs {
            graphs,
            positives,
            negatives,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, half: usize) -> Vec<&VideoGraph> {
        let mut out = Vec::with_capacity(2 * half);
        for pool in [&self.positives, &self.negatives] {
            if pool.len() >= half {
                out.extend(sample(rng, pool.len(), half).into_iter().map(|i| &self.graphs[pool[i]]));
            } else {
                out.extend((0..half).map(|_| &self.graphs[pool[rng.random_range(0..pool.len())]]));
            }
        }
        out
    }
}

/// Validation AUC of the graph probabilities.
pub fn graph_auc(model: &Model, graphs: &[VideoGraph]) -> Result<f64> {
    let refs: Vec<&VideoGraph> = graphs.iter().collect();
    let logits = model.logits(&refs)?;
    let labels: Vec<u8> = graphs.iter().map(|g| g.label).collect();
    auc_of(&logits, &labels)
}

/// Trains from a fresh initialization and returns the parameters with the best
/// validation AUC (the initialization included).
///
/// Every `regen_interval` epochs the training graphs are rebuilt from a perturbed
/// copy of `train_set`, cycling through `noise_schedule[warmup_exclusion..]`; an
/// empty remainder keeps the clean graphs throughout.
pub fn train(
    train_set: &Dataset,
    val_set: &Dataset,
    gcfg: &GraphConfig,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    noise_schedule: &[PerturbConfig],
) -> Result<(Parameters, TrainHistory)> {
    tcfg.validate()?;
    gcfg.validate()?;
    mcfg.validate()?;
    mcfg.check_compatible(gcfg)?;
    for level in noise_schedule {
        level.validate()?;
    }
    for ds in [train_set, val_set] {
        let (positives, negatives) = ds.class_counts();
        if positives == 0 || negatives == 0 {
            return Err(Error::SingleClass { positives, negatives });
        }
    }

    let levels = noise_schedule.get(tcfg.warmup_exclusion..).unwrap_or(&[]);
    let mut params = init_params(mcfg, derive_seed(tcfg.seed, streams::INIT))?;
    let mut state = AdamState::new(&params);
    let adam = tcfg.adam();
    let mut rng = rng_for(tcfg.seed, streams::TRAIN);
    let mut data = TrainGraphs::build(train_set, gcfg);
    let val_graphs: Vec<VideoGraph> = val_set.records().iter().map(|r| build_graph(r, gcfg)).collect();

    let mut model = Model::new(&params, mcfg)?;
    let initial = graph_auc(&model, &val_graphs)?;
    let mut history = TrainHistory {
        initial_val_auc: initial,
        records: Vec::with_capacity(tcfg.epochs),
        best_epoch: None,
        best_val_auc: initial,
    };
    let mut best = params.clone();
    log::info!("epoch 0: initial val AUC {initial:.4}");

    for epoch in 0..tcfg.epochs {
        if epoch > 0 && epoch % tcfg.regen_interval == 0 && !levels.is_empty() {
            let round = epoch / tcfg.regen_interval - 1;
            let level = &levels[round % levels.len()];
            let seed = derive_seed(tcfg.seed, streams::PERTURB + round as u64);
            data = TrainGraphs::build(&perturb_dataset(train_set, level, seed)?, gcfg);
        }
        let batch = data.sample(&mut rng, tcfg.batch_size / 2);
        let (loss, grad) = batch_gradient(model.packed(), mcfg, &batch)?;
        adam_step(&mut params, &grad.to_params(mcfg), &mut state, &adam)?;
        model = Model::new(&params, mcfg)?;

        let done = epoch + 1;
        let val_auc = if done % tcfg.eval_interval == 0 || done == tcfg.epochs {
            let auc = graph_auc(&model, &val_graphs)?;
            if auc > history.best_val_auc {
                history.best_val_auc = auc;
                history.best_epoch = Some(epoch);
                best = params.clone();
            }
            log::info!("epoch {done}: loss {:.4} (node {:.4}, graph {:.4}), val AUC {auc:.4}", loss.total, loss.node, loss.graph);
            Some(auc)
        } else {
            None
        };
        history.records.push(EpochRecord {
            epoch,
            loss: loss.total,
            node_loss: loss.node,
            graph_loss: loss.graph,
            val_auc,
        });
    }
    Ok((best, history))
}
