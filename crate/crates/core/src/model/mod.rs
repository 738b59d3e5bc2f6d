//! Edge-aware multi-head graph transformer.
//!
//! For every layer, node `v` is updated from the directed edges `u -> v` it receives:
//!
//! ```text
//! s_uv^h  = <Q_h h_v, K_h h_u> / sqrt(d) + psi_h(e_uv)
//! a_uv^h  = softmax over incoming edges of v of s_uv^h
//! m_v     = Wout [ sum_u a_uv^h phi_h(h_u, e_uv) ]_h + bout
//! h_v'    = Wself h_v + m_v          (ReLU between layers, none after the last)
//! ```
//!
//! Node scores are `y_v = tanh(read.w . h_v + read.b)`. The node weight of `v`
//! is the final-layer attention it receives as a key, averaged over heads,
//! `beta_v = mean_h sum_{w} a_vw^h`, normalized over the graph. The graph logit
//! is `sum_v beta_v y_v`; an empty graph has the fixed logit `-1`.

pub(crate) mod engine;

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{FeatureMask, GraphConfig, VideoGraph};
use crate::rng::rng_for;

pub(crate) use engine::{Batch, Packed};

/// Logit assigned to a graph without nodes.
pub const EMPTY_GRAPH_LOGIT: f64 = -1.0;

/// Number of edge features: IoU, center distance, frame gap.
pub const EDGE_FEATURES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub phi_hidden: usize,
    pub node_in_dim: usize,
    pub edge_in_dim: usize,
    /// Node features the model was built for; checked against graphs at evaluation time.
    pub feature_mask: FeatureMask,
    /// When false, edge features are fed to the network as zeros.
    pub use_edge_features: bool,
    /// Normalize node weights to sum to one. Off reproduces the raw weighted sum.
    pub normalize_beta: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let mask = FeatureMask::default();
        ModelConfig {
            num_layers: 3,
            num_heads: 4,
            hidden_dim: 64,
            phi_hidden: 32,
            node_in_dim: mask.dim(),
            edge_in_dim: EDGE_FEATURES,
            feature_mask: mask,
            use_edge_features: true,
            normalize_beta: true,
        }
    }
}

impl ModelConfig {
    /// Default architecture sized for graphs built with `gcfg`.
    pub fn for_graph(gcfg: &GraphConfig) -> Self {
        ModelConfig {
            node_in_dim: gcfg.feature_mask.dim(),
            feature_mask: gcfg.feature_mask,
            use_edge_features: gcfg.use_edge_features,
            ..ModelConfig::default()
        }
    }

    /// Same architecture, input side adapted to `gcfg`.
    pub fn with_graph(&self, gcfg: &GraphConfig) -> Self {
        ModelConfig {
            node_in_dim: gcfg.feature_mask.dim(),
            feature_mask: gcfg.feature_mask,
            use_edge_features: gcfg.use_edge_features,
            ..self.clone()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("hidden_dim", self.hidden_dim),
            ("phi_hidden", self.phi_hidden),
            ("node_in_dim", self.node_in_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.edge_in_dim != EDGE_FEATURES {
            return Err(Error::Config(format!("edge_in_dim must be {EDGE_FEATURES}")));
        }
        if self.node_in_dim != self.feature_mask.dim() {
            return Err(Error::Config(format!(
                "node_in_dim {} does not match feature mask `{}` ({} features)",
                self.node_in_dim,
                self.feature_mask,
                self.feature_mask.dim()
            )));
        }
        Ok(())
    }

    /// Verifies that graphs built with `gcfg` can be fed to this model.
    pub fn check_compatible(&self, gcfg: &GraphConfig) -> Result<()> {
        if self.feature_mask != gcfg.feature_mask {
            return Err(Error::Shape(format!(
                "model expects node features `{}` but graphs are built with `{}`",
                self.feature_mask, gcfg.feature_mask
            )));
        }
        if self.use_edge_features != gcfg.use_edge_features {
            return Err(Error::Shape(format!(
                "model use_edge_features = {} but graph config has {}",
                self.use_edge_features, gcfg.use_edge_features
            )));
        }
        Ok(())
    }
}

/// Dense row-major tensor. Matrices are stored `[fan_in, fan_out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Slot {
    EmbedW,
    EmbedB,
    Wq(usize, usize),
    Wk(usize, usize),
    PhiW1(usize, usize),
    PhiB1(usize, usize),
    PhiW2(usize, usize),
    PhiB2(usize, usize),
    PsiW(usize, usize),
    PsiB(usize, usize),
    Wself(usize),
    Wout(usize),
    Bout(usize),
    ReadW,
    ReadB,
}

pub(crate) struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub slot: Slot,
    /// `(fan_in, fan_out)` for weights, `None` for biases.
    pub fans: Option<(usize, usize)>,
}

/// Every tensor of the model in canonical order. Layer and head indices in names are 1-based.
pub(crate) fn tensor_specs(cfg: &ModelConfig) -> Vec<TensorSpec> {
    let d_model = cfg.hidden_dim;
    let d_head = cfg.head_dim();
    let e = cfg.edge_in_dim;
    let ph = cfg.phi_hidden;
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, slot: Slot, fans: Option<(usize, usize)>| {
        specs.push(TensorSpec {
            name,
            shape,
            slot,
            fans,
        })
    };
    push("embed.W".into(), vec![cfg.node_in_dim, d_model], Slot::EmbedW, Some((cfg.node_in_dim, d_model)));
    push("embed.b".into(), vec![d_model], Slot::EmbedB, None);
    for l in 0..cfg.num_layers {
        for h in 0..cfg.num_heads {
            let p = format!("{}.{}", l + 1, h + 1);
            push(format!("{p}.Wq"), vec![d_model, d_head], Slot::Wq(l, h), Some((d_model, d_head)));
            push(format!("{p}.Wk"), vec![d_model, d_head], Slot::Wk(l, h), Some((d_model, d_head)));
            push(format!("{p}.phi.W1"), vec![d_model + e, ph], Slot::PhiW1(l, h), Some((d_model + e, ph)));
            push(format!("{p}.phi.b1"), vec![ph], Slot::PhiB1(l, h), None);
            push(format!("{p}.phi.W2"), vec![ph, d_head], Slot::PhiW2(l, h), Some((ph, d_head)));
            push(format!("{p}.phi.b2"), vec![d_head], Slot::PhiB2(l, h), None);
            push(format!("{p}.psi.w"), vec![e], Slot::PsiW(l, h), Some((e, 1)));
            push(format!("{p}.psi.b"), vec![1], Slot::PsiB(l, h), None);
        }
        let p = l + 1;
        push(format!("{p}.Wself"), vec![d_model, d_model], Slot::Wself(l), Some((d_model, d_model)));
        push(
            format!("{p}.Wout"),
            vec![cfg.num_heads * d_head, d_model],
            Slot::Wout(l),
            Some((cfg.num_heads * d_head, d_model)),
        );
        push(format!("{p}.bout"), vec![d_model], Slot::Bout(l), None);
    }
    push("read.w".into(), vec![d_model], Slot::ReadW, Some((d_model, 1)));
    push("read.b".into(), vec![1], Slot::ReadB, None);
    specs
}

/// Total number of learnable scalars for `cfg`.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    tensor_specs(cfg).iter().map(|s| s.shape.iter().product::<usize>()).sum()
}

/// Named tensors in canonical order. Also used to hold gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Parameters {
    tensors: IndexMap<String, Tensor>,
}

/// Gradients share the parameter layout.
pub type Gradients = Parameters;

impl Parameters {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Parameters {
            tensors: tensor_specs(cfg)
                .into_iter()
                .map(|s| (s.name, Tensor::zeros(&s.shape)))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Parameters {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape)))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Checks that names and shapes match `cfg` exactly.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = tensor_specs(cfg);
        for s in &specs {
            match self.tensors.get(&s.name) {
                None => return Err(Error::Shape(format!("missing tensor `{}`", s.name))),
                Some(t) if t.shape != s.shape => {
                    return Err(Error::Shape(format!(
                        "tensor `{}` has shape {:?}, expected {:?}",
                        s.name, t.shape, s.shape
                    )))
                }
                Some(t) if t.data.len() != s.shape.iter().product::<usize>() => {
                    return Err(Error::Shape(format!(
                        "tensor `{}` holds {} values for shape {:?}",
                        s.name,
                        t.data.len(),
                        s.shape
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !specs.iter().any(|s| &s.name == *k)) {
            return Err(Error::Shape(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    /// Checks that `other` has the same names and shapes, in order.
    pub fn check_congruent(&self, other: &Parameters) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Shape(format!(
                "{} tensors vs {} tensors",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.tensors.iter().zip(&other.tensors) {
            if na != nb || ta.shape != tb.shape {
                return Err(Error::Shape(format!(
                    "tensor `{na}` {:?} does not match `{nb}` {:?}",
                    ta.shape, tb.shape
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn from_tensors(tensors: IndexMap<String, Tensor>) -> Self {
        Parameters { tensors }
    }
}

/// Uniform fan-based initialization: weights in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`; biases zero.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Parameters> {
    cfg.validate()?;
    let mut rng = rng_for(seed, 0);
    let tensors = tensor_specs(cfg)
        .into_iter()
        .map(|s| {
            let mut t = Tensor::zeros(&s.shape);
            if let Some((fan_in, fan_out)) = s.fans {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in &mut t.data {
                    *v = rng.random_range(-a..=a);
                }
            }
            (s.name, t)
        })
        .collect();
    Ok(Parameters { tensors })
}

/// Everything the forward pass exposes for one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphOutput {
    /// `y_v` per node, in `(-1, 1)`.
    pub node_scores: Vec<f64>,
    /// `attention[layer][head][edge]`, edges in the graph's order.
    pub attention: Vec<Vec<Vec<f64>>>,
    /// Normalized node weights `beta_v`.
    pub node_weights: Vec<f64>,
    pub graph_logit: f64,
    pub probability: f64,
}

impl GraphOutput {
    /// Head-mean attention of the final layer, one value per edge.
    pub fn final_attention(&self) -> Vec<f64> {
        let Some(last) = self.attention.last() else {
            return vec![];
        };
        let heads = last.len() as f64;
        let n = last.first().map_or(0, Vec::len);
        (0..n).map(|e| last.iter().map(|h| h[e]).sum::<f64>() / heads).collect()
    }
}

/// Parameters packed for fast evaluation.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    packed: Packed,
}

/// Graphs per batched forward pass when scoring many videos.
const SCORE_CHUNK: usize = 64;

impl Model {
    pub fn new(params: &Parameters, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            cfg: cfg.clone(),
            packed: Packed::from_params(params, cfg)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn forward(&self, graph: &VideoGraph) -> Result<GraphOutput> {
        let batch = Batch::new(&[graph], &self.cfg)?;
        let pass = engine::forward(&self.packed, &self.cfg, &batch, false);
        Ok(pass.graph_output(&batch, 0, true))
    }

    /// Graph logits for many graphs, evaluated in batches.
    pub fn logits(&self, graphs: &[&VideoGraph]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(graphs.len());
        for chunk in graphs.chunks(SCORE_CHUNK) {
            let batch = Batch::new(chunk, &self.cfg)?;
            let pass = engine::forward(&self.packed, &self.cfg, &batch, false);
            out.extend_from_slice(&pass.logits);
        }
        Ok(out)
    }

    pub(crate) fn packed(&self) -> &Packed {
        &self.packed
    }
}

/// One-shot forward pass; see [`Model`] for repeated evaluation.
pub fn forward(graph: &VideoGraph, params: &Parameters, cfg: &ModelConfig) -> Result<GraphOutput> {
    Model::new(params, cfg)?.forward(graph)
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: ModelConfig,
    tensors: Parameters,
}

pub fn save_checkpoint(params: &Parameters, cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    params.check_shapes(cfg)?;
    let ck = Checkpoint {
        config: cfg.clone(),
        tensors: params.clone(),
    };
    let text = serde_json::to_string(&ck).expect("checkpoint serialization cannot fail");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Parameters, ModelConfig)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })?;
    ck.config.validate()?;
    ck.tensors.check_shapes(&ck.config)?;
    if !ck.tensors.all_finite() {
        return Err(Error::Invariant("checkpoint contains non-finite values".into()));
    }
    Ok((ck.tensors, ck.config))
}

#[cfg(test)]
mod tests;
