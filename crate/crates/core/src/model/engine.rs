//! Batched forward and reverse-mode passes over a disjoint union of graphs.
//!
//! Per-head projections are packed side by side so that each layer needs one
//! node-level matrix product `H · [Wq | Wk | W1_node | Wself]`. The node part of
//! the value network is computed once per node and gathered per edge; its second
//! layer runs after aggregation, once per node.

use indexmap::IndexMap;
use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::{tensor_specs, GraphOutput, ModelConfig, Parameters, Slot, Tensor, EMPTY_GRAPH_LOGIT};
use crate::error::{Error, Result};
use crate::graph::VideoGraph;
use crate::train::loss::sigmoid;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PackedLayer {
    /// `D x (H·d | H·d | H·ph | D)`: queries, keys, node part of phi's first layer, self term.
    pub w_node: Array2<f64>,
    /// Edge part of phi's first layer, `E x H·ph`.
    pub w1e: Array2<f64>,
    pub b1: Array1<f64>,
    /// Per head `ph x d`.
    pub w2: Vec<Array2<f64>>,
    pub b2: Array1<f64>,
    /// `E x H`.
    pub psi_w: Array2<f64>,
    pub psi_b: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Packed {
    pub embed_w: Array2<f64>,
    pub embed_b: Array1<f64>,
    pub layers: Vec<PackedLayer>,
    pub read_w: Array1<f64>,
    pub read_b: f64,
}

#[derive(Clone, Copy)]
struct Dims {
    d_model: usize,
    d_head: usize,
    heads: usize,
    ph: usize,
    e: usize,
}

impl Dims {
    fn new(cfg: &ModelConfig) -> Self {
        Dims {
            d_model: cfg.hidden_dim,
            d_head: cfg.head_dim(),
            heads: cfg.num_heads,
            ph: cfg.phi_hidden,
            e: cfg.edge_in_dim,
        }
    }
    fn q0(&self) -> usize {
        0
    }
    fn k0(&self) -> usize {
        self.heads * self.d_head
    }
    fn p0(&self) -> usize {
        2 * self.heads * self.d_head
    }
    fn s0(&self) -> usize {
        self.p0() + self.heads * self.ph
    }
    fn cols(&self) -> usize {
        self.s0() + self.d_model
    }
}

impl Packed {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = Dims::new(cfg);
        let layer = PackedLayer {
            w_node: Array2::zeros((d.d_model, d.cols())),
            w1e: Array2::zeros((d.e, d.heads * d.ph)),
            b1: Array1::zeros(d.heads * d.ph),
            w2: vec![Array2::zeros((d.ph, d.d_head)); d.heads],
            b2: Array1::zeros(d.heads * d.d_head),
            psi_w: Array2::zeros((d.e, d.heads)),
            psi_b: Array1::zeros(d.heads),
            w_out: Array2::zeros((d.heads * d.d_head, d.d_model)),
            b_out: Array1::zeros(d.d_model),
        };
        Packed {
            embed_w: Array2::zeros((cfg.node_in_dim, d.d_model)),
            embed_b: Array1::zeros(d.d_model),
            layers: vec![layer; cfg.num_layers],
            read_w: Array1::zeros(d.d_model),
            read_b: 0.0,
        }
    }

    pub fn from_params(params: &Parameters, cfg: &ModelConfig) -> Result<Self> {
        params.check_shapes(cfg)?;
        let mut packed = Packed::zeros(cfg);
        let d = Dims::new(cfg);
        for spec in tensor_specs(cfg) {
            let t = params.get(&spec.name).expect("checked above");
            packed.write_slot(&d, spec.slot, &t.data);
        }
        Ok(packed)
    }

    pub fn to_params(&self, cfg: &ModelConfig) -> Parameters {
        let d = Dims::new(cfg);
        let tensors: IndexMap<String, Tensor> = tensor_specs(cfg)
            .into_iter()
            .map(|spec| {
                let data = self.read_slot(&d, spec.slot);
                (spec.name, Tensor { shape: spec.shape, data })
            })
            .collect();
        Parameters::from_tensors(tensors)
    }

    fn write_slot(&mut self, d: &Dims, slot: Slot, data: &[f64]) {
        let copy_block = |dst: &mut Array2<f64>, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, src: &[f64]| {
            let width = cols.len();
            let mut view = dst.slice_mut(s![rows, cols]);
            for (r, mut row) in view.rows_mut().into_iter().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = src[r * width + c];
                }
            }
        };
        match slot {
            Slot::EmbedW => {
                let rows = self.embed_w.nrows();
                copy_block(&mut self.embed_w, 0..rows, 0..d.d_model, data)
            }
            Slot::EmbedB => self.embed_b.as_slice_mut().unwrap().copy_from_slice(data),
            Slot::Wq(l, h) => {
                let c = d.q0() + h * d.d_head;
                copy_block(&mut self.layers[l].w_node, 0..d.d_model, c..c + d.d_head, data)
            }
            Slot::Wk(l, h) => {
                let c = d.k0() + h * d.d_head;
                copy_block(&mut self.layers[l].w_node, 0..d.d_model, c..c + d.d_head, data)
            }
            Slot::PhiW1(l, h) => {
                let c = d.p0() + h * d.ph;
                let split = d.d_model * d.ph;
                copy_block(&mut self.layers[l].w_node, 0..d.d_model, c..c + d.ph, &data[..split]);
                copy_block(&mut self.layers[l].w1e, 0..d.e, h * d.ph..(h + 1) * d.ph, &data[split..]);
            }
            Slot::PhiB1(l, h) => self.layers[l].b1.slice_mut(s![h * d.ph..(h + 1) * d.ph]).assign(&ndarray::aview1(data)),
            Slot::PhiW2(l, h) => copy_block(&mut self.layers[l].w2[h], 0..d.ph, 0..d.d_head, data),
            Slot::PhiB2(l, h) => self.layers[l]
                .b2
                .slice_mut(s![h * d.d_head..(h + 1) * d.d_head])
                .assign(&ndarray::aview1(data)),
            Slot::PsiW(l, h) => self.layers[l].psi_w.column_mut(h).assign(&ndarray::aview1(data)),
            Slot::PsiB(l, h) => self.layers[l].psi_b[h] = data[0],
            Slot::Wself(l) => copy_block(&mut self.layers[l].w_node, 0..d.d_model, d.s0()..d.cols(), data),
            Slot::Wout(l) => {
                let rows = self.layers[l].w_out.nrows();
                copy_block(&mut self.layers[l].w_out, 0..rows, 0..d.d_model, data)
            }
            Slot::Bout(l) => self.layers[l].b_out.assign(&ndarray::aview1(data)),
            Slot::ReadW => self.read_w.assign(&ndarray::aview1(data)),
            Slot::ReadB => self.read_b = data[0],
        }
    }

    fn read_slot(&self, d: &Dims, slot: Slot) -> Vec<f64> {
        let block = |m: &Array2<f64>, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>| -> Vec<f64> {
            m.slice(s![rows, cols]).iter().copied().collect()
        };
        match slot {
            Slot::EmbedW => self.embed_w.iter().copied().collect(),
            Slot::EmbedB => self.embed_b.to_vec(),
            Slot::Wq(l, h) => {
                let c = d.q0() + h * d.d_head;
                block(&self.layers[l].w_node, 0..d.d_model, c..c + d.d_head)
            }
            Slot::Wk(l, h) => {
                let c = d.k0() + h * d.d_head;
                block(&self.layers[l].w_node, 0..d.d_model, c..c + d.d_head)
            }
            Slot::PhiW1(l, h) => {
                let c = d.p0() + h * d.ph;
                let mut v = block(&self.layers[l].w_node, 0..d.d_model, c..c + d.ph);
                v.extend(block(&self.layers[l].w1e, 0..d.e, h * d.ph..(h + 1) * d.ph));
                v
            }
            Slot::PhiB1(l, h) => self.layers[l].b1.slice(s![h * d.ph..(h + 1) * d.ph]).to_vec(),
            Slot::PhiW2(l, h) => self.layers[l].w2[h].iter().copied().collect(),
            Slot::PhiB2(l, h) => self.layers[l].b2.slice(s![h * d.d_head..(h + 1) * d.d_head]).to_vec(),
            Slot::PsiW(l, h) => self.layers[l].psi_w.column(h).to_vec(),
            Slot::PsiB(l, h) => vec![self.layers[l].psi_b[h]],
            Slot::Wself(l) => block(&self.layers[l].w_node, 0..d.d_model, d.s0()..d.cols()),
            Slot::Wout(l) => self.layers[l].w_out.iter().copied().collect(),
            Slot::Bout(l) => self.layers[l].b_out.to_vec(),
            Slot::ReadW => self.read_w.to_vec(),
            Slot::ReadB => vec![self.read_b],
        }
    }
}

/// Disjoint union of graphs, ready for the engine.
#[derive(Debug, Clone)]
pub(crate) struct Batch {
    x: Array2<f64>,
    src: Vec<usize>,
    dst: Vec<usize>,
    efeat: Array2<f64>,
    /// Incoming edges of node `v` are `in_edges[in_ptr[v]..in_ptr[v + 1]]`.
    in_ptr: Vec<usize>,
    in_edges: Vec<usize>,
    node_ptr: Vec<usize>,
    edge_ptr: Vec<usize>,
    /// Nodes with at least one incoming edge, per graph.
    receivers: Vec<usize>,
    labels: Vec<u8>,
    node_labels: Vec<f64>,
}

impl Batch {
    pub fn new(graphs: &[&VideoGraph], cfg: &ModelConfig) -> Result<Self> {
        let n: usize = graphs.iter().map(|g| g.num_nodes()).sum();
        let m: usize = graphs.iter().map(|g| g.num_edges()).sum();
        let f = cfg.node_in_dim;
        let mut x = Array2::zeros((n, f));
        let mut efeat = Array2::zeros((m, cfg.edge_in_dim));
        let mut src = Vec::with_capacity(m);
        let mut dst = Vec::with_capacity(m);
        let mut node_ptr = vec![0];
        let mut edge_ptr = vec![0];
        let mut node_labels = Vec::with_capacity(n);
        let mut offset = 0;
        for g in graphs {
            for (i, node) in g.nodes.iter().enumerate() {
                if node.features.len() != f {
                    return Err(Error::Shape(format!(
                        "graph `{}` node {} has {} features, model expects {} (`{}`)",
                        g.video_id,
                        node.node_id,
                        node.features.len(),
                        f,
                        cfg.feature_mask
                    )));
                }
                x.row_mut(offset + i).assign(&ndarray::aview1(&node.features));
                node_labels.push(f64::from(node.label));
            }
            for e in &g.edges {
                if e.src >= g.num_nodes() || e.dst >= g.num_nodes() {
                    return Err(Error::Shape(format!("graph `{}` has an edge to a missing node", g.video_id)));
                }
                let row = src.len();
                src.push(offset + e.src);
                dst.push(offset + e.dst);
                if cfg.use_edge_features {
                    efeat.row_mut(row).assign(&ndarray::aview1(&e.features));
                }
            }
            offset += g.num_nodes();
            node_ptr.push(offset);
            edge_ptr.push(src.len());
        }

        let mut in_ptr = vec![0usize; n + 1];
        for &v in &dst {
            in_ptr[v + 1] += 1;
        }
        for v in 0..n {
            in_ptr[v + 1] += in_ptr[v];
        }
        let mut fill = in_ptr.clone();
        let mut in_edges = vec![0usize; m];
        for (e, &v) in dst.iter().enumerate() {
            in_edges[fill[v]] = e;
            fill[v] += 1;
        }
        let receivers = node_ptr
            .windows(2)
            .map(|w| (w[0]..w[1]).filter(|&v| in_ptr[v + 1] > in_ptr[v]).count())
            .collect();

        Ok(Batch {
            x,
            src,
            dst,
            efeat,
            in_ptr,
            in_edges,
            node_ptr,
            edge_ptr,
            receivers,
            labels: graphs.iter().map(|g| g.label).collect(),
            node_labels,
        })
    }

    pub fn num_graphs(&self) -> usize {
        self.node_ptr.len() - 1
    }

    pub fn num_nodes(&self) -> usize {
        self.x.nrows()
    }

    pub fn graph_nodes(&self, g: usize) -> std::ops::Range<usize> {
        self.node_ptr[g]..self.node_ptr[g + 1]
    }

    pub fn graph_edges(&self, g: usize) -> std::ops::Range<usize> {
        self.edge_ptr[g]..self.edge_ptr[g + 1]
    }

    pub fn label(&self, g: usize) -> u8 {
        self.labels[g]
    }

    pub fn node_labels(&self) -> &[f64] {
        &self.node_labels
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    h_in: Array2<f64>,
    nw: Array2<f64>,
    /// Attention-weighted sum of `a1` per destination node.
    sagg: Array2<f64>,
    alpha: Array2<f64>,
    agg: Array2<f64>,
    pre: Array2<f64>,
}

/// Result of a batched forward pass.
#[derive(Debug, Clone)]
pub(crate) struct ForwardPass {
    layers: Vec<LayerCache>,
    h_final: Array2<f64>,
    all_alpha: Vec<Array2<f64>>,
    pub scores: Vec<f64>,
    pub beta: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ForwardPass {
    pub fn graph_output(&self, batch: &Batch, g: usize, with_attention: bool) -> GraphOutput {
        let nodes = batch.graph_nodes(g);
        let edges = batch.graph_edges(g);
        let attention = if with_attention {
            self.all_alpha
                .iter()
                .map(|a| {
                    (0..a.ncols())
                        .map(|h| a.slice(s![edges.clone(), h]).to_vec())
                        .collect()
                })
                .collect()
        } else {
            vec![]
        };
        let logit = self.logits[g];
        GraphOutput {
            node_scores: self.scores[nodes.clone()].to_vec(),
            attention,
            node_weights: self.beta[nodes].to_vec(),
            graph_logit: logit,
            probability: sigmoid(logit),
        }
    }
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

fn add_row_vector(a: &mut Array2<f64>, b: &Array1<f64>) {
    for mut row in a.rows_mut() {
        row += b;
    }
}

fn matmul(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let mut c = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, a, b, 0.0, &mut c);
    c
}

/// Post-ReLU first value layer of one edge, `relu(node_part + b1 + efeat · W1e)`.
/// Recomputed in the reverse pass rather than cached: it is cheap, and the
/// per-edge buffer would be the largest allocation of the pass.
#[inline]
fn value_hidden(row: &mut [f64], node_part: &[f64], b1: &[f64], efeat: &[f64], w1e: &[f64]) {
    let width = row.len();
    for ((r, a), b) in row.iter_mut().zip(node_part).zip(b1) {
        *r = a + b;
    }
    for (k, &x) in efeat.iter().enumerate() {
        for (r, w) in row.iter_mut().zip(&w1e[k * width..(k + 1) * width]) {
            *r += x * w;
        }
    }
    for r in row.iter_mut() {
        *r = r.max(0.0);
    }
}

/// Forward pass. With `keep_cache` every intermediate needed by [`backward`] is retained.
pub(crate) fn forward(model: &Packed, cfg: &ModelConfig, batch: &Batch, keep_cache: bool) -> ForwardPass {
    let d = Dims::new(cfg);
    let n = batch.num_nodes();
    let m = batch.src.len();
    let heads = d.heads;
    let dh = d.d_head;
    let hd = heads * dh;
    let hph = heads * d.ph;
    let scale = 1.0 / (dh as f64).sqrt();
    let (q0, k0, p0, s0, cols) = (d.q0(), d.k0(), d.p0(), d.s0(), d.cols());

    let mut h = matmul(&batch.x.view(), &model.embed_w.view());
    add_row_vector(&mut h, &model.embed_b);

    let mut caches = Vec::with_capacity(cfg.num_layers);
    let mut all_alpha = Vec::with_capacity(cfg.num_layers);
    for (l, layer) in model.layers.iter().enumerate() {
        let nw = matmul(&h.view(), &layer.w_node.view());
        let nw_s = nw.as_slice().expect("standard layout");

        // psi.b adds the same constant to every logit competing in a softmax
        // over incoming edges, so it cancels exactly and is omitted here.
        let mut logits = matmul(&batch.efeat.view(), &layer.psi_w.view());
        {
            let lg = logits.as_slice_mut().unwrap();
            for e in 0..m {
                let (u, v) = (batch.src[e], batch.dst[e]);
                for hh in 0..heads {
                    let q = &nw_s[v * cols + q0 + hh * dh..v * cols + q0 + (hh + 1) * dh];
                    let k = &nw_s[u * cols + k0 + hh * dh..u * cols + k0 + (hh + 1) * dh];
                    let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
                    lg[e * heads + hh] += dot * scale;
                }
            }
        }

        let mut alpha = Array2::zeros((m, heads));
        {
            let lg = logits.as_slice().unwrap();
            let al = alpha.as_slice_mut().unwrap();
            for v in 0..n {
                let incoming = &batch.in_edges[batch.in_ptr[v]..batch.in_ptr[v + 1]];
                if incoming.is_empty() {
                    continue;
                }
                for hh in 0..heads {
                    let max = incoming.iter().map(|&e| lg[e * heads + hh]).fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for &e in incoming {
                        let w = (lg[e * heads + hh] - max).exp();
                        al[e * heads + hh] = w;
                        sum += w;
                    }
                    for &e in incoming {
                        al[e * heads + hh] /= sum;
                    }
                }
            }
        }

        // The value network's second layer is affine and the attention weights
        // of a node with incoming edges sum to one, so
        // sum_e alpha_e (a1_e W2 + b2) = (sum_e alpha_e a1_e) W2 + b2
        // and W2 is applied once per node instead of once per edge.
        let mut sagg = Array2::<f64>::zeros((n, hph));
        {
            let b1 = layer.b1.as_slice().expect("standard layout");
            let w1e = layer.w1e.as_slice().expect("standard layout");
            let ef = batch.efeat.as_slice().expect("standard layout");
            let al = alpha.as_slice().unwrap();
            let sg = sagg.as_slice_mut().unwrap();
            let mut row = vec![0.0; hph];
            for v in 0..n {
                for &e in &batch.in_edges[batch.in_ptr[v]..batch.in_ptr[v + 1]] {
                    let u = batch.src[e];
                    value_hidden(&mut row, &nw_s[u * cols + p0..u * cols + p0 + hph], b1, &ef[e * d.e..(e + 1) * d.e], w1e);
                    for hh in 0..heads {
                        let a = al[e * heads + hh];
                        let block = hh * d.ph..(hh + 1) * d.ph;
                        for (o, x) in sg[v * hph..(v + 1) * hph][block.clone()].iter_mut().zip(&row[block]) {
                            *o += a * x;
                        }
                    }
                }
            }
        }
        let mut agg = Array2::<f64>::zeros((n, hd));
        for hh in 0..heads {
            let sh = sagg.slice(s![.., hh * d.ph..(hh + 1) * d.ph]);
            let mut out = agg.slice_mut(s![.., hh * dh..(hh + 1) * dh]);
            general_mat_mul(1.0, &sh, &layer.w2[hh].view(), 0.0, &mut out);
        }
        for v in 0..n {
            if batch.in_ptr[v + 1] > batch.in_ptr[v] {
                let mut row = agg.row_mut(v);
                row += &layer.b2;
            }
        }

        let mut pre = nw.slice(s![.., s0..cols]).to_owned();
        general_mat_mul(1.0, &agg.view(), &layer.w_out.view(), 1.0, &mut pre);
        add_row_vector(&mut pre, &layer.b_out);

        let mut next = pre.clone();
        if l + 1 < cfg.num_layers {
            relu_inplace(&mut next);
        }
        all_alpha.push(alpha.clone());
        if keep_cache {
            caches.push(LayerCache {
                h_in: h,
                nw,
                sagg,
                alpha,
                agg,
                pre,
            });
        }
        h = next;
    }

    let r = h.dot(&model.read_w);
    let scores: Vec<f64> = r.iter().map(|v| (v + model.read_b).tanh()).collect();

    let last_alpha = all_alpha.last().cloned().unwrap_or_else(|| Array2::zeros((m, heads)));
    let mut raw = vec![0.0; n];
    for e in 0..m {
        let s: f64 = last_alpha.row(e).sum();
        raw[batch.src[e]] += s / heads as f64;
    }

    let mut beta = vec![0.0; n];
    let mut logits = Vec::with_capacity(batch.num_graphs());
    for g in 0..batch.num_graphs() {
        let nodes = batch.graph_nodes(g);
        if nodes.is_empty() {
            logits.push(EMPTY_GRAPH_LOGIT);
            continue;
        }
        let count = nodes.len() as f64;
        let receivers = batch.receivers[g];
        for v in nodes.clone() {
            beta[v] = if receivers == 0 {
                1.0 / count
            } else if cfg.normalize_beta {
                raw[v] / receivers as f64
            } else {
                raw[v]
            };
        }
        logits.push(nodes.map(|v| beta[v] * scores[v]).sum());
    }

    ForwardPass {
        layers: caches,
        h_final: h,
        all_alpha,
        scores,
        beta,
        logits,
    }
}

/// Reverse pass. `d_scores` is the direct loss gradient w.r.t. each node score and
/// `d_logits` w.r.t. each graph logit; the readout coupling is added here.
pub(crate) fn backward(
    model: &Packed,
    cfg: &ModelConfig,
    batch: &Batch,
    pass: &ForwardPass,
    d_scores: &[f64],
    d_logits: &[f64],
) -> Packed {
    assert_eq!(pass.layers.len(), cfg.num_layers, "forward pass was run without cache");
    let d = Dims::new(cfg);
    let n = batch.num_nodes();
    let m = batch.src.len();
    let heads = d.heads;
    let dh = d.d_head;
    let hph = heads * d.ph;
    let scale = 1.0 / (dh as f64).sqrt();
    let (q0, k0, p0, s0, cols) = (d.q0(), d.k0(), d.p0(), d.s0(), d.cols());
    let mut grad = Packed::zeros(cfg);

    // Readout: logit = sum_v beta_v y_v.
    let mut dy = d_scores.to_vec();
    let mut d_raw = vec![0.0; n];
    #[allow(clippy::needless_range_loop)] // `g` also indexes the batch ranges.
    for g in 0..batch.num_graphs() {
        let nodes = batch.graph_nodes(g);
        if nodes.is_empty() {
            continue;
        }
        let dz = d_logits[g];
        let receivers = batch.receivers[g];
        for v in nodes {
            dy[v] += dz * pass.beta[v];
            if receivers > 0 {
                let norm = if cfg.normalize_beta { receivers as f64 } else { 1.0 };
                d_raw[v] = dz * pass.scores[v] / norm;
            }
        }
    }
    let mut d_alpha_last = Array2::<f64>::zeros((m, heads));
    for e in 0..m {
        let g = d_raw[batch.src[e]] / heads as f64;
        d_alpha_last.row_mut(e).fill(g);
    }

    let dr = Array1::from_iter(dy.iter().zip(&pass.scores).map(|(g, y)| g * (1.0 - y * y)));
    grad.read_w = pass.h_final.t().dot(&dr);
    grad.read_b = dr.sum();
    let mut dh_cur = Array2::zeros((n, d.d_model));
    for (v, mut row) in dh_cur.rows_mut().into_iter().enumerate() {
        row.scaled_add(dr[v], &model.read_w);
    }

    for l in (0..cfg.num_layers).rev() {
        let layer = &model.layers[l];
        let cache = &pass.layers[l];
        let gl = &mut grad.layers[l];

        let mut dpre = dh_cur;
        if l + 1 < cfg.num_layers {
            ndarray::Zip::from(&mut dpre).and(&cache.pre).for_each(|g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
        }

        general_mat_mul(1.0, &cache.agg.t(), &dpre.view(), 1.0, &mut gl.w_out);
        gl.b_out += &dpre.sum_axis(Axis(0));
        let dagg = matmul(&dpre.view(), &layer.w_out.t());

        let mut dnw = Array2::<f64>::zeros((n, cols));
        dnw.slice_mut(s![.., s0..cols]).assign(&dpre);

        let mut dalpha = if l + 1 == cfg.num_layers {
            d_alpha_last.clone()
        } else {
            Array2::zeros((m, heads))
        };
        let mut dsagg = Array2::<f64>::zeros((n, hph));
        for hh in 0..heads {
            let dag_h = dagg.slice(s![.., hh * dh..(hh + 1) * dh]);
            let sh = cache.sagg.slice(s![.., hh * d.ph..(hh + 1) * d.ph]);
            general_mat_mul(1.0, &sh.t(), &dag_h, 1.0, &mut gl.w2[hh]);
            let mut out = dsagg.slice_mut(s![.., hh * d.ph..(hh + 1) * d.ph]);
            general_mat_mul(1.0, &dag_h, &layer.w2[hh].t(), 0.0, &mut out);
        }
        for v in 0..n {
            if batch.in_ptr[v + 1] > batch.in_ptr[v] {
                gl.b2 += &dagg.row(v);
            }
        }
        // The b2 term's alpha gradient is constant over a node's incoming edges
        // and vanishes under the softmax Jacobian, so it is not accumulated.
        {
            let nw_s = cache.nw.as_slice().unwrap();
            let b1 = layer.b1.as_slice().expect("standard layout");
            let w1e = layer.w1e.as_slice().expect("standard layout");
            let dsg = dsagg.as_slice().unwrap();
            let al = cache.alpha.as_slice().unwrap();
            let ef = batch.efeat.as_slice().expect("standard layout");
            let da = dalpha.as_slice_mut().unwrap();
            let db1 = gl.b1.as_slice_mut().unwrap();
            let dw1e = gl.w1e.as_slice_mut().expect("standard layout");
            let dn = dnw.as_slice_mut().unwrap();
            let mut a1e = vec![0.0; hph];
            let mut dz = vec![0.0; hph];
            for e in 0..m {
                let (u, v) = (batch.src[e], batch.dst[e]);
                let efe = &ef[e * d.e..(e + 1) * d.e];
                value_hidden(&mut a1e, &nw_s[u * cols + p0..u * cols + p0 + hph], b1, efe, w1e);
                let dsv = &dsg[v * hph..(v + 1) * hph];
                for hh in 0..heads {
                    let block = hh * d.ph..(hh + 1) * d.ph;
                    da[e * heads + hh] += a1e[block.clone()].iter().zip(&dsv[block.clone()]).map(|(a, b)| a * b).sum::<f64>();
                    let a = al[e * heads + hh];
                    for ((o, &x), &g) in dz[block.clone()].iter_mut().zip(&a1e[block.clone()]).zip(&dsv[block]) {
                        *o = if x > 0.0 { a * g } else { 0.0 };
                    }
                }
                for (o, g) in db1.iter_mut().zip(&dz) {
                    *o += g;
                }
                for (k, &x) in efe.iter().enumerate() {
                    for (o, g) in dw1e[k * hph..(k + 1) * hph].iter_mut().zip(&dz) {
                        *o += x * g;
                    }
                }
                for (o, g) in dn[u * cols + p0..u * cols + p0 + hph].iter_mut().zip(&dz) {
                    *o += g;
                }
            }
        }

        // Softmax backward per destination and head.
        let mut ds = Array2::<f64>::zeros((m, heads));
        {
            let al = cache.alpha.as_slice().unwrap();
            let da = dalpha.as_slice().unwrap();
            let dss = ds.as_slice_mut().unwrap();
            for v in 0..n {
                let incoming = &batch.in_edges[batch.in_ptr[v]..batch.in_ptr[v + 1]];
                for hh in 0..heads {
                    let dot: f64 = incoming.iter().map(|&e| al[e * heads + hh] * da[e * heads + hh]).sum();
                    for &e in incoming {
                        dss[e * heads + hh] = al[e * heads + hh] * (da[e * heads + hh] - dot);
                    }
                }
            }
        }

        {
            let nw_s = cache.nw.as_slice().unwrap();
            let dss = ds.as_slice().unwrap();
            let dn = dnw.as_slice_mut().unwrap();
            for e in 0..m {
                let (u, v) = (batch.src[e], batch.dst[e]);
                for hh in 0..heads {
                    let g = dss[e * heads + hh] * scale;
                    if g == 0.0 {
                        continue;
                    }
                    let qo = v * cols + q0 + hh * dh;
                    let ko = u * cols + k0 + hh * dh;
                    for i in 0..dh {
                        dn[qo + i] += g * nw_s[ko + i];
                        dn[ko + i] += g * nw_s[qo + i];
                    }
                }
            }
        }
        general_mat_mul(1.0, &batch.efeat.t(), &ds.view(), 1.0, &mut gl.psi_w);
        // psi.b has an identically zero gradient.

        general_mat_mul(1.0, &cache.h_in.t(), &dnw.view(), 1.0, &mut gl.w_node);
        dh_cur = matmul(&dnw.view(), &layer.w_node.t());
    }

    general_mat_mul(1.0, &batch.x.t(), &dh_cur.view(), 1.0, &mut grad.embed_w);
    grad.embed_b = dh_cur.sum_axis(Axis(0));
    grad
}
