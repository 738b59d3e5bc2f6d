//! Spatiotemporal graph construction.
//!
//! Nodes are the detections that pass the confidence gate. Two nodes on
//! distinct frames at most `frame_window` apart are linked when their IoU
//! strictly exceeds `iou_threshold`; every link is stored in both directions
//! with the feature vector `[iou, center distance, frame gap]`.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detection::{box_center, iou, BoundingBox, GroundTruthBox, VideoRecord};
use crate::error::{Error, Result};

/// Which box attributes become node input features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureMask {
    pub position: bool,
    pub size: bool,
    pub confidence: bool,
}

impl Default for FeatureMask {
    fn default() -> Self {
        FeatureMask {
            position: false,
            size: true,
            confidence: true,
        }
    }
}

impl FeatureMask {
    pub const ALL: FeatureMask = FeatureMask {
        position: true,
        size: true,
        confidence: true,
    };

    pub fn dim(&self) -> usize {
        2 * usize::from(self.position) + 2 * usize::from(self.size) + usize::from(self.confidence)
    }

    pub fn is_empty(&self) -> bool {
        self.dim() == 0
    }

    /// Features in canonical `[x, y, w, h, c]` order, filtered by the mask.
    pub fn extract(&self, b: &BoundingBox) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.dim());
        if self.position {
            f.extend([b.x(), b.y()]);
        }
        if self.size {
            f.extend([b.w(), b.h()]);
        }
        if self.confidence {
            f.push(b.confidence());
        }
        f
    }
}

impl fmt::Display for FeatureMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.position {
            parts.push("position");
        }
        if self.size {
            parts.push("size");
        }
        if self.confidence {
            parts.push("confidence");
        }
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for FeatureMask {
    type Err = Error;

    /// Parses `size+confidence`, `position,size` and similar lists.
    fn from_str(s: &str) -> Result<Self> {
        let mut m = FeatureMask {
            position: false,
            size: false,
            confidence: false,
        };
        for part in s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "position" | "pos" => m.position = true,
                "size" => m.size = true,
                "confidence" | "conf" => m.confidence = true,
                other => return Err(Error::Config(format!("unknown node feature `{other}`"))),
            }
        }
        if m.is_empty() {
            return Err(Error::Config("feature mask must select at least one feature".into()));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub frame_window: u32,
    pub iou_threshold: f64,
    pub conf_threshold: f64,
    pub feature_mask: FeatureMask,
    pub use_edge_features: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            frame_window: 5,
            iou_threshold: 0.0,
            conf_threshold: 0.01,
            feature_mask: FeatureMask::default(),
            use_edge_features: true,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_window < 1 {
            return Err(Error::Config("frame_window must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::Config(format!("iou_threshold {} outside [0, 1]", self.iou_threshold)));
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return Err(Error::Config(format!("conf_threshold {} outside [0, 1]", self.conf_threshold)));
        }
        if self.feature_mask.is_empty() {
            return Err(Error::Config("feature_mask must be nonempty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Node {
    #[serde(rename = "id")]
    pub node_id: usize,
    #[serde(rename = "t")]
    pub frame_index: u64,
    #[serde(rename = "box", serialize_with = "ser_box")]
    pub bbox: BoundingBox,
    pub features: Vec<f64>,
    pub label: i8,
}

fn ser_box<S: serde::Serializer>(b: &BoundingBox, s: S) -> std::result::Result<S::Ok, S::Error> {
    b.to_array().serialize(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    /// `[iou, center distance, frame gap]`.
    pub features: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VideoGraph {
    pub video_id: String,
    pub label: u8,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

impl VideoGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node_labels(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| f64::from(n.label)).collect()
    }
}

/// +1 when the box overlaps some ground-truth box with positive IoU, else −1.
pub fn label_node(bbox: &BoundingBox, gt_boxes: &[GroundTruthBox]) -> i8 {
    let best = gt_boxes.iter().map(|g| iou(bbox, g)).fold(0.0, f64::max);
    if best > 0.0 {
        1
    } else {
        -1
    }
}

/// Edge features for a pair of nodes.
pub fn edge_features(a: &Node, b: &Node) -> [f64; 3] {
    let (ax, ay) = box_center(&a.bbox);
    let (bx, by) = box_center(&b.bbox);
    [
        iou(&a.bbox, &b.bbox),
        (ax - bx).hypot(ay - by),
        a.frame_index.abs_diff(b.frame_index) as f64,
    ]
}

pub fn build_graph(record: &VideoRecord, cfg: &GraphConfig) -> VideoGraph {
    let mut nodes = Vec::new();
    for frame in record.frames() {
        for b in frame.boxes.iter().filter(|b| b.confidence() > cfg.conf_threshold) {
            nodes.push(Node {
                node_id: nodes.len(),
                frame_index: frame.frame_index,
                bbox: *b,
                features: cfg.feature_mask.extract(b),
                label: label_node(b, &frame.gt_boxes),
            });
        }
    }

    let window = u64::from(cfg.frame_window);
    let mut edges = Vec::new();
    // Nodes are sorted by frame index, so the candidates for `i` are a contiguous run after it.
    for i in 0..nodes.len() {
        let ti = nodes[i].frame_index;
        for j in i + 1..nodes.len() {
            let tj = nodes[j].frame_index;
            if tj == ti {
                continue;
            }
            if tj - ti > window {
                break;
            }
            let features = edge_features(&nodes[i], &nodes[j]);
            if features[0] > cfg.iou_threshold {
                edges.push(Edge { src: i, dst: j, features });
                edges.push(Edge { src: j, dst: i, features });
            }
        }
    }

    VideoGraph {
        video_id: record.video_id().to_string(),
        label: record.label(),
        nodes,
        edges,
    }
}

/// Writes one graph per line.
pub fn save_graphs<'a>(graphs: impl IntoIterator<Item = &'a VideoGraph>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for g in graphs {
        let line = serde_json::to_string(g).expect("graph serialization cannot fail");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
