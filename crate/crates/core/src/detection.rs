//! Detection-stream data types, box geometry and the line-delimited dataset format.
//!
//! Boxes are normalized to the frame: `(x, y)` is the top-left corner and
//! `(w, h)` the extent, all in `[0, 1]`. Every constructor validates the
//! geometric invariants so downstream code never sees a degenerate box.
//!
//! On disk a dataset is one JSON object per line:
//!
//! ```text
//! {"video_id":"vid00000","label":1,"frames":[{"t":0,"boxes":[[x,y,w,h,c]],"gt":[[x,y,w,h]]}]}
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed on the right/bottom frame edge.
pub const EDGE_TOLERANCE: f64 = 1e-9;

/// Axis-aligned rectangle in normalized frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    /// Checks the geometric invariants, returning the offending field on failure.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        let fields = [("x", self.x), ("y", self.y), ("w", self.w), ("h", self.h)];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err((name, format!("non-finite value {v}")));
            }
        }
        if self.x < 0.0 {
            return Err(("x", format!("{} < 0", self.x)));
        }
        if self.y < 0.0 {
            return Err(("y", format!("{} < 0", self.y)));
        }
        if self.w <= 0.0 {
            return Err(("w", format!("{} <= 0", self.w)));
        }
        if self.h <= 0.0 {
            return Err(("h", format!("{} <= 0", self.h)));
        }
        if self.x + self.w > 1.0 + EDGE_TOLERANCE {
            return Err(("w", format!("x + w = {} exceeds 1", self.x + self.w)));
        }
        if self.y + self.h > 1.0 + EDGE_TOLERANCE {
            return Err(("h", format!("y + h = {} exceeds 1", self.y + self.h)));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Anything that has a box footprint.
pub trait BoxGeometry {
    fn rect(&self) -> Rect;
}

impl BoxGeometry for Rect {
    fn rect(&self) -> Rect {
        *self
    }
}

/// One detector output: geometry plus confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    rect: Rect,
    confidence: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, c: f64) -> Result<Self> {
        let rect = Rect { x, y, w, h };
        rect.validate()
            .map_err(|(field, reason)| Error::Invariant(format!("bounding box field `{field}`: {reason}")))?;
        check_confidence(c).map_err(|reason| Error::Invariant(format!("bounding box field `c`: {reason}")))?;
        Ok(BoundingBox {
            rect,
            confidence: c,
        })
    }

    pub fn x(&self) -> f64 {
        self.rect.x
    }
    pub fn y(&self) -> f64 {
        self.rect.y
    }
    pub fn w(&self) -> f64 {
        self.rect.w
    }
    pub fn h(&self) -> f64 {
        self.rect.h
    }
    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.rect.x, self.rect.y, self.rect.w, self.rect.h, self.confidence]
    }
}

impl BoxGeometry for BoundingBox {
    fn rect(&self) -> Rect {
        self.rect
    }
}

fn check_confidence(c: f64) -> std::result::Result<(), String> {
    if !c.is_finite() || !(0.0..=1.0).contains(&c) {
        return Err(format!("confidence {c} outside [0, 1]"));
    }
    Ok(())
}

/// Annotated pathology region on a frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBox {
    rect: Rect,
}

impl GroundTruthBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let rect = Rect { x, y, w, h };
        rect.validate()
            .map_err(|(field, reason)| Error::Invariant(format!("ground-truth box field `{field}`: {reason}")))?;
        Ok(GroundTruthBox { rect })
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.rect.x, self.rect.y, self.rect.w, self.rect.h]
    }
}

impl BoxGeometry for GroundTruthBox {
    fn rect(&self) -> Rect {
        self.rect
    }
}

/// Intersection over union of two boxes; 0 when they do not overlap with positive area.
pub fn iou(a: &impl BoxGeometry, b: &impl BoxGeometry) -> f64 {
    let a = a.rect();
    let b = b.rect();
    let iw = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let ih = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Center of a box, `(x + w/2, y + h/2)`.
pub fn box_center(b: &impl BoxGeometry) -> (f64, f64) {
    let r = b.rect();
    (r.x + r.w / 2.0, r.y + r.h / 2.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetections {
    pub frame_index: u64,
    pub boxes: Vec<BoundingBox>,
    pub gt_boxes: Vec<GroundTruthBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    video_id: String,
    label: u8,
    frames: Vec<FrameDetections>,
}

impl VideoRecord {
    /// Validates frame ordering, label range and the "no ground truth on negatives" rule.
    pub fn new(video_id: impl Into<String>, label: u8, frames: Vec<FrameDetections>) -> Result<Self> {
        let video_id = video_id.into();
        let fail = |frame_index: Option<u64>, field: &str, reason: String| Error::MalformedRecord {
            video_id: video_id.clone(),
            frame_index,
            field: field.to_string(),
            reason,
        };
        if label > 1 {
            return Err(fail(None, "label", format!("label {label} is not 0 or 1")));
        }
        if frames.is_empty() {
            return Err(fail(None, "frames", "video has no frames".into()));
        }
        for pair in frames.windows(2) {
            if pair[1].frame_index <= pair[0].frame_index {
                return Err(fail(
                    Some(pair[1].frame_index),
                    "t",
                    format!("frame index not strictly increasing after {}", pair[0].frame_index),
                ));
            }
        }
        if label == 0 {
            if let Some(f) = frames.iter().find(|f| !f.gt_boxes.is_empty()) {
                return Err(Error::Invariant(format!(
                    "video `{video_id}` is labeled negative but frame {} carries ground-truth boxes",
                    f.frame_index
                )));
            }
        }
        Ok(VideoRecord {
            video_id,
            label,
            frames,
        })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn label(&self) -> u8 {
        self.label
    }

    pub fn frames(&self) -> &[FrameDetections] {
        &self.frames
    }

    pub fn num_detections(&self) -> usize {
        self.frames.iter().map(|f| f.boxes.len()).sum()
    }

    /// Same record with the detection boxes of every frame replaced.
    pub(crate) fn with_boxes(&self, boxes: Vec<Vec<BoundingBox>>) -> VideoRecord {
        debug_assert_eq!(boxes.len(), self.frames.len());
        let frames = self
            .frames
            .iter()
            .zip(boxes)
            .map(|(f, boxes)| FrameDetections {
                frame_index: f.frame_index,
                boxes,
                gt_boxes: f.gt_boxes.clone(),
            })
            .collect();
        VideoRecord {
            video_id: self.video_id.clone(),
            label: self.label,
            frames,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Guesses the split from a file name such as `train.jsonl`; defaults to `Test`.
    pub fn from_path(path: &Path) -> Split {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        if stem.contains("train") {
            Split::Train
        } else if stem.contains("val") {
            Split::Val
        } else {
            Split::Test
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<VideoRecord>,
    split: Split,
}

impl Dataset {
    pub fn new(records: Vec<VideoRecord>, split: Split) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.video_id()) {
                return Err(Error::Invariant(format!("duplicate video_id `{}`", r.video_id())));
            }
        }
        Ok(Dataset { records, split })
    }

    pub fn records(&self) -> &[VideoRecord] {
        &self.records
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `(positives, negatives)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.records.iter().filter(|r| r.label() == 1).count();
        (pos, self.records.len() - pos)
    }

    pub fn find(&self, video_id: &str) -> Option<&VideoRecord> {
        self.records.iter().find(|r| r.video_id() == video_id)
    }

    pub(crate) fn map_records(&self, f: impl FnMut(&VideoRecord) -> VideoRecord) -> Dataset {
        Dataset {
            records: self.records.iter().map(f).collect(),
            split: self.split,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawFrame {
    t: u64,
    boxes: Vec<[f64; 5]>,
    gt: Vec<[f64; 4]>,
}

#[derive(Serialize, Deserialize)]
struct RawVideo {
    video_id: String,
    label: u8,
    frames: Vec<RawFrame>,
}

impl RawVideo {
    fn from_record(r: &VideoRecord) -> Self {
        RawVideo {
            video_id: r.video_id.clone(),
            label: r.label,
            frames: r
                .frames
                .iter()
                .map(|f| RawFrame {
                    t: f.frame_index,
                    boxes: f.boxes.iter().map(BoundingBox::to_array).collect(),
                    gt: f.gt_boxes.iter().map(GroundTruthBox::to_array).collect(),
                })
                .collect(),
        }
    }

    fn into_record(self) -> Result<VideoRecord> {
        let video_id = self.video_id;
        let mut frames = Vec::with_capacity(self.frames.len());
        for raw in self.frames {
            let t = raw.t;
            let malformed = |field: &str, reason: String| Error::MalformedRecord {
                video_id: video_id.clone(),
                frame_index: Some(t),
                field: field.to_string(),
                reason,
            };
            let mut boxes = Vec::with_capacity(raw.boxes.len());
            for (i, [x, y, w, h, c]) in raw.boxes.into_iter().enumerate() {
                let rect = Rect { x, y, w, h };
                rect.validate()
                    .map_err(|(field, reason)| malformed(&format!("boxes[{i}].{field}"), reason))?;
                check_confidence(c).map_err(|reason| malformed(&format!("boxes[{i}].c"), reason))?;
                boxes.push(BoundingBox {
                    rect,
                    confidence: c,
                });
            }
            let mut gt_boxes = Vec::with_capacity(raw.gt.len());
            for (i, [x, y, w, h]) in raw.gt.into_iter().enumerate() {
                let rect = Rect { x, y, w, h };
                rect.validate()
                    .map_err(|(field, reason)| malformed(&format!("gt[{i}].{field}"), reason))?;
                gt_boxes.push(GroundTruthBox { rect });
            }
            frames.push(FrameDetections {
                frame_index: t,
                boxes,
                gt_boxes,
            });
        }
        VideoRecord::new(video_id, self.label, frames)
    }
}

/// Serializes one record as a single JSON line (no trailing newline).
pub fn record_to_line(record: &VideoRecord) -> String {
    serde_json::to_string(&RawVideo::from_record(record)).expect("record serialization cannot fail")
}

/// Parses and validates one JSON line.
pub fn record_from_line(line: &str) -> Result<VideoRecord> {
    let raw: RawVideo = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    raw.into_record()
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawVideo = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(raw.into_record()?);
    }
    Dataset::new(records, Split::from_path(path))
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in dataset.records() {
        writeln!(out, "{}", record_to_line(r)).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
