//! Seeded synthetic detection streams.
//!
//! Each video is simulated independently from its own sub-seed
//! (`derive_seed(seed, video_index)`), so generation order never changes the output.
//!
//! A video of `T` frames is built from four sources of detections:
//!
//! * **pathology tracks** (positives only): a box of fixed size whose center
//!   follows a Gaussian random walk with reflecting borders. The walk is the
//!   ground truth; the detector sees it with a small jitter, confidence drawn
//!   from `Beta(track_conf_alpha, track_conf_beta)`, and misses it with
//!   probability `detect_drop_prob`.
//! * **decoy tracks** (both classes): temporally coherent detections of normal
//!   anatomy, identical in motion to pathology tracks but scored with the
//!   clutter confidence distribution and never annotated.
//! * **clutter**: `Poisson(clutter_rate)` uniformly placed boxes per frame.
//! * **spurious bursts** (negatives only, probability `spurious_burst_prob`):
//!   a few consecutive frames, each with one high-confidence box at a random
//!   location.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::detection::{BoundingBox, Dataset, FrameDetections, GroundTruthBox, Split, VideoRecord};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, streams};

/// Smallest width/height emitted by the generator and the perturbation.
pub const MIN_BOX_SIZE: f64 = 0.005;

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: u32,
    pub max: u32,
}

impl CountRange {
    pub const fn new(min: u32, max: u32) -> Self {
        CountRange { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> u32 {
        rng.random_range(self.min..=self.max)
    }
}

/// Closed real interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanRange {
    pub min: f64,
    pub max: f64,
}

impl SpanRange {
    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..=self.max)
        } else {
            self.min
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_videos: usize,
    pub positive_fraction: f64,
    pub frames_min: u32,
    pub frames_max: u32,
    pub tracks_per_positive: CountRange,
    pub track_length: CountRange,
    pub drift_sigma: f64,
    pub track_conf_alpha: f64,
    pub track_conf_beta: f64,
    pub clutter_rate: f64,
    pub clutter_conf_alpha: f64,
    pub clutter_conf_beta: f64,
    pub detect_drop_prob: f64,
    pub spurious_burst_prob: f64,
    /// Low-confidence coherent tracks present in every video.
    pub decoy_tracks: CountRange,
    pub decoy_length: CountRange,
    /// Width and height of tracks, clutter and bursts are drawn from this range.
    pub box_size: SpanRange,
    pub burst_length: CountRange,
    /// Std of the detector's localization error around a ground-truth box.
    pub detect_jitter_sigma: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_videos: 400,
            positive_fraction: 0.5,
            frames_min: 60,
            frames_max: 180,
            tracks_per_positive: CountRange::new(1, 2),
            track_length: CountRange::new(8, 24),
            drift_sigma: 0.004,
            track_conf_alpha: 5.0,
            track_conf_beta: 2.0,
            clutter_rate: 0.05,
            clutter_conf_alpha: 2.0,
            clutter_conf_beta: 5.0,
            detect_drop_prob: 0.1,
            spurious_burst_prob: 0.5,
            decoy_tracks: CountRange::new(1, 2),
            decoy_length: CountRange::new(8, 24),
            box_size: SpanRange { min: 0.06, max: 0.2 },
            burst_length: CountRange::new(3, 8),
            detect_jitter_sigma: 0.005,
        }
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::Config(format!("{name} = {v} must be finite and > 0")));
    }
    Ok(())
}

fn check_range(name: &str, r: CountRange, min_allowed: u32) -> Result<()> {
    if r.min < min_allowed || r.min > r.max {
        return Err(Error::Config(format!(
            "{name} = [{}, {}] must satisfy {min_allowed} <= min <= max",
            r.min, r.max
        )));
    }
    Ok(())
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames_min < 1 || self.frames_min > self.frames_max {
            return Err(Error::Config(format!(
                "frame bounds [{}, {}] must satisfy 1 <= frames_min <= frames_max",
                self.frames_min, self.frames_max
            )));
        }
        check_prob("positive_fraction", self.positive_fraction)?;
        check_prob("detect_drop_prob", self.detect_drop_prob)?;
        check_prob("spurious_burst_prob", self.spurious_burst_prob)?;
        check_range("tracks_per_positive", self.tracks_per_positive, 1)?;
        check_range("track_length", self.track_length, 1)?;
        check_range("decoy_tracks", self.decoy_tracks, 0)?;
        check_range("decoy_length", self.decoy_length, 1)?;
        check_range("burst_length", self.burst_length, 1)?;
        check_nonneg("drift_sigma", self.drift_sigma)?;
        check_nonneg("clutter_rate", self.clutter_rate)?;
        check_nonneg("detect_jitter_sigma", self.detect_jitter_sigma)?;
        check_positive("track_conf_alpha", self.track_conf_alpha)?;
        check_positive("track_conf_beta", self.track_conf_beta)?;
        check_positive("clutter_conf_alpha", self.clutter_conf_alpha)?;
        check_positive("clutter_conf_beta", self.clutter_conf_beta)?;
        let s = self.box_size;
        if !(s.min >= MIN_BOX_SIZE && s.min <= s.max && s.max <= 1.0) {
            return Err(Error::Config(format!(
                "box_size = [{}, {}] must lie in [{MIN_BOX_SIZE}, 1] with min <= max",
                s.min, s.max
            )));
        }
        Ok(())
    }
}

/// Synthetic stand-in for swapping detector checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub conf_noise_sigma: f64,
    pub box_jitter_sigma: f64,
    pub drop_prob: f64,
    pub spurious_rate: f64,
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        check_nonneg("conf_noise_sigma", self.conf_noise_sigma)?;
        check_nonneg("box_jitter_sigma", self.box_jitter_sigma)?;
        check_nonneg("spurious_rate", self.spurious_rate)?;
        check_prob("drop_prob", self.drop_prob)
    }

    pub fn is_identity(&self) -> bool {
        self.conf_noise_sigma == 0.0 && self.box_jitter_sigma == 0.0 && self.drop_prob == 0.0 && self.spurious_rate == 0.0
    }
}

/// Clamps a proposed box into the frame, keeping its size at least [`MIN_BOX_SIZE`].
fn fit_box(x: f64, y: f64, w: f64, h: f64) -> (f64, f64, f64, f64) {
    let w = w.clamp(MIN_BOX_SIZE, 1.0);
    let h = h.clamp(MIN_BOX_SIZE, 1.0);
    (x.clamp(0.0, 1.0 - w), y.clamp(0.0, 1.0 - h), w, h)
}

fn reflect(v: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    let mut v = v;
    // A few reflections always suffice for steps much smaller than the span.
    for _ in 0..4 {
        if v < lo {
            v = 2.0 * lo - v;
        } else if v > hi {
            v = 2.0 * hi - v;
        } else {
            break;
        }
    }
    v.clamp(lo, hi)
}

fn beta(alpha: f64, beta: f64) -> Beta<f64> {
    Beta::new(alpha, beta).expect("validated Beta parameters")
}

fn uniform_box(rng: &mut ChaCha8Rng, size: SpanRange) -> (f64, f64, f64, f64) {
    let w = size.sample(rng);
    let h = size.sample(rng);
    let x = rng.random::<f64>() * (1.0 - w);
    let y = rng.random::<f64>() * (1.0 - h);
    fit_box(x, y, w, h)
}

/// Box positions of one random-walk track, one entry per covered frame.
fn walk_track(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig, len: u32) -> Vec<(f64, f64, f64, f64)> {
    let w = cfg.box_size.sample(rng);
    let h = cfg.box_size.sample(rng);
    let (lo_x, hi_x) = (w / 2.0, 1.0 - w / 2.0);
    let (lo_y, hi_y) = (h / 2.0, 1.0 - h / 2.0);
    let mut cx = rng.random_range(lo_x..=hi_x);
    let mut cy = rng.random_range(lo_y..=hi_y);
    let step = Normal::new(0.0, cfg.drift_sigma).expect("validated drift");
    let mut out = Vec::with_capacity(len as usize);
    for i in 0..len {
        if i > 0 {
            cx = reflect(cx + step.sample(rng), lo_x, hi_x);
            cy = reflect(cy + step.sample(rng), lo_y, hi_y);
        }
        out.push(fit_box(cx - w / 2.0, cy - h / 2.0, w, h));
    }
    out
}

fn jitter_box(rng: &mut ChaCha8Rng, b: (f64, f64, f64, f64), sigma: f64) -> (f64, f64, f64, f64) {
    if sigma == 0.0 {
        return b;
    }
    let n = Normal::new(0.0, sigma).expect("validated sigma");
    let (x, y, w, h) = b;
    let dw = n.sample(rng);
    let dh = n.sample(rng);
    fit_box(x + n.sample(rng), y + n.sample(rng), w + dw, h + dh)
}

fn make_box((x, y, w, h): (f64, f64, f64, f64), c: f64) -> BoundingBox {
    BoundingBox::new(x, y, w, h, c.clamp(0.0, 1.0)).expect("generator emits valid boxes")
}

fn generate_video(cfg: &GeneratorConfig, video_id: String, label: u8, seed: u64) -> VideoRecord {
    let mut rng = rng_for(seed, 0);
    let num_frames = cfg.frames_min + rng.random_range(0..=cfg.frames_max - cfg.frames_min);
    let n = num_frames as usize;
    let mut boxes: Vec<Vec<BoundingBox>> = vec![Vec::new(); n];
    let mut gts: Vec<Vec<GroundTruthBox>> = vec![Vec::new(); n];
    let track_conf = beta(cfg.track_conf_alpha, cfg.track_conf_beta);
    let clutter_conf = beta(cfg.clutter_conf_alpha, cfg.clutter_conf_beta);

    let place = |rng: &mut ChaCha8Rng, len: CountRange| -> (usize, Vec<(f64, f64, f64, f64)>) {
        let len = len.sample(rng).min(num_frames);
        let start = rng.random_range(0..=num_frames - len) as usize;
        (start, walk_track(rng, cfg, len))
    };

    for _ in 0..cfg.decoy_tracks.sample(&mut rng) {
        let (start, path) = place(&mut rng, cfg.decoy_length);
        for (i, b) in path.into_iter().enumerate() {
            if rng.random::<f64>() < cfg.detect_drop_prob {
                continue;
            }
            let det = jitter_box(&mut rng, b, cfg.detect_jitter_sigma);
            boxes[start + i].push(make_box(det, clutter_conf.sample(&mut rng)));
        }
    }

    if label == 1 {
        for _ in 0..cfg.tracks_per_positive.sample(&mut rng) {
            let (start, path) = place(&mut rng, cfg.track_length);
            for (i, b) in path.into_iter().enumerate() {
                let (x, y, w, h) = b;
                gts[start + i].push(GroundTruthBox::new(x, y, w, h).expect("generator emits valid boxes"));
                if rng.random::<f64>() < cfg.detect_drop_prob {
                    continue;
                }
                let det = jitter_box(&mut rng, b, cfg.detect_jitter_sigma);
                boxes[start + i].push(make_box(det, track_conf.sample(&mut rng)));
            }
        }
    }

    if cfg.clutter_rate > 0.0 {
        let poisson = Poisson::new(cfg.clutter_rate).expect("validated rate");
        for frame in boxes.iter_mut() {
            let k = poisson.sample(&mut rng) as usize;
            for _ in 0..k {
                let b = uniform_box(&mut rng, cfg.box_size);
                frame.push(make_box(b, clutter_conf.sample(&mut rng)));
            }
        }
    }

    if label == 0 && rng.random::<f64>() < cfg.spurious_burst_prob {
        let len = cfg.burst_length.sample(&mut rng).min(num_frames);
        let start = rng.random_range(0..=num_frames - len) as usize;
        for frame in &mut boxes[start..start + len as usize] {
            let b = uniform_box(&mut rng, cfg.box_size);
            frame.push(make_box(b, track_conf.sample(&mut rng)));
        }
    }

    let frames = boxes
        .into_iter()
        .zip(gts)
        .enumerate()
        .map(|(t, (boxes, gt_boxes))| FrameDetections {
            frame_index: t as u64,
            boxes,
            gt_boxes,
        })
        .collect();
    VideoRecord::new(video_id, label, frames).expect("generator emits valid records")
}

/// Generates `config.n_videos` videos named `vid00000`, `vid00001`, ...
pub fn generate_dataset(config: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    generate_named(config, seed, "vid", Split::Train)
}

/// Like [`generate_dataset`], with a video-id prefix and split tag.
///
/// Exactly `round(n_videos * positive_fraction)` videos are positive; which
/// ones is decided by a seeded shuffle.
pub fn generate_named(config: &GeneratorConfig, seed: u64, prefix: &str, split: Split) -> Result<Dataset> {
    config.validate()?;
    let n = config.n_videos;
    let n_pos = (n as f64 * config.positive_fraction).round() as usize;
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < n_pos)).collect();
    labels.shuffle(&mut rng_for(seed, streams::LABELS));
    let records = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| generate_video(config, format!("{prefix}{i:05}"), label, derive_seed(seed, i as u64)))
        .collect();
    Dataset::new(records, split)
}

/// Applies detector-quality noise to every detection; labels and ground truth are untouched.
pub fn perturb_dataset(dataset: &Dataset, pcfg: &PerturbConfig, seed: u64) -> Result<Dataset> {
    pcfg.validate()?;
    if pcfg.is_identity() {
        return Ok(dataset.clone());
    }
    let conf_noise = (pcfg.conf_noise_sigma > 0.0).then(|| Normal::new(0.0, pcfg.conf_noise_sigma).expect("validated"));
    let spurious = (pcfg.spurious_rate > 0.0).then(|| Poisson::new(pcfg.spurious_rate).expect("validated"));
    let spurious_conf = beta(2.0, 5.0);
    let spurious_size = SpanRange { min: 0.05, max: 0.2 };
    let mut index = 0u64;
    Ok(dataset.map_records(|record| {
        let mut rng = rng_for(seed, index);
        index += 1;
        let boxes = record
            .frames()
            .iter()
            .map(|frame| {
                let mut out = Vec::with_capacity(frame.boxes.len());
                for b in &frame.boxes {
                    if pcfg.drop_prob > 0.0 && rng.random::<f64>() < pcfg.drop_prob {
                        continue;
                    }
                    let geom = jitter_box(&mut rng, (b.x(), b.y(), b.w(), b.h()), pcfg.box_jitter_sigma);
                    let c = match &conf_noise {
                        Some(n) => (b.confidence() + n.sample(&mut rng)).clamp(0.0, 1.0),
                        None => b.confidence(),
                    };
                    out.push(make_box(geom, c));
                }
                if let Some(p) = &spurious {
                    for _ in 0..p.sample(&mut rng) as usize {
                        let g = uniform_box(&mut rng, spurious_size);
                        out.push(make_box(g, spurious_conf.sample(&mut rng)));
                    }
                }
                out
            })
            .collect();
        record.with_boxes(boxes)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{iou, record_to_line};

    fn small(n: usize) -> GeneratorConfig {
        GeneratorConfig {
            n_videos: n,
            ..GeneratorConfig::default()
        }
    }

    fn serialized(ds: &Dataset) -> String {
        ds.records().iter().map(record_to_line).collect::<Vec<_>>().join("\n")
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate_dataset(&small(20), 3).unwrap();
        let b = generate_dataset(&small(20), 3).unwrap();
        assert_eq!(serialized(&a), serialized(&b));
        let c = generate_dataset(&small(20), 4).unwrap();
        assert_ne!(serialized(&a), serialized(&c));
    }

    #[test]
    fn zero_positive_fraction_gives_all_negatives() {
        let cfg = GeneratorConfig {
            positive_fraction: 0.0,
            ..small(30)
        };
        let ds = generate_dataset(&cfg, 1).unwrap();
        assert!(ds.records().iter().all(|r| r.label() == 0));
        assert!(ds.records().iter().all(|r| r.frames().iter().all(|f| f.gt_boxes.is_empty())));
    }

    #[test]
    fn exact_class_balance() {
        let ds = generate_dataset(&small(200), 9).unwrap();
        assert_eq!(ds.class_counts(), (100, 100));
    }

    #[test]
    fn frame_counts_within_bounds() {
        let cfg = small(40);
        for r in generate_dataset(&cfg, 5).unwrap().records() {
            let t = r.frames().len() as u32;
            assert!((cfg.frames_min..=cfg.frames_max).contains(&t));
        }
    }

    #[test]
    fn positives_have_overlapping_detections_seed_7() {
        // Scan every frame of every positive for a detection touching a gt box.
        let ds = generate_dataset(&GeneratorConfig::default(), 7).unwrap();
        for r in ds.records().iter().filter(|r| r.label() == 1) {
            let hit = r
                .frames()
                .iter()
                .any(|f| f.boxes.iter().any(|b| f.gt_boxes.iter().any(|g| iou(b, g) > 0.0)));
            assert!(hit, "positive {} has no detection overlapping ground truth", r.video_id());
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            GeneratorConfig {
                frames_min: 0,
                ..small(1)
            },
            GeneratorConfig {
                frames_min: 10,
                frames_max: 5,
                ..small(1)
            },
            GeneratorConfig {
                detect_drop_prob: 1.5,
                ..small(1)
            },
            GeneratorConfig {
                clutter_rate: -1.0,
                ..small(1)
            },
        ];
        for cfg in bad {
            assert!(matches!(generate_dataset(&cfg, 0), Err(Error::Config(_))));
        }
        let p = PerturbConfig {
            drop_prob: 2.0,
            ..Default::default()
        };
        let ds = generate_dataset(&small(2), 0).unwrap();
        assert!(perturb_dataset(&ds, &p, 0).is_err());
    }

    #[test]
    fn identity_perturbation() {
        let ds = generate_dataset(&small(10), 2).unwrap();
        assert_eq!(perturb_dataset(&ds, &PerturbConfig::default(), 11).unwrap(), ds);
    }

    #[test]
    fn full_drop_empties_frames() {
        let ds = generate_dataset(&small(10), 2).unwrap();
        let p = PerturbConfig {
            drop_prob: 1.0,
            ..Default::default()
        };
        let out = perturb_dataset(&ds, &p, 1).unwrap();
        assert!(out.records().iter().all(|r| r.num_detections() == 0));
    }

    #[test]
    fn confidence_noise_magnitude_matches_half_normal() {
        let ds = generate_dataset(&small(600), 13).unwrap();
        let p = PerturbConfig {
            conf_noise_sigma: 0.05,
            ..Default::default()
        };
        let out = perturb_dataset(&ds, &p, 17).unwrap();
        let mut total = 0.0;
        let mut count = 0usize;
        for (a, b) in ds.records().iter().zip(out.records()) {
            for (fa, fb) in a.frames().iter().zip(b.frames()) {
                for (ba, bb) in fa.boxes.iter().zip(&fb.boxes) {
                    total += (ba.confidence() - bb.confidence()).abs();
                    count += 1;
                }
            }
        }
        assert!(count >= 10_000, "only {count} boxes");
        let mean = total / count as f64;
        assert!((0.03..=0.05).contains(&mean), "mean |Δc| = {mean}");
    }

    #[test]
    fn perturbation_preserves_labels_and_ground_truth() {
        let ds = generate_dataset(&small(30), 21).unwrap();
        let p = PerturbConfig {
            conf_noise_sigma: 0.2,
            box_jitter_sigma: 0.05,
            drop_prob: 0.3,
            spurious_rate: 1.0,
        };
        let out = perturb_dataset(&ds, &p, 5).unwrap();
        assert_eq!(out, perturb_dataset(&ds, &p, 5).unwrap());
        for (a, b) in ds.records().iter().zip(out.records()) {
            assert_eq!(a.label(), b.label());
            assert_eq!(a.video_id(), b.video_id());
            for (fa, fb) in a.frames().iter().zip(b.frames()) {
                assert_eq!(fa.gt_boxes, fb.gt_boxes);
                assert_eq!(fa.frame_index, fb.frame_index);
            }
        }
    }
}
