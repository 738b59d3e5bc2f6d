//! Scoring, the frame-average baseline, experiment tables, and visualization export.

pub mod metrics;
mod report;
mod viz;

use serde::{Deserialize, Serialize};

use crate::detection::Dataset;
use crate::error::{Error, Result};
use crate::graph::{build_graph, FeatureMask, GraphConfig, VideoGraph};
use crate::model::{Model, ModelConfig, Parameters};
use crate::rng::derive_seed;
use crate::synth::{perturb_dataset, PerturbConfig};
use crate::train::{sigmoid, train, TrainConfig, TrainHistory};

pub use metrics::{
    apply_threshold, auc, auc_of, baseline_detector_frame_avg, confusion_metrics, mcnemar_exact, select_threshold,
    MetricsReport, ScoredVideo,
};
pub use report::{to_tsv, write_json, write_tsv, Tabular};
pub use viz::{export_visualization, visualization_json};

/// GADA probability for every video, in dataset order.
pub fn score_dataset(dataset: &Dataset, params: &Parameters, gcfg: &GraphConfig, mcfg: &ModelConfig) -> Result<Vec<ScoredVideo>> {
    mcfg.check_compatible(gcfg)?;
    let model = Model::new(params, mcfg)?;
    score_with(dataset, &model, gcfg)
}

fn score_with(dataset: &Dataset, model: &Model, gcfg: &GraphConfig) -> Result<Vec<ScoredVideo>> {
    let graphs: Vec<VideoGraph> = dataset.records().iter().map(|r| build_graph(r, gcfg)).collect();
    let refs: Vec<&VideoGraph> = graphs.iter().collect();
    let logits = model.logits(&refs)?;
    Ok(graphs
        .iter()
        .zip(logits)
        .map(|(g, z)| ScoredVideo {
            video_id: g.video_id.clone(),
            label: g.label,
            score: sigmoid(z),
            predicted: None,
        })
        .collect())
}

/// Frame-average baseline score for every video, in dataset order.
pub fn baseline_scores(dataset: &Dataset) -> Vec<ScoredVideo> {
    dataset
        .records()
        .iter()
        .map(|r| ScoredVideo {
            video_id: r.video_id().to_string(),
            label: r.label(),
            score: baseline_detector_frame_avg(r),
            predicted: None,
        })
        .collect()
}

/// Threshold from validation scores, metrics and predictions on test scores.
pub fn evaluate(val: &[ScoredVideo], test: &mut [ScoredVideo]) -> Result<MetricsReport> {
    let threshold = select_threshold(val)?;
    apply_threshold(test, threshold);
    confusion_metrics(test, threshold)
}

/// Paired comparison of two thresholded classifiers on the same videos.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemarReport {
    /// Videos only the first classifier gets right.
    pub only_first: u64,
    /// Videos only the second classifier gets right.
    pub only_second: u64,
    pub p_value: f64,
}

pub fn compare_mcnemar(first: &[ScoredVideo], second: &[ScoredVideo]) -> Result<McNemarReport> {
    if first.len() != second.len() {
        return Err(Error::Shape(format!("{} vs {} scored videos", first.len(), second.len())));
    }
    let (mut b, mut c) = (0, 0);
    for (x, y) in first.iter().zip(second) {
        if x.video_id != y.video_id {
            return Err(Error::Invariant(format!("video order differs: `{}` vs `{}`", x.video_id, y.video_id)));
        }
        let (Some(px), Some(py)) = (x.predicted, y.predicted) else {
            return Err(Error::Invariant(format!("video `{}` has no prediction", x.video_id)));
        };
        match (px == x.label, py == y.label) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    Ok(McNemarReport {
        only_first: b,
        only_second: c,
        p_value: mcnemar_exact(b, c),
    })
}

/// Train, validation and test datasets.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Everything fixed across the cells of an experiment table.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub graph: GraphConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub noise_schedule: Vec<PerturbConfig>,
}

/// A trained model with its validation-thresholded test evaluation.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub params: Parameters,
    pub history: TrainHistory,
    pub val: Vec<ScoredVideo>,
    pub test: Vec<ScoredVideo>,
    pub metrics: MetricsReport,
}

impl Trainer {
    pub fn run(&self, splits: &Splits) -> Result<RunResult> {
        self.run_with(splits, &self.graph, &self.model)
    }

    fn run_with(&self, splits: &Splits, gcfg: &GraphConfig, mcfg: &ModelConfig) -> Result<RunResult> {
        let (params, history) = train(&splits.train, &splits.val, gcfg, mcfg, &self.train, &self.noise_schedule)?;
        let (val, test, metrics) = evaluate_params(splits, &params, gcfg, mcfg)?;
        Ok(RunResult {
            params,
            history,
            val,
            test,
            metrics,
        })
    }
}

fn evaluate_params(
    splits: &Splits,
    params: &Parameters,
    gcfg: &GraphConfig,
    mcfg: &ModelConfig,
) -> Result<(Vec<ScoredVideo>, Vec<ScoredVideo>, MetricsReport)> {
    let val = score_dataset(&splits.val, params, gcfg, mcfg)?;
    let mut test = score_dataset(&splits.test, params, gcfg, mcfg)?;
    let metrics = evaluate(&val, &mut test)?;
    Ok((val, test, metrics))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// Frame window.
    Epsilon,
    /// IoU threshold.
    Delta,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::Delta => "delta",
        }
    }

    fn apply(self, base: &GraphConfig, value: f64) -> Result<GraphConfig> {
        let mut g = *base;
        match self {
            SweepAxis::Epsilon => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("frame window must be a positive integer, got {value}")));
                }
                g.frame_window = value as u32;
            }
            SweepAxis::Delta => g.iou_threshold = value,
        }
        g.validate()?;
        Ok(g)
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" | "eps" | "frame_window" => Ok(SweepAxis::Epsilon),
            "delta" | "iou" | "iou_threshold" => Ok(SweepAxis::Delta),
            _ => Err(Error::Config(format!("unknown sweep axis `{s}` (expected epsilon or delta)"))),
        }
    }
}

/// How a sweep obtains weights for each value.
#[derive(Debug, Clone, Copy)]
pub enum SweepMode<'a> {
    /// Train a fresh model per value.
    Retrain,
    /// Reuse fixed weights and rebuild only the graphs.
    Frozen(&'a Parameters),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

pub fn sweep(splits: &Splits, trainer: &Trainer, axis: SweepAxis, values: &[f64], mode: SweepMode) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let gcfg = axis.apply(&trainer.graph, value)?;
        let metrics = match mode {
            SweepMode::Retrain => trainer.run_with(splits, &gcfg, &trainer.model)?.metrics,
            SweepMode::Frozen(params) => evaluate_params(splits, params, &gcfg, &trainer.model)?.2,
        };
        log::info!("{} = {value}: test AUC {:.4}", axis.name(), metrics.auc);
        rows.push(SweepRow { axis, value, metrics });
    }
    Ok(rows)
}

/// Node features and edge-feature switch for one ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationMask {
    pub features: FeatureMask,
    pub edge_features: bool,
}

impl AblationMask {
    pub fn label(&self) -> String {
        if self.edge_features {
            format!("{}+edges", self.features)
        } else {
            self.features.to_string()
        }
    }

    /// The eight combinations of position, size, confidence and edge features
    /// that keep at least one node feature, largest first.
    pub fn table() -> Vec<AblationMask> {
        let mut out = Vec::new();
        for (position, size, confidence, edge_features) in [
            (true, true, true, true),
            (false, true, true, true),
            (true, false, true, true),
            (true, true, false, true),
            (true, true, true, false),
            (false, false, true, true),
            (false, true, false, true),
            (false, true, true, false),
        ] {
            out.push(AblationMask {
                features: FeatureMask {
                    position,
                    size,
                    confidence,
                },
                edge_features,
            });
        }
        out
    }
}

impl std::fmt::Display for AblationMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.label())
    }
}

impl std::str::FromStr for AblationMask {
    type Err = Error;
    /// Parses a feature list such as `size+confidence+edges`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts: Vec<&str> = s.split(['+', ',']).map(str::trim).filter(|p| !p.is_empty()).collect();
        let edge_features = parts.iter().any(|p| *p == "edges" || *p == "edge");
        parts.retain(|p| *p != "edges" && *p != "edge");
        let features: FeatureMask = parts.join("+").parse()?;
        Ok(AblationMask { features, edge_features })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: String,
    pub position: bool,
    pub size: bool,
    pub confidence: bool,
    pub edge_features: bool,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

pub fn ablate_features(splits: &Splits, trainer: &Trainer, masks: &[AblationMask]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(masks.len());
    for mask in masks {
        if mask.features.is_empty() {
            return Err(Error::Config("an ablation row must keep at least one node feature".into()));
        }
        let gcfg = GraphConfig {
            feature_mask: mask.features,
            use_edge_features: mask.edge_features,
            ..trainer.graph
        };
        let mcfg = trainer.model.with_graph(&gcfg);
        let result = trainer.run_with(splits, &gcfg, &mcfg)?;
        log::info!("ablation {mask}: test AUC {:.4}", result.metrics.auc);
        rows.push(AblationRow {
            mask: mask.label(),
            position: mask.features.position,
            size: mask.features.size,
            confidence: mask.features.confidence,
            edge_features: mask.edge_features,
            metrics: result.metrics,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessRow {
    pub level: usize,
    #[serde(flatten)]
    pub noise: PerturbConfig,
    pub auc: f64,
    /// `auc` minus the AUC on the unperturbed test set.
    pub delta_auc: f64,
}

/// AUC of fixed weights on perturbed copies of `test`, one row per level.
pub fn robustness_eval(
    test: &Dataset,
    params: &Parameters,
    gcfg: &GraphConfig,
    mcfg: &ModelConfig,
    schedule: &[PerturbConfig],
    seed: u64,
) -> Result<Vec<RobustnessRow>> {
    mcfg.check_compatible(gcfg)?;
    let model = Model::new(params, mcfg)?;
    let clean = auc(&score_with(test, &model, gcfg)?)?;
    let mut rows = Vec::with_capacity(schedule.len());
    for (level, noise) in schedule.iter().enumerate() {
        noise.validate()?;
        let perturbed = perturb_dataset(test, noise, derive_seed(seed, level as u64))?;
        let value = auc(&score_with(&perturbed, &model, gcfg)?)?;
        rows.push(RobustnessRow {
            level,
            noise: *noise,
            auc: value,
            delta_auc: value - clean,
        });
    }
    Ok(rows)
}

impl Tabular for SweepRow {
    fn header() -> Vec<&'static str> {
        vec!["axis", "value", "auc", "threshold", "sensitivity", "specificity", "accuracy"]
    }
    fn cells(&self) -> Vec<String> {
        let m = &self.metrics;
        vec![
            self.axis.name().into(),
            self.value.to_string(),
            format!("{:.4}", m.auc),
            format!("{:.4}", m.threshold),
            format!("{:.4}", m.sensitivity),
            format!("{:.4}", m.specificity),
            format!("{:.4}", m.accuracy),
        ]
    }
}

impl Tabular for AblationRow {
    fn header() -> Vec<&'static str> {
        vec!["position", "size", "confidence", "edges", "auc", "sensitivity", "specificity", "accuracy"]
    }
    fn cells(&self) -> Vec<String> {
        let mark = |b: bool| if b { "x" } else { "-" }.to_string();
        let m = &self.metrics;
        vec![
            mark(self.position),
            mark(self.size),
            mark(self.confidence),
            mark(self.edge_features),
            format!("{:.4}", m.auc),
            format!("{:.4}", m.sensitivity),
            format!("{:.4}", m.specificity),
            format!("{:.4}", m.accuracy),
        ]
    }
}

impl Tabular for RobustnessRow {
    fn header() -> Vec<&'static str> {
        vec!["level", "conf_noise_sigma", "box_jitter_sigma", "drop_prob", "spurious_rate", "auc", "delta_auc"]
    }
    fn cells(&self) -> Vec<String> {
        vec![
            self.level.to_string(),
            self.noise.conf_noise_sigma.to_string(),
            self.noise.box_jitter_sigma.to_string(),
            self.noise.drop_prob.to_string(),
            self.noise.spurious_rate.to_string(),
            format!("{:.4}", self.auc),
            format!("{:+.4}", self.delta_auc),
        ]
    }
}
