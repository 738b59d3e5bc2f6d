//! Experiment configuration and master-seed handling.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detection::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{Splits, Trainer};
use crate::graph::GraphConfig;
use crate::model::ModelConfig;
use crate::rng::{derive_seed, streams};
use crate::synth::{generate_named, GeneratorConfig, PerturbConfig};
use crate::train::TrainConfig;

/// Video counts per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 400,
            val: 100,
            test: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Complete experiment settings. Component seeds all derive from `seed`;
/// `train.seed` is overwritten by [`RunConfig::trainer`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub splits: SplitSizes,
    pub graph: GraphConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Detector-quality levels cycled during training-graph regeneration.
    pub noise_schedule: Vec<PerturbConfig>,
    /// Perturbation levels for the frozen-weight robustness study.
    pub robustness_levels: Vec<PerturbConfig>,
    pub paths: Paths,
}

fn level(conf: f64, jitter: f64, drop: f64, spurious: f64) -> PerturbConfig {
    PerturbConfig {
        conf_noise_sigma: conf,
        box_jitter_sigma: jitter,
        drop_prob: drop,
        spurious_rate: spurious,
    }
}

/// Training-time detector variation. The first, noisiest entry is skipped by
/// the default `warmup_exclusion` of 1.
pub fn default_noise_schedule() -> Vec<PerturbConfig> {
    vec![
        level(0.10, 0.02, 0.20, 0.05),
        level(0.0, 0.0, 0.0, 0.0),
        level(0.02, 0.004, 0.05, 0.01),
        level(0.04, 0.008, 0.10, 0.02),
    ]
}

/// Five evenly spaced levels from no noise up to
/// `(conf 0.05, jitter 0.01, drop 0.05)`.
pub fn default_robustness_levels() -> Vec<PerturbConfig> {
    (0..5)
        .map(|k| {
            let s = f64::from(k) / 4.0;
            level(0.05 * s, 0.01 * s, 0.05 * s, 0.0)
        })
        .collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            generator: GeneratorConfig::default(),
            splits: SplitSizes::default(),
            graph: GraphConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            noise_schedule: default_noise_schedule(),
            robustness_levels: default_robustness_levels(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::eval::write_json(self, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.graph.validate()?;
        self.model.validate()?;
        self.model.check_compatible(&self.graph)?;
        self.train.validate()?;
        for p in self.noise_schedule.iter().chain(&self.robustness_levels) {
            p.validate()?;
        }
        let s = self.splits;
        if s.train < 2 || s.val < 2 || s.test < 2 {
            return Err(Error::Config(format!("every split needs at least 2 videos, got {s:?}")));
        }
        Ok(())
    }

    pub fn generation_seed(&self) -> u64 {
        derive_seed(self.seed, streams::GENERATE)
    }

    pub fn train_seed(&self) -> u64 {
        derive_seed(self.seed, streams::TRAIN)
    }

    pub fn perturb_seed(&self) -> u64 {
        derive_seed(self.seed, streams::PERTURB)
    }

    /// Training settings with the derived training seed and a model
    /// configuration matched to the graph features.
    pub fn trainer(&self) -> Trainer {
        Trainer {
            graph: self.graph,
            model: self.model.with_graph(&self.graph),
            train: TrainConfig {
                seed: self.train_seed(),
                ..self.train.clone()
            },
            noise_schedule: self.noise_schedule.clone(),
        }
    }
}

/// Generates the three splits. Training follows `generator.positive_fraction`;
/// validation and test are exactly balanced.
pub fn generate_splits(cfg: &RunConfig) -> Result<Splits> {
    let seed = cfg.generation_seed();
    let make = |n: usize, fraction: f64, stream: u64, split: Split| -> Result<Dataset> {
        let g = GeneratorConfig {
            n_videos: n,
            positive_fraction: fraction,
            ..cfg.generator.clone()
        };
        generate_named(&g, derive_seed(seed, stream), &format!("{}-", split.as_str()), split)
    };
    Ok(Splits {
        train: make(cfg.splits.train, cfg.generator.positive_fraction, 0, Split::Train)?,
        val: make(cfg.splits.val, 0.5, 1, Split::Val)?,
        test: make(cfg.splits.test, 0.5, 2, Split::Test)?,
    })
}
