//! One TOML file drives the whole CLI: grid geometry, model dimensions,
//! tracker thresholds, scenario noise, training, and evaluation. Every key
//! has a default, so an empty file (or no file) is valid; unknown keys are
//! rejected with the list of accepted ones.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::LgaConfig;
use crate::fusion::{AnchorConfig, LossWeights};
use crate::geometry::{BevGridSpec, GeometryError};
use crate::harness::eval::EvalRegion;
use crate::harness::scenario::NoiseSpec;
use crate::numerics::optim::AdamWConfig;
use crate::pipeline::{ModelConfig, PipelineError, TrainConfig};
use crate::tracker::TrackerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("eval.region must be \"eaa\" or \"roi\", got {0:?}")]
    BadRegion(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Global cell size in meters; local maps run at half this cell.
    pub cell: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { x_min: 0.0, x_max: 51.2, y_min: -25.6, y_max: 25.6, cell: 1.6 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub global_channels: usize,
    pub local_channels: usize,
    /// Memory-bank window length n.
    pub window: usize,
    pub temporal_heads: usize,
    pub position_encoding: bool,
    pub time_encoding: bool,
    /// Fill unmatched trajectory slots from the motion prediction.
    pub predicted_slots: bool,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub lga: LgaConfig,
    pub anchors: AnchorConfig,
    pub loss: LossWeights,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            global_channels: 16,
            local_channels: 8,
            window: 5,
            temporal_heads: 4,
            position_encoding: true,
            time_encoding: true,
            predicted_slots: true,
            score_threshold: 0.2,
            nms_iou: 0.2,
            max_detections: 64,
            lga: LgaConfig::default(),
            anchors: AnchorConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub frames: u64,
    /// Detection center jitter, meters (standard deviation).
    pub jitter: f64,
    /// Per-object per-frame probability of a missing detection.
    pub dropout: f64,
    /// Mean false detections per frame.
    pub clutter: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self { frames: 40, jitter: 0.0, dropout: 0.0, clutter: 0.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Train on every k-th full window of each scenario.
    pub frame_stride: usize,
    /// Number of generated training scenarios.
    pub scenarios: usize,
    /// Base seed; scenario i uses seed + i.
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 18,
            learning_rate: 2e-4,
            weight_decay: 0.01,
            frame_stride: 3,
            scenarios: 200,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// "eaa" scores the full grid, "roi" only the near corridor.
    pub region: String,
    /// Matching IoU per class, indexed like the anchor class list.
    pub iou: Vec<f64>,
    pub scenarios: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            region: "eaa".into(),
            iou: crate::harness::eval::DEFAULT_IOU_THR.to_vec(),
            scenarios: 50,
            seed: 9001,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub grid: GridSection,
    pub model: ModelSection,
    pub tracker: TrackerConfig,
    pub scenario: ScenarioSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let label = path.display().to_string();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: label.clone(), source })?;
        Self::parse(&label, &text)
    }

    pub fn parse(label: &str, text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text)
            .map_err(|e| ConfigError::Parse { path: label.into(), message: e.to_string() })
    }

    pub fn grid_spec(&self) -> Result<BevGridSpec, GeometryError> {
        let g = &self.grid;
        BevGridSpec::new(g.x_min, g.x_max, g.y_min, g.y_max, g.cell, g.cell)
    }

    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let m = &self.model;
        let cfg = ModelConfig {
            grid: self.grid_spec()?,
            c_global: m.global_channels,
            c_local: m.local_channels,
            window: m.window,
            mstr_heads: m.temporal_heads,
            lga: m.lga,
            anchors: m.anchors.clone(),
            use_pe: m.position_encoding,
            use_te: m.time_encoding,
            use_predicted_slots: m.predicted_slots,
            loss: m.loss,
            score_thr: m.score_threshold,
            nms_iou: m.nms_iou,
            max_dets: m.max_detections,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            jitter: self.scenario.jitter,
            dropout: self.scenario.dropout,
            clutter: self.scenario.clutter,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            optim: AdamWConfig {
                lr: self.train.learning_rate,
                weight_decay: self.train.weight_decay,
                ..AdamWConfig::default()
            },
            frame_stride: self.train.frame_stride,
        }
    }

    pub fn eval_region(&self) -> Result<EvalRegion, ConfigError> {
        let grid = self.grid_spec()?;
        match self.eval.region.as_str() {
            "eaa" => Ok(EvalRegion::eaa(&grid)),
            "roi" => Ok(EvalRegion::roi(&grid)),
            other => Err(ConfigError::BadRegion(other.into())),
        }
    }

    /// Per-class matching thresholds, checked against the class list.
    pub fn eval_iou(&self) -> Result<Vec<f64>, ConfigError> {
        let classes = self.model.anchors.classes.len();
        if self.eval.iou.len() != classes || self.eval.iou.iter().any(|t| !(*t > 0.0 && *t <= 1.0))
        {
            return Err(ConfigError::Parse {
                path: "eval.iou".into(),
                message: format!(
                    "needs one threshold in (0, 1] per class ({classes} classes, {} given)",
                    self.eval.iou.len()
                ),
            });
        }
        Ok(self.eval.iou.clone())
    }
}
