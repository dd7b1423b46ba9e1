//! Pipeline configuration shared by the library entry points and the CLI.

use serde::{Deserialize, Serialize};

use crate::clustering::{check_thresh, DEFAULT_IOU_THRESH};
use crate::error::{Error, Result};
use crate::eval::{ApMode, EvalConfig};
use crate::fusion::Method;
use crate::ingest::DEFAULT_MIN_SCORE;
use crate::metalearner::{FitConfig, DEFAULT_IOU_LABEL_THRESH, DEFAULT_LAMBDA, DEFAULT_Z_MISS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub method: Method,
    /// Overlap a detection needs with a cluster center to join it.
    pub iou_thresh: f64,
    /// Overlap a cluster center needs with ground truth to be labeled positive.
    pub iou_label_thresh: f64,
    pub z_miss: f64,
    pub lambda: f64,
    /// Ingest pre-filter on raw scores and floor on fused output scores.
    pub min_score: f64,
    pub ap_mode: ApMode,
    pub matching_iou: f64,
    /// Run greedy NMS inside each model before ensembling.
    pub per_model_nms: bool,
    pub max_iter: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            method: Method::Stacking,
            iou_thresh: DEFAULT_IOU_THRESH,
            iou_label_thresh: DEFAULT_IOU_LABEL_THRESH,
            z_miss: DEFAULT_Z_MISS,
            lambda: DEFAULT_LAMBDA,
            min_score: DEFAULT_MIN_SCORE,
            ap_mode: ApMode::Voc12,
            matching_iou: 0.5,
            per_model_nms: false,
            max_iter: 500,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        check_thresh("iou_thresh", self.iou_thresh)?;
        check_thresh("iou_label_thresh", self.iou_label_thresh)?;
        if !(self.matching_iou > 0.0 && self.matching_iou <= 1.0) {
            return Err(Error::Config(format!("matching_iou must lie in (0, 1], got {}", self.matching_iou)));
        }
        if !self.z_miss.is_finite() {
            return Err(Error::Config("z_miss must be finite".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and ≥ 0, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.min_score) {
            return Err(Error::Config(format!("min_score must lie in [0, 1), got {}", self.min_score)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be positive".into()));
        }
        Ok(())
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            lambda: self.lambda,
            max_iter: self.max_iter,
            ..FitConfig::default()
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            matching_iou: self.matching_iou,
            ap_mode: self.ap_mode,
            categories: None,
        }
    }
}
