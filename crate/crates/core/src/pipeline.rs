//! The two stacking stages as reusable steps: fitting the meta-learner on
//! validation runs, and fusing test runs.

use serde::Serialize;

use crate::clustering::{cluster_runs, nms_within_model};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::fusion::{ensemble_nms, ensemble_stacking, ensemble_wbf, FusedDetection, Method};
use crate::ingest::{DetectionRun, GroundTruth};
use crate::metalearner::{fit, fit_temperature, label_clusters, CalibrationParams, MetaLearner};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub models: Vec<String>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub n_clusters: usize,
    pub n_positive: usize,
    pub final_nll: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `1/w` when a single model was fitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub equivalent_temperature: Option<f64>,
}

impl TrainReport {
    pub fn from_learner(learner: &MetaLearner) -> Self {
        let m = &learner.training_meta;
        TrainReport {
            models: learner.models.clone(),
            weights: learner.weights.clone(),
            intercept: learner.intercept,
            n_clusters: m.n_clusters,
            n_positive: m.n_positive,
            final_nll: m.final_nll,
            iterations: m.iterations,
            converged: m.converged,
            equivalent_temperature: learner.equivalent_temperature(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "clusters: {} ({} positive)\nNLL: {:.6}\niterations: {}{}\nintercept: {:.6}\n",
            self.n_clusters,
            self.n_positive,
            self.final_nll,
            self.iterations,
            if self.converged { "" } else { " (not converged)" },
            self.intercept
        );
        let width = self.models.iter().map(|m| m.len()).max().unwrap_or(0);
        for (m, w) in self.models.iter().zip(&self.weights) {
            out.push_str(&format!("  {m:<width$}  w = {w:.6}\n"));
        }
        if let Some(t) = self.equivalent_temperature {
            out.push_str(&format!("equivalent temperature T = 1/w = {t:.6}\n"));
        }
        out
    }
}

/// Optional per-model NMS, applied identically in both stages.
pub fn prepare_runs(runs: &[DetectionRun], config: &PipelineConfig) -> Result<Vec<DetectionRun>> {
    if config.per_model_nms {
        runs.iter().map(|r| nms_within_model(r, config.iou_thresh)).collect()
    } else {
        Ok(runs.to_vec())
    }
}

/// Stage 1: clusters validation runs, labels clusters against ground truth
/// and fits the meta-learner. Runs must carry model indices `1..=M`.
pub fn train_meta(runs: &[DetectionRun], ground_truth: &GroundTruth, config: &PipelineConfig) -> Result<MetaLearner> {
    config.validate()?;
    if runs.is_empty() {
        return Err(Error::Contract("no validation runs supplied".into()));
    }
    let mut ordered = prepare_runs(runs, config)?;
    ordered.sort_by_key(|r| r.model_index);
    let models: Vec<String> = ordered.iter().map(|r| r.model_name.clone()).collect();
    if ordered.iter().enumerate().any(|(i, r)| r.model_index != i + 1) {
        return Err(Error::Contract("validation runs must be indexed 1..=M".into()));
    }
    let clusters = cluster_runs(&ordered, config.iou_thresh)?;
    let labeled = label_clusters(&clusters, ground_truth, config.iou_label_thresh, models.len(), config.z_miss)?;
    if labeled.is_empty() {
        return Err(Error::DegenerateData("validation runs contain no detections".into()));
    }
    fit(&labeled, models, config.z_miss, &config.fit_config())
}

/// Stage 2: fuses test runs with the configured method and drops fused
/// detections scoring below `min_score`.
pub fn fuse(runs: &[DetectionRun], learner: Option<&MetaLearner>, config: &PipelineConfig) -> Result<Vec<FusedDetection>> {
    config.validate()?;
    let mut ordered = prepare_runs(runs, config)?;
    ordered.sort_by_key(|r| r.model_index);
    let mut fused = match config.method {
        Method::Stacking => {
            let learner =
                learner.ok_or_else(|| Error::Config("stacking requires a meta-learner".into()))?;
            ensemble_stacking(&ordered, learner, config.iou_thresh)?
        }
        Method::Nms => ensemble_nms(&ordered, config.iou_thresh)?,
        Method::Wbf => ensemble_wbf(&ordered, config.iou_thresh)?,
    };
    fused.retain(|f| f.score >= config.min_score);
    Ok(fused)
}

/// Temperature scaling fitted to each run on its own: every detection is
/// labeled against ground truth exactly as a one-member cluster would be.
/// Used to obtain the calibration factor `p = 1/T` of the weight
/// decomposition.
pub fn member_temperatures(
    runs: &[DetectionRun],
    ground_truth: &GroundTruth,
    config: &PipelineConfig,
) -> Result<Vec<CalibrationParams>> {
    config.validate()?;
    prepare_runs(runs, config)?
        .into_iter()
        .map(|mut run| {
            run.set_model_index(1);
            let clusters = cluster_runs(std::slice::from_ref(&run), config.iou_thresh)?;
            let labeled = label_clusters(&clusters, ground_truth, config.iou_label_thresh, 1, config.z_miss)?;
            let pairs: Vec<(f64, bool)> = labeled.iter().map(|s| (s.features[0], s.label)).collect();
            fit_temperature(&pairs, &config.fit_config()).map_err(|e| match e {
                Error::DegenerateData(m) | Error::CalibrationFailure(m) => {
                    Error::CalibrationFailure(format!("{}: {m}", run.model_name))
                }
                other => other,
            })
        })
        .collect()
}
