//! Stacking ensemble for oriented-bounding-box detections.
//!
//! Detections from several models are grouped into per-object clusters, a
//! logistic-regression meta-learner is fitted on labeled validation clusters,
//! and test clusters are fused into single boxes with learned confidence.
//! NMS and WBF baselines, a VOC-style evaluator and a synthetic detector
//! simulator are included for comparison.

pub mod clustering;
pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod ingest;
pub mod metalearner;
pub mod pipeline;
pub mod prob;
pub mod synth;

pub use clustering::{build_feature_vector, cluster_detections, cluster_runs, Cluster};
pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use eval::{average_precision, evaluate, match_detections, ApMode, EvalConfig, EvalResult, MatchFlag};
pub use fusion::{ensemble_nms, ensemble_stacking, ensemble_wbf, FusedDetection, Method};
pub use geometry::{intersection_area, iou, relative_angle, CornerQuad, Obb, Point};
pub use ingest::{Detection, DetectionRun, GroundTruth, GroundTruthObject};
pub use metalearner::{
    decompose_weights, fit, fit_temperature, label_clusters, nll, score_correlation, sigma_wa,
    CalibrationParams, FitConfig, LabeledCluster, MetaLearner,
};
pub use synth::{generate_scenes, run_benchmark, simulate_detector, DetectorProfile, Scenario, SyntheticScene};
