//! Cluster fusion: learned stacking plus the NMS and WBF baselines.

use rayon::prelude::*;

use crate::clustering::{build_feature_vector, cluster_runs, Cluster};
use crate::error::{Error, Result};
use crate::geometry::{relative_angle, wrap_half_turn, Obb};
use crate::ingest::{Detection, DetectionRun};
use crate::metalearner::MetaLearner;
use crate::prob::{clamp_score, sigmoid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Stacking,
    Nms,
    Wbf,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Stacking => "stacking",
            Method::Nms => "nms",
            Method::Wbf => "wbf",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stacking" => Ok(Method::Stacking),
            "nms" => Ok(Method::Nms),
            "wbf" => Ok(Method::Wbf),
            other => Err(Error::Config(format!("unknown ensemble method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedDetection {
    pub obb: Obb,
    pub score: f64,
    pub category: String,
    pub image_id: String,
    /// `(model_index, raw score)` of every contributing detection.
    pub provenance: Vec<(usize, f64)>,
}

/// Per-detection score from its own logit and its model's weight:
/// `σ(z·w_l + b)`.
pub fn calibrated_score(det: &Detection, learner: &MetaLearner) -> Result<f64> {
    Ok(sigmoid(det.logit * learner.weight(det.model_index)? + learner.intercept))
}

fn calibrated_weights(cluster: &Cluster, learner: &MetaLearner) -> Result<Vec<f64>> {
    cluster.detections().map(|d| calibrated_score(d, learner)).collect()
}

fn weighted_mean(values: impl Iterator<Item = f64>, weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    values.zip(weights).map(|(v, w)| v * w).sum::<f64>() / total
}

/// Weighted mean of centers and extents.
fn blend_geometry(dets: &[&Detection], weights: &[f64]) -> (f64, f64, f64, f64) {
    (
        weighted_mean(dets.iter().map(|d| d.obb.x), weights),
        weighted_mean(dets.iter().map(|d| d.obb.y), weights),
        weighted_mean(dets.iter().map(|d| d.obb.w), weights),
        weighted_mean(dets.iter().map(|d| d.obb.h), weights),
    )
}

/// Weighted mean of orientations relative to the highest-weighted box
/// (ties: lower model index), reduced into `[0, π)`.
fn blend_orientation(dets: &[&Detection], weights: &[f64]) -> f64 {
    let major = (0..dets.len())
        .min_by(|&a, &b| {
            weights[b]
                .total_cmp(&weights[a])
                .then(dets[a].model_index.cmp(&dets[b].model_index))
        })
        .expect("cluster is nonempty");
    let theta_mj = dets[major].obb.theta;
    let offset = weighted_mean(
        dets.iter()
            .map(|d| relative_angle(d.obb.theta, theta_mj).expect("canonical angles lie in [0, π)")),
        weights,
    );
    wrap_half_turn(theta_mj + offset)
}

/// Calibrated-score-weighted mean of `(x, y, w, h)` over the cluster,
/// center included.
pub fn fuse_geometry(cluster: &Cluster, learner: &MetaLearner) -> Result<(f64, f64, f64, f64)> {
    let weights = calibrated_weights(cluster, learner)?;
    let dets: Vec<&Detection> = cluster.detections().collect();
    Ok(blend_geometry(&dets, &weights))
}

/// Fused orientation: the major orientation plus the calibrated-score-weighted
/// mean of cyclic offsets from it.
pub fn fuse_orientation(cluster: &Cluster, learner: &MetaLearner) -> Result<f64> {
    let weights = calibrated_weights(cluster, learner)?;
    let dets: Vec<&Detection> = cluster.detections().collect();
    Ok(blend_orientation(&dets, &weights))
}

fn provenance(cluster: &Cluster) -> Vec<(usize, f64)> {
    cluster.detections().map(|d| (d.model_index, d.score)).collect()
}

fn blended(cluster: &Cluster, weights: &[f64], score: f64) -> Result<FusedDetection> {
    let dets: Vec<&Detection> = cluster.detections().collect();
    let (x, y, w, h) = blend_geometry(&dets, weights);
    let theta = blend_orientation(&dets, weights);
    Ok(FusedDetection {
        obb: Obb::canonicalize(x, y, w, h, theta)?,
        score,
        category: cluster.category().to_string(),
        image_id: cluster.image_id().to_string(),
        provenance: provenance(cluster),
    })
}

/// Fuses one cluster with the learner: calibrated-weighted geometry, and the
/// learner's probability for the cluster's full feature vector as score.
pub fn fuse_cluster(cluster: &Cluster, learner: &MetaLearner) -> Result<FusedDetection> {
    let weights = calibrated_weights(cluster, learner)?;
    let z = build_feature_vector(cluster, learner.num_models(), learner.z_miss)?;
    blended(cluster, &weights, learner.predict(&z)?)
}

/// WBF baseline: raw-score-weighted geometry; score is the mean raw score
/// scaled by `min(1, K/M)` for `K` contributing models.
pub fn fuse_cluster_wbf(cluster: &Cluster, num_models: usize) -> Result<FusedDetection> {
    let weights: Vec<f64> = cluster.detections().map(|d| d.score).collect();
    let k = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / k;
    let score = mean * (k / num_models as f64).min(1.0);
    blended(cluster, &weights, score)
}

/// NMS baseline: the cluster center, unchanged.
pub fn fuse_cluster_nms(cluster: &Cluster) -> FusedDetection {
    let c = &cluster.center;
    FusedDetection {
        obb: c.obb,
        score: c.score,
        category: c.category.clone(),
        image_id: c.image_id.clone(),
        provenance: provenance(cluster),
    }
}

fn check_runs(runs: &[DetectionRun]) -> Result<()> {
    let m = runs.len();
    let mut seen = vec![false; m];
    for r in runs {
        if r.model_index == 0 || r.model_index > m || std::mem::replace(&mut seen[r.model_index - 1], true) {
            return Err(Error::Contract(format!(
                "run {:?} has model index {} (expected a permutation of 1..={m})",
                r.model_name, r.model_index
            )));
        }
        if let Some(d) = r.detections.iter().find(|d| d.model_index != r.model_index) {
            return Err(Error::Contract(format!(
                "detection tagged with model {} inside run {}",
                d.model_index, r.model_index
            )));
        }
    }
    Ok(())
}

fn check_registry(runs: &[DetectionRun], learner: &MetaLearner) -> Result<()> {
    if runs.len() != learner.num_models() {
        return Err(Error::Contract(format!(
            "{} runs supplied but the learner was trained on {} models",
            runs.len(),
            learner.num_models()
        )));
    }
    for r in runs {
        let expected = &learner.models[r.model_index - 1];
        if &r.model_name != expected {
            return Err(Error::Contract(format!(
                "model {} is {:?} but the learner expects {:?}",
                r.model_index, r.model_name, expected
            )));
        }
    }
    Ok(())
}

/// Output order: score descending, then image, category and geometry.
pub fn sort_fused(fused: &mut [FusedDetection]) {
    fused.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.image_id.cmp(&b.image_id))
            .then_with(|| a.category.cmp(&b.category))
            .then_with(|| a.obb.total_cmp(&b.obb))
    });
}

fn fuse_all<F>(runs: &[DetectionRun], iou_thresh: f64, fuse: F) -> Result<Vec<FusedDetection>>
where
    F: Fn(&Cluster) -> Result<FusedDetection> + Sync,
{
    let clusters = cluster_runs(runs, iou_thresh)?;
    let mut fused = clusters.par_iter().map(&fuse).collect::<Result<Vec<_>>>()?;
    sort_fused(&mut fused);
    Ok(fused)
}

/// Clusters the runs and fuses every cluster with the learner.
pub fn ensemble_stacking(
    runs: &[DetectionRun],
    learner: &MetaLearner,
    iou_thresh: f64,
) -> Result<Vec<FusedDetection>> {
    check_runs(runs)?;
    check_registry(runs, learner)?;
    fuse_all(runs, iou_thresh, |c| fuse_cluster(c, learner))
}

pub fn ensemble_nms(runs: &[DetectionRun], iou_thresh: f64) -> Result<Vec<FusedDetection>> {
    check_runs(runs)?;
    fuse_all(runs, iou_thresh, |c| Ok(fuse_cluster_nms(c)))
}

pub fn ensemble_wbf(runs: &[DetectionRun], iou_thresh: f64) -> Result<Vec<FusedDetection>> {
    check_runs(runs)?;
    let m = runs.len();
    fuse_all(runs, iou_thresh, |c| fuse_cluster_wbf(c, m))
}

/// Packs fused detections into a single-model run (model index 1).
pub fn to_run(fused: &[FusedDetection], name: &str) -> Result<DetectionRun> {
    let mut run = DetectionRun::new(name, 1);
    for f in fused {
        run.detections.push(Detection::from_score(
            f.obb,
            clamp_score(f.score),
            1,
            f.category.clone(),
            f.image_id.clone(),
        )?);
    }
    Ok(run)
}
