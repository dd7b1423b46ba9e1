//! Greedy, score-sorted grouping of detections from several models into
//! per-object clusters.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::ingest::{group_detections, Detection, DetectionRun};

pub const DEFAULT_IOU_THRESH: f64 = 0.5;

/// A seed detection plus at most one overlapping detection from each other
/// model.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub center: Detection,
    pub members: Vec<Detection>,
}

impl Cluster {
    /// Center first, then members in the order they joined.
    pub fn detections(&self) -> impl Iterator<Item = &Detection> {
        std::iter::once(&self.center).chain(self.members.iter())
    }

    pub fn len(&self) -> usize {
        1 + self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn image_id(&self) -> &str {
        &self.center.image_id
    }

    pub fn category(&self) -> &str {
        &self.center.category
    }

    pub fn get(&self, model_index: usize) -> Option<&Detection> {
        self.detections().find(|d| d.model_index == model_index)
    }
}

pub(crate) fn check_thresh(name: &str, t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in (0, 1), got {t}")))
    }
}

fn check_uniform(detections: &[Detection]) -> Result<()> {
    if let Some(first) = detections.first() {
        if let Some(odd) = detections
            .iter()
            .find(|d| d.image_id != first.image_id || d.category != first.category)
        {
            return Err(Error::Contract(format!(
                "clustering input mixes ({}, {}) with ({}, {})",
                first.image_id, first.category, odd.image_id, odd.category
            )));
        }
    }
    Ok(())
}

/// Greedy pass shared by ensemble clustering and single-model NMS. With
/// `one_per_model`, a cluster accepts a detection only if its model is not
/// yet represented.
fn greedy(detections: &[Detection], iou_thresh: f64, one_per_model: bool) -> Vec<Cluster> {
    let mut pool: Vec<Option<Detection>> = {
        let mut sorted = detections.to_vec();
        sorted.sort_by(Detection::rank_cmp);
        sorted.into_iter().map(Some).collect()
    };
    let mut clusters = Vec::new();
    for i in 0..pool.len() {
        let Some(center) = pool[i].take() else {
            continue;
        };
        let mut members: Vec<Detection> = Vec::new();
        for slot in pool.iter_mut().skip(i + 1) {
            let Some(d) = slot.as_ref() else {
                continue;
            };
            if one_per_model
                && (d.model_index == center.model_index
                    || members.iter().any(|m| m.model_index == d.model_index))
            {
                continue;
            }
            if iou(&center.obb, &d.obb) > iou_thresh {
                members.push(slot.take().expect("slot checked above"));
            }
        }
        clusters.push(Cluster { center, members });
    }
    clusters
}

/// Clusters the detections of a single `(image, category)` group.
///
/// Detections are processed in descending score order (ties: model index,
/// then geometry). Each popped detection seeds a cluster and absorbs every
/// remaining detection from a not-yet-represented model whose IoU with the
/// seed exceeds `iou_thresh`.
pub fn cluster_detections(detections: &[Detection], iou_thresh: f64) -> Result<Vec<Cluster>> {
    check_thresh("iou_thresh", iou_thresh)?;
    check_uniform(detections)?;
    Ok(greedy(detections, iou_thresh, true))
}

/// Clusters every `(image, category)` group of the given runs. Groups are
/// processed in parallel on the current rayon pool; output order is by
/// group key, then cluster creation order.
pub fn cluster_runs(runs: &[DetectionRun], iou_thresh: f64) -> Result<Vec<Cluster>> {
    check_thresh("iou_thresh", iou_thresh)?;
    let groups: Vec<Vec<Detection>> = group_detections(runs.iter().flat_map(|r| r.detections.iter()))
        .into_values()
        .collect();
    Ok(groups
        .par_iter()
        .map(|g| greedy(g, iou_thresh, true))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect())
}

/// Standard greedy NMS within one run, applied per `(image, category)`.
pub fn nms_within_model(run: &DetectionRun, iou_thresh: f64) -> Result<DetectionRun> {
    check_thresh("iou_thresh", iou_thresh)?;
    let groups: Vec<Vec<Detection>> = group_detections(&run.detections).into_values().collect();
    let kept: Vec<Detection> = groups
        .par_iter()
        .map(|g| {
            greedy(g, iou_thresh, false)
                .into_iter()
                .map(|c| c.center)
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    Ok(DetectionRun {
        model_name: run.model_name.clone(),
        model_index: run.model_index,
        detections: kept,
    })
}

/// Meta-learner input for a cluster: slot `l - 1` holds model `l`'s logit,
/// absent models hold `z_miss`.
pub fn build_feature_vector(cluster: &Cluster, num_models: usize, z_miss: f64) -> Result<Vec<f64>> {
    let mut z = vec![z_miss; num_models];
    for d in cluster.detections() {
        if d.model_index == 0 || d.model_index > num_models {
            return Err(Error::Contract(format!(
                "model index {} outside 1..={num_models}",
                d.model_index
            )));
        }
        z[d.model_index - 1] = d.logit;
    }
    Ok(z)
}
