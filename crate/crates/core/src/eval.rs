//! VOC-style average precision and mAP for oriented detections.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::ingest::{Detection, DetectionRun, GroundTruth, GroundTruthObject};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApMode {
    /// 11-point interpolated AP.
    Voc07,
    /// Area under the monotone precision envelope.
    Voc12,
}

impl std::str::FromStr for ApMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "voc07" => Ok(ApMode::Voc07),
            "voc12" => Ok(ApMode::Voc12),
            other => Err(Error::Config(format!("unknown AP mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchFlag {
    Tp,
    Fp,
    /// Matched only a `difficult` object; excluded from precision and recall.
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub matching_iou: f64,
    pub ap_mode: ApMode,
    /// Categories to evaluate; defaults to those present in the ground truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            matching_iou: 0.5,
            ap_mode: ApMode::Voc12,
            categories: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_category_ap: BTreeMap<String, f64>,
    pub map: f64,
    pub pr_curves: BTreeMap<String, Vec<(f64, f64)>>,
    pub n_positive: BTreeMap<String, usize>,
    pub matching_iou: f64,
    pub ap_mode: ApMode,
}

/// Greedy matching of score-sorted detections against ground truth of one
/// category. Each detection takes the highest-IoU still-unmatched
/// non-difficult object of its image with IoU ≥ `iou_thresh`; failing that,
/// it is ignored if it overlaps a difficult object that well, else it is a
/// false positive.
pub fn match_detections(dets: &[&Detection], gts: &[&GroundTruthObject], iou_thresh: f64) -> Vec<MatchFlag> {
    let mut by_image: BTreeMap<&str, Vec<(usize, &GroundTruthObject)>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id.as_str()).or_default().push((i, g));
    }
    let mut used = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let Some(candidates) = by_image.get(d.image_id.as_str()) else {
                return MatchFlag::Fp;
            };
            let mut best: Option<(usize, f64)> = None;
            let mut hits_difficult = false;
            for &(i, g) in candidates {
                if g.category != d.category {
                    continue;
                }
                let v = iou(&d.obb, &g.obb);
                if v < iou_thresh {
                    continue;
                }
                if g.difficult {
                    hits_difficult = true;
                } else if !used[i] && best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            match best {
                Some((i, _)) => {
                    used[i] = true;
                    MatchFlag::Tp
                }
                None if hits_difficult => MatchFlag::Ignored,
                None => MatchFlag::Fp,
            }
        })
        .collect()
}

/// Recall/precision after each non-ignored detection.
pub fn pr_curve(flags: &[MatchFlag], n_positive: usize) -> Vec<(f64, f64)> {
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(flags.len());
    for f in flags {
        match f {
            MatchFlag::Tp => tp += 1,
            MatchFlag::Fp => fp += 1,
            MatchFlag::Ignored => continue,
        }
        let recall = if n_positive == 0 { 0.0 } else { tp as f64 / n_positive as f64 };
        curve.push((recall, tp as f64 / (tp + fp) as f64));
    }
    curve
}

/// AP of score-sorted match flags against `n_positive` objects.
pub fn average_precision(flags: &[MatchFlag], n_positive: usize, mode: ApMode) -> f64 {
    if n_positive == 0 {
        log::warn!("average precision requested with no positive objects; reporting 0");
        return 0.0;
    }
    let curve = pr_curve(flags, n_positive);
    match mode {
        ApMode::Voc07 => {
            let mut total = 0.0;
            for i in 0..=10 {
                let t = i as f64 / 10.0;
                let p = curve
                    .iter()
                    .filter(|(r, _)| *r >= t)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max);
                total += p;
            }
            (total / 11.0).min(1.0)
        }
        ApMode::Voc12 => {
            let mut mrec = Vec::with_capacity(curve.len() + 2);
            let mut mpre = Vec::with_capacity(curve.len() + 2);
            mrec.push(0.0);
            mpre.push(0.0);
            for (r, p) in &curve {
                mrec.push(*r);
                mpre.push(*p);
            }
            mrec.push(1.0);
            mpre.push(0.0);
            for i in (0..mpre.len() - 1).rev() {
                mpre[i] = mpre[i].max(mpre[i + 1]);
            }
            let mut ap = 0.0;
            for i in 0..mrec.len() - 1 {
                if mrec[i + 1] != mrec[i] {
                    ap += (mrec[i + 1] - mrec[i]) * mpre[i + 1];
                }
            }
            // rounding in the recall steps can overshoot by an ulp
            ap.min(1.0)
        }
    }
}

/// Per-category AP and their mean for one run.
pub fn evaluate(run: &DetectionRun, ground_truth: &GroundTruth, config: &EvalConfig) -> Result<EvalResult> {
    evaluate_detections(&run.detections, ground_truth, config)
}

/// Category, AP, PR curve and positive count.
type CategoryScore = (String, f64, Vec<(f64, f64)>, usize);

pub fn evaluate_detections(
    detections: &[Detection],
    ground_truth: &GroundTruth,
    config: &EvalConfig,
) -> Result<EvalResult> {
    if !(config.matching_iou > 0.0 && config.matching_iou <= 1.0) {
        return Err(Error::Config(format!(
            "matching IoU must lie in (0, 1], got {}",
            config.matching_iou
        )));
    }
    let categories = config.categories.clone().unwrap_or_else(|| ground_truth.categories());
    let per_cat: Vec<CategoryScore> = categories
        .par_iter()
        .map(|cat| {
            let mut dets: Vec<&Detection> = detections.iter().filter(|d| &d.category == cat).collect();
            // stable: equal scores keep input order
            dets.sort_by(|a, b| b.score.total_cmp(&a.score));
            let gts: Vec<&GroundTruthObject> = ground_truth.objects.iter().filter(|g| &g.category == cat).collect();
            let n_pos = gts.iter().filter(|g| !g.difficult).count();
            let flags = match_detections(&dets, &gts, config.matching_iou);
            let ap = average_precision(&flags, n_pos, config.ap_mode);
            (cat.clone(), ap, pr_curve(&flags, n_pos), n_pos)
        })
        .collect();

    let mut result = EvalResult {
        per_category_ap: BTreeMap::new(),
        map: 0.0,
        pr_curves: BTreeMap::new(),
        n_positive: BTreeMap::new(),
        matching_iou: config.matching_iou,
        ap_mode: config.ap_mode,
    };
    for (cat, ap, curve, n_pos) in per_cat {
        result.per_category_ap.insert(cat.clone(), ap);
        result.pr_curves.insert(cat.clone(), curve);
        result.n_positive.insert(cat, n_pos);
    }
    if !result.per_category_ap.is_empty() {
        result.map = result.per_category_ap.values().sum::<f64>() / result.per_category_ap.len() as f64;
    }
    Ok(result)
}

/// Plain-text table with one row per named result: per-category AP then mAP,
/// in percent.
pub fn format_table(rows: &[(String, &EvalResult)]) -> String {
    let mut cats: Vec<&String> = rows.iter().flat_map(|(_, r)| r.per_category_ap.keys()).collect();
    cats.sort();
    cats.dedup();
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("Method".len());
    let col_w: Vec<usize> = cats.iter().map(|c| c.len().max(6)).collect();

    let mut out = format!("{:<name_w$}", "Method");
    for (c, w) in cats.iter().zip(&col_w) {
        out.push_str(&format!(" | {c:>w$}"));
    }
    out.push_str(" |    mAP\n");
    out.push_str(&"-".repeat(out.trim_end().len()));
    out.push('\n');
    for (name, r) in rows {
        out.push_str(&format!("{name:<name_w$}"));
        for (c, w) in cats.iter().zip(&col_w) {
            match r.per_category_ap.get(*c) {
                Some(ap) => out.push_str(&format!(" | {:>w$.2}", ap * 100.0)),
                None => out.push_str(&format!(" | {:>w$}", "-")),
            }
        }
        out.push_str(&format!(" | {:>6.2}\n", r.map * 100.0));
    }
    out
}
