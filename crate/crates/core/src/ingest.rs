//! Detection runs and ground truth: in-memory types plus the DOTA text
//! convention and the versioned JSON interchange formats.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CornerQuad, Obb};
use crate::prob::{clamp_score, logit};

pub const RUN_SCHEMA: &str = "obbstack-run/1";
pub const GT_SCHEMA: &str = "obbstack-gt/1";

/// Default ingest pre-filter on raw scores.
pub const DEFAULT_MIN_SCORE: f64 = 0.001;

/// One detected box with its confidence and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub obb: Obb,
    pub score: f64,
    pub logit: f64,
    /// 1-based index of the source model within the ensemble.
    pub model_index: usize,
    pub category: String,
    pub image_id: String,
}

impl Detection {
    /// Builds a detection from a raw score, clamping it and deriving the logit.
    pub fn from_score(
        obb: Obb,
        score: f64,
        model_index: usize,
        category: impl Into<String>,
        image_id: impl Into<String>,
    ) -> Result<Self> {
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(Error::Domain(format!("score {score} outside [0, 1]")));
        }
        let score = clamp_score(score);
        Ok(Detection {
            obb,
            score,
            logit: logit(score),
            model_index,
            category: category.into(),
            image_id: image_id.into(),
        })
    }

    /// Deterministic processing order: score descending, then model index,
    /// then geometry.
    pub fn rank_cmp(&self, other: &Detection) -> std::cmp::Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.model_index.cmp(&other.model_index))
            .then(self.obb.total_cmp(&other.obb))
    }
}

/// All detections produced by one model.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRun {
    pub model_name: String,
    pub model_index: usize,
    pub detections: Vec<Detection>,
}

impl DetectionRun {
    pub fn new(model_name: impl Into<String>, model_index: usize) -> Self {
        DetectionRun {
            model_name: model_name.into(),
            model_index,
            detections: Vec::new(),
        }
    }

    pub fn retain_min_score(&mut self, min_score: f64) {
        self.detections.retain(|d| d.score >= min_score);
    }

    /// Rewrites the run's index onto every detection.
    pub fn set_model_index(&mut self, model_index: usize) {
        self.model_index = model_index;
        for d in &mut self.detections {
            d.model_index = model_index;
        }
    }

    pub fn categories(&self) -> Vec<String> {
        let mut c: Vec<String> = self.detections.iter().map(|d| d.category.clone()).collect();
        c.sort();
        c.dedup();
        c
    }
}

/// Groups detections by `(image_id, category)`, preserving input order
/// within each group.
pub fn group_detections<'a>(
    detections: impl IntoIterator<Item = &'a Detection>,
) -> BTreeMap<(String, String), Vec<Detection>> {
    let mut groups: BTreeMap<(String, String), Vec<Detection>> = BTreeMap::new();
    for d in detections {
        groups
            .entry((d.image_id.clone(), d.category.clone()))
            .or_default()
            .push(d.clone());
    }
    groups
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthObject {
    pub obb: Obb,
    pub category: String,
    pub difficult: bool,
    pub image_id: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub objects: Vec<GroundTruthObject>,
}

impl GroundTruth {
    pub fn new(objects: Vec<GroundTruthObject>) -> Self {
        GroundTruth { objects }
    }

    pub fn grouped(&self) -> BTreeMap<(String, String), Vec<&GroundTruthObject>> {
        let mut groups: BTreeMap<(String, String), Vec<&GroundTruthObject>> = BTreeMap::new();
        for o in &self.objects {
            groups
                .entry((o.image_id.clone(), o.category.clone()))
                .or_default()
                .push(o);
        }
        groups
    }

    pub fn categories(&self) -> Vec<String> {
        let mut c: Vec<String> = self.objects.iter().map(|o| o.category.clone()).collect();
        c.sort();
        c.dedup();
        c
    }

    pub fn image_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.objects.iter().map(|o| o.image_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Keeps only the objects of the given images.
    pub fn subset(&self, images: &std::collections::BTreeSet<String>) -> GroundTruth {
        GroundTruth::new(
            self.objects
                .iter()
                .filter(|o| images.contains(&o.image_id))
                .cloned()
                .collect(),
        )
    }
}

// DOTA text convention

const DOTA_DET_PREFIX: &str = "Task1_";

fn sorted_txt_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "txt") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn parse_f64(tok: &str, path: &Path, line: usize, what: &str) -> Result<f64> {
    tok.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::parse(path, line, format!("invalid {what} {tok:?}")))
}

fn parse_corners(tokens: &[&str], path: &Path, line: usize) -> Result<Obb> {
    let mut c = [0.0; 8];
    for (slot, tok) in c.iter_mut().zip(tokens) {
        *slot = parse_f64(tok, path, line, "coordinate")?;
    }
    Obb::from_corners(&CornerQuad::from_coords(c)).map_err(|e| Error::parse(path, line, e.to_string()))
}

/// Reads a directory of `Task1_<category>.txt` files, one detection per line:
/// `image_id score x1 y1 x2 y2 x3 y3 x4 y4`.
///
/// Detections scoring below `min_score` are dropped.
pub fn parse_dota_detections(
    dir: &Path,
    model_name: &str,
    model_index: usize,
    min_score: f64,
) -> Result<DetectionRun> {
    let mut run = DetectionRun::new(model_name, model_index);
    let files: Vec<PathBuf> = sorted_txt_files(dir)?
        .into_iter()
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(DOTA_DET_PREFIX))
        })
        .collect();
    if files.is_empty() {
        log::warn!("no Task1_<category>.txt files in {}", dir.display());
    }
    for path in files {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let category = stem[DOTA_DET_PREFIX.len()..].to_string();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let tokens: Vec<&str> = raw.split_whitespace().collect();
            if tokens.is_empty() {
                continue;
            }
            if tokens.len() != 10 {
                return Err(Error::parse(
                    &path,
                    line,
                    format!("expected 10 tokens, found {}", tokens.len()),
                ));
            }
            let score = parse_f64(tokens[1], &path, line, "score")?;
            let obb = parse_corners(&tokens[2..], &path, line)?;
            let det = Detection::from_score(obb, score, model_index, category.clone(), tokens[0])
                .map_err(|e| Error::parse(&path, line, e.to_string()))?;
            if det.score >= min_score {
                run.detections.push(det);
            }
        }
    }
    Ok(run)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn push_coords(out: &mut String, obb: &Obb) {
    for v in obb.corners().coords() {
        out.push(' ');
        out.push_str(&v.to_string());
    }
}

/// Writes a run as DOTA `Task1_<category>.txt` files, one per category.
pub fn write_dota_detections(run: &DetectionRun, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut by_cat: BTreeMap<&str, String> = BTreeMap::new();
    for d in &run.detections {
        let out = by_cat.entry(d.category.as_str()).or_default();
        out.push_str(&d.image_id);
        out.push(' ');
        out.push_str(&d.score.to_string());
        push_coords(out, &d.obb);
        out.push('\n');
    }
    for (cat, contents) in by_cat {
        write_file(&dir.join(format!("{DOTA_DET_PREFIX}{cat}.txt")), &contents)?;
    }
    Ok(())
}

/// Reads a directory of per-image DOTA label files. Each object line is
/// `x1 y1 x2 y2 x3 y3 x4 y4 category difficult`; `imagesource` and `gsd`
/// header lines are skipped.
pub fn parse_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let mut objects = Vec::new();
    for path in sorted_txt_files(dir)? {
        let image_id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with("imagesource") || trimmed.starts_with("gsd") {
                continue;
            }
            let tokens: Vec<&str> = trimmed.split_whitespace().collect();
            if tokens.len() != 10 {
                return Err(Error::parse(
                    &path,
                    line,
                    format!("expected 10 tokens, found {}", tokens.len()),
                ));
            }
            let obb = parse_corners(&tokens[..8], &path, line)?;
            let difficult = match tokens[9] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::parse(&path, line, format!("difficult flag {other:?} is not 0/1")))
                }
            };
            objects.push(GroundTruthObject {
                obb,
                category: tokens[8].to_string(),
                difficult,
                image_id: image_id.clone(),
            });
        }
    }
    Ok(GroundTruth::new(objects))
}

/// Writes one DOTA label file per image.
pub fn write_ground_truth(gt: &GroundTruth, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let mut by_image: BTreeMap<&str, String> = BTreeMap::new();
    for o in &gt.objects {
        let out = by_image.entry(o.image_id.as_str()).or_default();
        let coords: Vec<String> = o.obb.corners().coords().iter().map(|v| v.to_string()).collect();
        out.push_str(&coords.join(" "));
        out.push_str(&format!(" {} {}\n", o.category, u8::from(o.difficult)));
    }
    for (image, contents) in by_image {
        write_file(&dir.join(format!("{image}.txt")), &contents)?;
    }
    Ok(())
}

// JSON interchange

#[derive(Debug, Serialize, Deserialize)]
struct DetectionRecord {
    image: String,
    category: String,
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    logit: Option<f64>,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    theta: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunFile {
    schema: String,
    model_name: String,
    model_index: usize,
    detections: Vec<DetectionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GtRecord {
    image: String,
    category: String,
    difficult: bool,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    theta: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct GtFile {
    schema: String,
    objects: Vec<GtRecord>,
}

fn check_schema(found: &str, expected: &str) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(Error::Schema(format!("unsupported schema {found:?}, expected {expected:?}")))
    }
}

/// Peeks at the `schema` field first so version mismatches are reported as
/// such rather than as field errors.
fn parse_versioned<T: serde::de::DeserializeOwned>(text: &str, expected: &str) -> Result<T> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Schema(format!("malformed JSON: {e}")))?;
    match value.get("schema").and_then(|s| s.as_str()) {
        Some(found) => check_schema(found, expected)?,
        None => return Err(Error::Schema("missing \"schema\" field".into())),
    }
    serde_json::from_value(value).map_err(|e| Error::Schema(format!("{expected}: {e}")))
}

pub fn run_to_json(run: &DetectionRun, provenance: Option<serde_json::Value>) -> String {
    let file = RunFile {
        schema: RUN_SCHEMA.to_string(),
        model_name: run.model_name.clone(),
        model_index: run.model_index,
        detections: run
            .detections
            .iter()
            .map(|d| DetectionRecord {
                image: d.image_id.clone(),
                category: d.category.clone(),
                score: d.score,
                logit: Some(d.logit),
                x: d.obb.x,
                y: d.obb.y,
                w: d.obb.w,
                h: d.obb.h,
                theta: d.obb.theta,
            })
            .collect(),
        provenance,
    };
    let mut s = serde_json::to_string_pretty(&file).expect("run serialization is infallible");
    s.push('\n');
    s
}

pub fn run_from_json(text: &str) -> Result<DetectionRun> {
    let file: RunFile = parse_versioned(text, RUN_SCHEMA)?;
    let mut run = DetectionRun::new(file.model_name, file.model_index);
    for (i, r) in file.detections.into_iter().enumerate() {
        let obb = Obb::canonicalize(r.x, r.y, r.w, r.h, r.theta)
            .map_err(|e| Error::Schema(format!("detection {i}: {e}")))?;
        let mut det = Detection::from_score(obb, r.score, file.model_index, r.category, r.image)
            .map_err(|e| Error::Schema(format!("detection {i}: {e}")))?;
        if let Some(z) = r.logit {
            if !z.is_finite() {
                return Err(Error::Schema(format!("detection {i}: non-finite logit")));
            }
            det.logit = z;
        }
        run.detections.push(det);
    }
    Ok(run)
}

pub fn write_run_json(run: &DetectionRun, path: &Path, provenance: Option<serde_json::Value>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(run_to_json(run, provenance).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_run_json(path: &Path) -> Result<DetectionRun> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    run_from_json(&text)
}

pub fn gt_to_json(gt: &GroundTruth) -> String {
    let file = GtFile {
        schema: GT_SCHEMA.to_string(),
        objects: gt
            .objects
            .iter()
            .map(|o| GtRecord {
                image: o.image_id.clone(),
                category: o.category.clone(),
                difficult: o.difficult,
                x: o.obb.x,
                y: o.obb.y,
                w: o.obb.w,
                h: o.obb.h,
                theta: o.obb.theta,
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("ground-truth serialization is infallible");
    s.push('\n');
    s
}

pub fn gt_from_json(text: &str) -> Result<GroundTruth> {
    let file: GtFile = parse_versioned(text, GT_SCHEMA)?;
    let mut objects = Vec::with_capacity(file.objects.len());
    for (i, r) in file.objects.into_iter().enumerate() {
        let obb = Obb::canonicalize(r.x, r.y, r.w, r.h, r.theta)
            .map_err(|e| Error::Schema(format!("object {i}: {e}")))?;
        objects.push(GroundTruthObject {
            obb,
            category: r.category,
            difficult: r.difficult,
            image_id: r.image,
        });
    }
    Ok(GroundTruth::new(objects))
}

pub fn write_gt_json(gt: &GroundTruth, path: &Path) -> Result<()> {
    write_file(path, &gt_to_json(gt))
}

pub fn read_gt_json(path: &Path) -> Result<GroundTruth> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    gt_from_json(&text)
}

/// Loads a run from either a JSON file or a DOTA detection directory.
/// The DOTA model name defaults to the directory name.
pub fn load_run(path: &Path, model_index: usize, min_score: f64) -> Result<DetectionRun> {
    let mut run = if path.is_dir() {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("model")
            .to_string();
        parse_dota_detections(path, &name, model_index, min_score)?
    } else {
        read_run_json(path)?
    };
    run.set_model_index(model_index);
    run.retain_min_score(min_score);
    Ok(run)
}

/// Loads ground truth from either a JSON file or a DOTA label directory.
pub fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    if path.is_dir() {
        parse_ground_truth(path)
    } else {
        read_gt_json(path)
    }
}
