//! Seeded synthetic scenes and simulated detectors with controllable skill,
//! recall, miscalibration, false-positive rate and redundancy.
//!
//! Every random draw comes from a ChaCha stream keyed by `(seed, purpose,
//! profile, image)`, so images can be generated in parallel and a clone can
//! replay its parent's draws.
//!
//! Score model: each object carries a latent quality `q ∈ (0, 1]` shared by
//! all detectors. A detector that finds the object draws a true logit
//! `z = skill·(q − 0.25) + ε`, `ε ~ N(0, 1)`, and localizes it correctly with
//! probability `σ(z)`; otherwise its box is displaced far enough to be a
//! false positive. True logits are therefore calibrated, and the reported
//! logit is `temperature · z`. Background false positives get strongly
//! negative true logits.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_detections, format_table, EvalResult};
use crate::fusion::{to_run, FusedDetection, Method};
use crate::geometry::{intersection_area, Obb};
use crate::ingest::{Detection, DetectionRun, GroundTruth, GroundTruthObject};
use crate::metalearner::MetaLearner;
use crate::pipeline;
use crate::prob::{clamp_score, max_logit, sigmoid};

const QUALITY_OFFSET: f64 = 0.25;
const MIN_SIZE: f64 = 8.0;
const MAX_SIZE: f64 = 120.0;
const MAX_ASPECT: f64 = 6.0;
const PLACEMENT_ATTEMPTS: usize = 100;

#[derive(Clone, Copy)]
#[repr(u64)]
enum Purpose {
    Scene = 1,
    Quality = 2,
    Detect = 3,
    CloneJitter = 4,
    Split = 5,
}

fn profile_slot(name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    u64::from(u32::from_le_bytes([digest[0], digest[1], digest[2], digest[3]]))
}

fn stream(seed: u64, purpose: Purpose, slot: u64, image: usize) -> ChaCha8Rng {
    debug_assert!(image < (1 << 24));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) | (slot << 24) | image as u64);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Uniform draw in `(0, 1]`.
fn unit_open_closed(rng: &mut ChaCha8Rng) -> f64 {
    1.0 - rng.random::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectCount {
    pub min: usize,
    pub max: usize,
}

impl ObjectCount {
    pub fn fixed(n: usize) -> Self {
        ObjectCount { min: n, max: n }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub images: Vec<String>,
    /// Objects per image, parallel to `images`.
    pub objects: Vec<Vec<GroundTruthObject>>,
    pub field: [f64; 2],
    pub categories: Vec<String>,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth::new(self.objects.iter().flatten().cloned().collect())
    }
}

fn random_box(rng: &mut ChaCha8Rng, field: [f64; 2]) -> Obb {
    let w = (MIN_SIZE.ln() + rng.random::<f64>() * (MAX_SIZE.ln() - MIN_SIZE.ln())).exp();
    let max_aspect = MAX_ASPECT.min(w / MIN_SIZE);
    let aspect = 1.0 + rng.random::<f64>() * (max_aspect - 1.0);
    let h = w / aspect;
    let theta = rng.random::<f64>() * std::f64::consts::PI;
    let margin = w.hypot(h) / 2.0;
    let x = margin + rng.random::<f64>() * (field[0] - 2.0 * margin).max(0.0);
    let y = margin + rng.random::<f64>() * (field[1] - 2.0 * margin).max(0.0);
    Obb::canonicalize(x, y, w, h, theta).expect("generated extents are positive")
}

/// Random non-overlapping ground truth on `n_images` images of size `field`.
pub fn generate_scenes(
    n_images: usize,
    counts: ObjectCount,
    field: [f64; 2],
    categories: &[String],
    seed: u64,
) -> Result<SyntheticScene> {
    if categories.is_empty() {
        return Err(Error::Config("scene needs at least one category".into()));
    }
    if counts.min > counts.max {
        return Err(Error::Config("objects_per_image min exceeds max".into()));
    }
    if !(field[0] > 2.0 * MAX_SIZE && field[1] > 2.0 * MAX_SIZE) {
        return Err(Error::Config(format!("field must exceed {} px per side", 2.0 * MAX_SIZE)));
    }
    if n_images >= (1 << 24) {
        return Err(Error::Config("too many images".into()));
    }
    let images: Vec<String> = (0..n_images).map(|i| format!("S{i:05}")).collect();
    let objects = images
        .par_iter()
        .enumerate()
        .map(|(i, image_id)| {
            let mut rng = stream(seed, Purpose::Scene, 0, i);
            let n = rng.random_range(counts.min..=counts.max);
            let mut placed: Vec<GroundTruthObject> = Vec::with_capacity(n);
            for _ in 0..n {
                let category = categories[rng.random_range(0..categories.len())].clone();
                let mut obb = random_box(&mut rng, field);
                for _ in 0..PLACEMENT_ATTEMPTS {
                    if placed.iter().all(|p| intersection_area(&p.obb, &obb) == 0.0) {
                        break;
                    }
                    obb = random_box(&mut rng, field);
                }
                placed.push(GroundTruthObject {
                    obb,
                    category,
                    difficult: false,
                    image_id: image_id.clone(),
                });
            }
            placed
        })
        .collect();
    Ok(SyntheticScene {
        images,
        objects,
        field,
        categories: categories.to_vec(),
        seed,
    })
}

fn default_recall() -> f64 {
    0.9
}
fn default_fp_rate() -> f64 {
    1.0
}
fn default_loc_sigma() -> f64 {
    0.03
}
fn default_angle_sigma() -> f64 {
    0.02
}
fn default_skill() -> f64 {
    4.0
}
fn default_temperature() -> f64 {
    1.0
}

/// Simulated detector behavior. A profile with `clone_of` set replays the
/// named parent's draws (and inherits its parameters once resolved by
/// [`Scenario::profiles`]), acting independently on a `clone_noise`
/// fraction of objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorProfile {
    pub name: String,
    #[serde(default = "default_recall")]
    pub recall: f64,
    /// Expected background false positives per image.
    #[serde(default = "default_fp_rate")]
    pub fp_rate: f64,
    /// Localization noise, as a fraction of the box extents.
    #[serde(default = "default_loc_sigma")]
    pub loc_sigma: f64,
    #[serde(default = "default_angle_sigma")]
    pub angle_sigma: f64,
    /// Slope of the true logit in object quality.
    #[serde(default = "default_skill")]
    pub skill: f64,
    /// Reported logit = temperature × true logit; > 1 is overconfident.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clone_of: Option<String>,
    #[serde(default)]
    pub clone_noise: f64,
}

impl DetectorProfile {
    pub fn new(name: impl Into<String>) -> Self {
        DetectorProfile {
            name: name.into(),
            recall: default_recall(),
            fp_rate: default_fp_rate(),
            loc_sigma: default_loc_sigma(),
            angle_sigma: default_angle_sigma(),
            skill: default_skill(),
            temperature: default_temperature(),
            clone_of: None,
            clone_noise: 0.0,
        }
    }

    /// A copy of `parent` that replays its draws under a new name.
    pub fn clone_named(parent: &DetectorProfile, name: impl Into<String>, clone_noise: f64) -> Self {
        DetectorProfile {
            name: name.into(),
            clone_of: Some(parent.clone_of.clone().unwrap_or_else(|| parent.name.clone())),
            clone_noise,
            ..parent.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("profile {:?}: {what}", self.name)));
        if !(self.recall > 0.0 && self.recall <= 1.0) {
            return bad("recall must lie in (0, 1]");
        }
        if !(self.fp_rate >= 0.0 && self.fp_rate.is_finite()) {
            return bad("fp_rate must be finite and ≥ 0");
        }
        for (v, what) in [
            (self.loc_sigma, "loc_sigma"),
            (self.angle_sigma, "angle_sigma"),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{what} must be finite and ≥ 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.clone_noise) {
            return bad("clone_noise must lie in [0, 1]");
        }
        if !(self.skill > 0.0 && self.skill.is_finite()) {
            return bad("skill must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        Ok(())
    }
}

fn make_detection(
    obb: Obb,
    true_logit: f64,
    profile: &DetectorProfile,
    category: &str,
    image_id: &str,
) -> Detection {
    let bound = max_logit();
    let reported = (profile.temperature * true_logit).clamp(-bound, bound);
    Detection {
        obb,
        score: clamp_score(sigmoid(reported)),
        logit: reported,
        model_index: 1,
        category: category.to_string(),
        image_id: image_id.to_string(),
    }
}

fn place(obj: &Obb, along: f64, across: f64, w_scale: f64, h_scale: f64, dtheta: f64) -> Obb {
    let (s, c) = obj.theta.sin_cos();
    Obb::canonicalize(
        obj.x + c * along - s * across,
        obj.y + s * along + c * across,
        obj.w * w_scale,
        obj.h * h_scale,
        obj.theta + dtheta,
    )
    .expect("scaled extents stay positive")
}

/// Every random quantity one detector needs for one object. Drawn in full
/// whether or not the object is found, so streams stay aligned.
struct ObjectDraw {
    found: f64,
    eps: f64,
    correct: f64,
    noise: [f64; 5],
    shift: f64,
}

impl ObjectDraw {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        ObjectDraw {
            found: rng.random(),
            eps: normal(rng),
            correct: rng.random(),
            noise: std::array::from_fn(|_| normal(rng)),
            shift: (0.75 + 0.5 * rng.random::<f64>()) * if rng.random::<bool>() { 1.0 } else { -1.0 },
        }
    }
}

fn detect_object(obj: &GroundTruthObject, q: f64, d: &ObjectDraw, profile: &DetectorProfile) -> Option<Detection> {
    if d.found >= profile.recall {
        return None;
    }
    let z = profile.skill * (q - QUALITY_OFFSET) + d.eps;
    let correct = d.correct < sigmoid(z);
    let g = &obj.obb;
    let along = profile.loc_sigma * g.w * d.noise[0] + if correct { 0.0 } else { d.shift * g.w };
    let obb = place(
        g,
        along,
        profile.loc_sigma * g.h * d.noise[1],
        (profile.loc_sigma * d.noise[2]).exp(),
        (profile.loc_sigma * d.noise[3]).exp(),
        profile.angle_sigma * d.noise[4],
    );
    Some(make_detection(obb, z, profile, &obj.category, &obj.image_id))
}

fn background(rng: &mut ChaCha8Rng, scene: &SyntheticScene, profile: &DetectorProfile, image_id: &str) -> Vec<Detection> {
    let n = if profile.fp_rate > 0.0 {
        Poisson::new(profile.fp_rate).expect("positive rate").sample(rng) as usize
    } else {
        0
    };
    (0..n)
        .map(|_| {
            let category = scene.categories[rng.random_range(0..scene.categories.len())].clone();
            let obb = random_box(rng, scene.field);
            let z = -profile.skill * (1.0 + unit_open_closed(rng)) + normal(rng);
            make_detection(obb, z, profile, &category, image_id)
        })
        .collect()
}

/// Simulates one detector over every image of the scene. The returned run
/// has model index 1.
///
/// A clone replays its parent's draws, except that on each object (and on
/// each image's background) it behaves independently with probability
/// `clone_noise`. `clone_noise = 0` reproduces the parent exactly.
pub fn simulate_detector(scene: &SyntheticScene, profile: &DetectorProfile, seed: u64) -> Result<DetectionRun> {
    profile.validate()?;
    let draw_slot = profile_slot(profile.clone_of.as_deref().unwrap_or(&profile.name));
    let own_slot = profile_slot(&profile.name);
    let is_clone = profile.clone_of.is_some();

    let per_image: Vec<Vec<Detection>> = scene
        .images
        .par_iter()
        .enumerate()
        .map(|(i, image_id)| {
            let mut quality = stream(seed, Purpose::Quality, 0, i);
            let mut shared = stream(seed, Purpose::Detect, draw_slot, i);
            let mut own = stream(seed, Purpose::CloneJitter, own_slot, i);
            let independent = |own: &mut ChaCha8Rng| is_clone && own.random::<f64>() < profile.clone_noise;

            let mut out = Vec::new();
            for obj in &scene.objects[i] {
                let q = unit_open_closed(&mut quality);
                let parent = ObjectDraw::sample(&mut shared);
                let d = if is_clone {
                    let mine = ObjectDraw::sample(&mut own);
                    if independent(&mut own) { mine } else { parent }
                } else {
                    parent
                };
                out.extend(detect_object(obj, q, &d, profile));
            }
            let parent_bg = background(&mut shared, scene, profile, image_id);
            if is_clone && independent(&mut own) {
                out.extend(background(&mut own, scene, profile, image_id));
            } else {
                out.extend(parent_bg);
            }
            out
        })
        .collect();

    Ok(DetectionRun {
        model_name: profile.name.clone(),
        model_index: 1,
        detections: per_image.into_iter().flatten().collect(),
    })
}

fn default_val_fraction() -> f64 {
    0.5
}

fn default_field() -> [f64; 2] {
    [1024.0, 1024.0]
}

/// A benchmark scenario, loadable from JSON or TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub n_images: usize,
    pub objects_per_image: ObjectCount,
    #[serde(default = "default_field")]
    pub field: [f64; 2],
    pub categories: Vec<String>,
    /// Fraction of images used to fit the meta-learner; the rest is the test split.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    pub seeds: Vec<u64>,
    pub profiles: Vec<DetectorProfile>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "toml") {
            Self::from_toml(&text)
        } else {
            Self::from_json(&text)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config("val_fraction must lie in (0, 1)".into()));
        }
        if self.profiles.is_empty() {
            return Err(Error::Config("scenario needs at least one profile".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("scenario needs at least one seed".into()));
        }
        let names: BTreeSet<&str> = self.profiles.iter().map(|p| p.name.as_str()).collect();
        if names.len() != self.profiles.len() {
            return Err(Error::Config("profile names must be unique".into()));
        }
        self.profiles().map(|_| ())
    }

    /// Profiles with clone parameters inherited from their parents.
    pub fn profiles(&self) -> Result<Vec<DetectorProfile>> {
        let by_name: BTreeMap<&str, &DetectorProfile> =
            self.profiles.iter().map(|p| (p.name.as_str(), p)).collect();
        self.profiles
            .iter()
            .map(|p| {
                let resolved = match &p.clone_of {
                    None => p.clone(),
                    Some(parent) => {
                        let base = by_name
                            .get(parent.as_str())
                            .ok_or_else(|| Error::Config(format!("{:?} clones unknown profile {parent:?}", p.name)))?;
                        if base.clone_of.is_some() {
                            return Err(Error::Config(format!("{:?} clones another clone", p.name)));
                        }
                        DetectorProfile::clone_named(base, p.name.clone(), p.clone_noise)
                    }
                };
                resolved.validate()?;
                Ok(resolved)
            })
            .collect()
    }
}

fn split_images(images: &[String], val_fraction: f64, seed: u64) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut rng = stream(seed, Purpose::Split, 0, 0);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_val = ((images.len() as f64) * val_fraction).round() as usize;
    let val = order[..n_val].iter().map(|&i| images[i].clone()).collect();
    let test = order[n_val..].iter().map(|&i| images[i].clone()).collect();
    (val, test)
}

fn restrict(run: &DetectionRun, images: &BTreeSet<String>) -> DetectionRun {
    DetectionRun {
        model_name: run.model_name.clone(),
        model_index: run.model_index,
        detections: run
            .detections
            .iter()
            .filter(|d| images.contains(&d.image_id))
            .cloned()
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub seed: u64,
    pub models: Vec<String>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Test-split mAP of each member, in model order.
    pub member_map: Vec<f64>,
    pub nms_map: f64,
    pub wbf_map: f64,
    pub stacking_map: f64,
}

impl BenchmarkReport {
    pub fn best_member_map(&self) -> f64 {
        self.member_map.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn method_map(&self, method: Method) -> f64 {
        match method {
            Method::Stacking => self.stacking_map,
            Method::Nms => self.nms_map,
            Method::Wbf => self.wbf_map,
        }
    }
}

/// Everything one seeded benchmark produced.
#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub scene: SyntheticScene,
    pub val_gt: GroundTruth,
    pub test_gt: GroundTruth,
    pub val_runs: Vec<DetectionRun>,
    pub test_runs: Vec<DetectionRun>,
    pub learner: MetaLearner,
    pub fused: BTreeMap<&'static str, Vec<FusedDetection>>,
    pub member_results: Vec<EvalResult>,
    pub method_results: BTreeMap<&'static str, EvalResult>,
    pub report: BenchmarkReport,
}

/// Simulates every profile on a fresh scene, fits the meta-learner on the
/// validation split and scores members and ensembles on the test split.
pub fn run_benchmark(scenario: &Scenario, seed: u64) -> Result<BenchmarkOutcome> {
    scenario.validate()?;
    let cfg = &scenario.pipeline;
    let scene = generate_scenes(
        scenario.n_images,
        scenario.objects_per_image,
        scenario.field,
        &scenario.categories,
        seed,
    )?;
    let profiles = scenario.profiles()?;
    let mut runs = Vec::with_capacity(profiles.len());
    for (k, p) in profiles.iter().enumerate() {
        let mut run = simulate_detector(&scene, p, seed)?;
        run.set_model_index(k + 1);
        run.retain_min_score(cfg.min_score);
        runs.push(run);
    }

    let (val_images, test_images) = split_images(&scene.images, scenario.val_fraction, seed);
    let gt = scene.ground_truth();
    let val_gt = gt.subset(&val_images);
    let test_gt = gt.subset(&test_images);
    let val_runs: Vec<DetectionRun> = runs.iter().map(|r| restrict(r, &val_images)).collect();
    let test_runs: Vec<DetectionRun> = runs.iter().map(|r| restrict(r, &test_images)).collect();

    let learner = pipeline::train_meta(&val_runs, &val_gt, cfg)?;
    let eval_cfg = cfg.eval_config();
    let member_results = test_runs
        .iter()
        .map(|r| evaluate(r, &test_gt, &eval_cfg))
        .collect::<Result<Vec<_>>>()?;

    let mut fused = BTreeMap::new();
    let mut method_results = BTreeMap::new();
    for method in [Method::Nms, Method::Wbf, Method::Stacking] {
        let mcfg = PipelineConfig { method, ..cfg.clone() };
        let out = pipeline::fuse(&test_runs, Some(&learner), &mcfg)?;
        let run = to_run(&out, method.name())?;
        method_results.insert(method.name(), evaluate_detections(&run.detections, &test_gt, &eval_cfg)?);
        fused.insert(method.name(), out);
    }

    let report = BenchmarkReport {
        seed,
        models: learner.models.clone(),
        weights: learner.weights.clone(),
        intercept: learner.intercept,
        member_map: member_results.iter().map(|r| r.map).collect(),
        nms_map: method_results["nms"].map,
        wbf_map: method_results["wbf"].map,
        stacking_map: method_results["stacking"].map,
    };
    Ok(BenchmarkOutcome {
        scene,
        val_gt,
        test_gt,
        val_runs,
        test_runs,
        learner,
        fused,
        member_results,
        method_results,
        report,
    })
}

/// Text summary of several seeded benchmark reports: per-seed mAP rows, the
/// mean row, and the fitted weights.
pub fn summarize(reports: &[BenchmarkReport]) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let mut header: Vec<String> = first.models.clone();
    header.extend(["NMS", "WBF", "Stacking"].map(String::from));
    let width = header.iter().map(|h| h.len()).max().unwrap_or(8).max(8);
    let mut out = format!("{:<8}", "seed");
    for h in &header {
        out.push_str(&format!(" {h:>width$}"));
    }
    out.push('\n');
    let row = |label: String, values: Vec<f64>| {
        let mut line = format!("{label:<8}");
        for v in values {
            line.push_str(&format!(" {:>width$.2}", v * 100.0));
        }
        line.push('\n');
        line
    };
    let values = |r: &BenchmarkReport| {
        let mut v = r.member_map.clone();
        v.extend([r.nms_map, r.wbf_map, r.stacking_map]);
        v
    };
    for r in reports {
        out.push_str(&row(r.seed.to_string(), values(r)));
    }
    let n = reports.len() as f64;
    let mut mean = vec![0.0; header.len()];
    for r in reports {
        for (m, v) in mean.iter_mut().zip(values(r)) {
            *m += v / n;
        }
    }
    out.push_str(&row("mean".into(), mean));
    out.push_str("\nmeta-learner weights\n");
    for r in reports {
        let w: Vec<String> = r.weights.iter().map(|w| format!("{w:.4}")).collect();
        out.push_str(&format!("{:<8} [{}]  b = {:.4}\n", r.seed, w.join(", "), r.intercept));
    }
    out
}

/// Per-method evaluation table for a single outcome.
pub fn outcome_table(outcome: &BenchmarkOutcome) -> String {
    let mut rows: Vec<(String, &EvalResult)> = outcome
        .report
        .models
        .iter()
        .cloned()
        .zip(outcome.member_results.iter())
        .collect();
    for name in ["nms", "wbf", "stacking"] {
        rows.push((name.to_uppercase(), &outcome.method_results[name]));
    }
    format_table(&rows)
}
