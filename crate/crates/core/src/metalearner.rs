//! Logistic-regression meta-learner over member-model logits.
//!
//! A learner maps a cluster's feature vector `z` (one logit per model, with a
//! fixed fill value for absent models) to `σ(z·w + b)`. It is fitted by
//! minimizing the L2-regularized negative log-likelihood of cluster labels
//! with a damped Newton method.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::clustering::{build_feature_vector, Cluster};
use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::ingest::GroundTruth;
use crate::prob::{neumaier_sum, sigmoid, softplus};

pub const META_SCHEMA: &str = "obbstack-meta/1";
pub const DEFAULT_Z_MISS: f64 = -8.0;
pub const DEFAULT_LAMBDA: f64 = 1e-6;
pub const DEFAULT_IOU_LABEL_THRESH: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub lambda: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lambda: DEFAULT_LAMBDA,
            max_iter: 500,
            grad_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub n_clusters: usize,
    pub n_positive: usize,
    pub final_nll: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaLearner {
    pub models: Vec<String>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub z_miss: f64,
    pub lambda: f64,
    pub training_meta: TrainingMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCluster {
    pub features: Vec<f64>,
    pub label: bool,
}

/// Temperature-scaling parameters: calibrated probability `σ(z/T + t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationParams {
    pub temperature: f64,
    pub shift: f64,
}

impl MetaLearner {
    pub fn new(models: Vec<String>, weights: Vec<f64>, intercept: f64, z_miss: f64) -> Result<Self> {
        if models.len() != weights.len() {
            return Err(Error::Contract(format!(
                "{} models but {} weights",
                models.len(),
                weights.len()
            )));
        }
        if !weights.iter().chain([&intercept, &z_miss]).all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite learner parameter".into()));
        }
        Ok(MetaLearner {
            models,
            weights,
            intercept,
            z_miss,
            lambda: 0.0,
            training_meta: TrainingMeta::default(),
        })
    }

    pub fn num_models(&self) -> usize {
        self.weights.len()
    }

    /// Weight of a model by its 1-based index.
    pub fn weight(&self, model_index: usize) -> Result<f64> {
        model_index
            .checked_sub(1)
            .and_then(|i| self.weights.get(i))
            .copied()
            .ok_or_else(|| {
                Error::Contract(format!(
                    "model index {model_index} not registered (M = {})",
                    self.num_models()
                ))
            })
    }

    /// `σ(z·w + b)`.
    pub fn predict(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.num_models() {
            return Err(Error::Contract(format!(
                "feature length {} does not match M = {}",
                z.len(),
                self.num_models()
            )));
        }
        Ok(sigmoid(self.linear(z)))
    }

    fn linear(&self, z: &[f64]) -> f64 {
        neumaier_sum(z.iter().zip(&self.weights).map(|(a, b)| a * b)) + self.intercept
    }

    /// For a single-model learner, the temperature equivalent to its weight.
    pub fn equivalent_temperature(&self) -> Option<f64> {
        match self.weights.as_slice() {
            [w] if *w > 0.0 => Some(1.0 / w),
            _ => None,
        }
    }

    pub fn to_json(&self, provenance: Option<serde_json::Value>) -> String {
        #[derive(Serialize)]
        struct File<'a> {
            schema: &'static str,
            models: &'a [String],
            weights: &'a [f64],
            intercept: f64,
            z_miss: f64,
            lambda: f64,
            training_meta: &'a TrainingMeta,
            #[serde(skip_serializing_if = "Option::is_none")]
            provenance: Option<serde_json::Value>,
        }
        let file = File {
            schema: META_SCHEMA,
            models: &self.models,
            weights: &self.weights,
            intercept: self.intercept,
            z_miss: self.z_miss,
            lambda: self.lambda,
            training_meta: &self.training_meta,
            provenance,
        };
        let mut s = serde_json::to_string_pretty(&file).expect("learner serialization is infallible");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct File {
            schema: String,
            models: Vec<String>,
            weights: Vec<f64>,
            intercept: f64,
            z_miss: f64,
            lambda: f64,
            #[serde(default)]
            training_meta: TrainingMeta,
        }
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("malformed JSON: {e}")))?;
        let schema = value.get("schema").and_then(|s| s.as_str()).unwrap_or("<missing>");
        if schema != META_SCHEMA {
            return Err(Error::Schema(format!(
                "unsupported schema {schema:?}, expected {META_SCHEMA:?}"
            )));
        }
        let f: File = serde_json::from_value(value).map_err(|e| Error::Schema(format!("{META_SCHEMA}: {e}")))?;
        debug_assert_eq!(f.schema, META_SCHEMA);
        let mut learner = MetaLearner::new(f.models, f.weights, f.intercept, f.z_miss)?;
        learner.lambda = f.lambda;
        learner.training_meta = f.training_meta;
        Ok(learner)
    }

    pub fn write(&self, path: &Path, provenance: Option<serde_json::Value>) -> Result<()> {
        std::fs::write(path, self.to_json(provenance)).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Probability the learner assigns to a feature vector.
pub fn sigma_wa(z: &[f64], learner: &MetaLearner) -> Result<f64> {
    learner.predict(z)
}

/// Labels each cluster positive iff its center overlaps some same-category
/// ground-truth box in its image with IoU ≥ `iou_label_thresh`. Labels are
/// not exclusive: several clusters may claim one ground-truth object.
pub fn label_clusters(
    clusters: &[Cluster],
    ground_truth: &GroundTruth,
    iou_label_thresh: f64,
    num_models: usize,
    z_miss: f64,
) -> Result<Vec<LabeledCluster>> {
    let gt = ground_truth.grouped();
    clusters
        .iter()
        .map(|c| {
            let key = (c.image_id().to_string(), c.category().to_string());
            let best = gt
                .get(&key)
                .map(|objs| objs.iter().map(|o| iou(&c.center.obb, &o.obb)).fold(0.0, f64::max))
                .unwrap_or(0.0);
            Ok(LabeledCluster {
                features: build_feature_vector(c, num_models, z_miss)?,
                label: best >= iou_label_thresh,
            })
        })
        .collect()
}

/// Dense view of labeled samples with the objective's derivatives.
struct Objective<'a> {
    samples: &'a [LabeledCluster],
    dim: usize,
    lambda: f64,
}

impl<'a> Objective<'a> {
    fn new(samples: &'a [LabeledCluster], lambda: f64) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Contract("empty labeled set".into()));
        };
        let dim = first.features.len();
        if samples.iter().any(|s| s.features.len() != dim) {
            return Err(Error::Contract("labeled samples have inconsistent feature lengths".into()));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and ≥ 0, got {lambda}")));
        }
        Ok(Objective { samples, dim, lambda })
    }

    fn margin(&self, w: &[f64], b: f64, x: &[f64]) -> f64 {
        neumaier_sum(x.iter().zip(w).map(|(a, c)| a * c)) + b
    }

    fn value(&self, w: &[f64], b: f64) -> f64 {
        let data = neumaier_sum(self.samples.iter().map(|s| {
            let u = self.margin(w, b, &s.features);
            if s.label {
                softplus(-u)
            } else {
                softplus(u)
            }
        }));
        data + 0.5 * self.lambda * neumaier_sum(w.iter().map(|v| v * v))
    }

    /// Gradient with respect to `(w, b)`, intercept last.
    fn gradient(&self, w: &[f64], b: f64) -> Vec<f64> {
        let residuals: Vec<f64> = self
            .samples
            .iter()
            .map(|s| sigmoid(self.margin(w, b, &s.features)) - f64::from(u8::from(s.label)))
            .collect();
        let mut g: Vec<f64> = (0..self.dim)
            .map(|k| {
                neumaier_sum(self.samples.iter().zip(&residuals).map(|(s, r)| r * s.features[k]))
                    + self.lambda * w[k]
            })
            .collect();
        g.push(neumaier_sum(residuals.iter().copied()));
        g
    }

    fn hessian(&self, w: &[f64], b: f64) -> DMatrix<f64> {
        let n = self.dim + 1;
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut x = vec![0.0; n];
        for s in self.samples {
            let p = sigmoid(self.margin(w, b, &s.features));
            let c = p * (1.0 - p);
            x[..self.dim].copy_from_slice(&s.features);
            x[self.dim] = 1.0;
            for i in 0..n {
                let ci = c * x[i];
                for j in i..n {
                    h[(i, j)] += ci * x[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                h[(i, j)] = h[(j, i)];
            }
        }
        for k in 0..self.dim {
            h[(k, k)] += self.lambda;
        }
        h
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Regularized negative log-likelihood of the samples under the learner,
/// using the learner's `lambda`.
pub fn nll(learner: &MetaLearner, samples: &[LabeledCluster]) -> Result<f64> {
    let obj = Objective::new(samples, learner.lambda)?;
    check_dim(&obj, learner)?;
    Ok(obj.value(&learner.weights, learner.intercept))
}

/// Analytic gradient of [`nll`]: `(d/dw, d/db)`.
pub fn nll_gradient(learner: &MetaLearner, samples: &[LabeledCluster]) -> Result<(Vec<f64>, f64)> {
    let obj = Objective::new(samples, learner.lambda)?;
    check_dim(&obj, learner)?;
    let mut g = obj.gradient(&learner.weights, learner.intercept);
    let gb = g.pop().expect("gradient has an intercept entry");
    Ok((g, gb))
}

fn check_dim(obj: &Objective, learner: &MetaLearner) -> Result<()> {
    if obj.dim != learner.num_models() {
        return Err(Error::Contract(format!(
            "feature length {} does not match M = {}",
            obj.dim,
            learner.num_models()
        )));
    }
    Ok(())
}

/// Fits weights and intercept by damped Newton iterations with Armijo
/// backtracking, falling back to steepest descent where the Hessian is not
/// positive definite.
pub fn fit(
    samples: &[LabeledCluster],
    models: Vec<String>,
    z_miss: f64,
    config: &FitConfig,
) -> Result<MetaLearner> {
    let obj = Objective::new(samples, config.lambda)?;
    if models.len() != obj.dim {
        return Err(Error::Contract(format!(
            "{} model names for {}-dimensional features",
            models.len(),
            obj.dim
        )));
    }
    if samples.iter().any(|s| s.features.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical("non-finite feature value".into()));
    }
    let n_pos = samples.iter().filter(|s| s.label).count();
    let n_neg = samples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateData(format!(
            "need both classes, got {n_pos} positive and {n_neg} negative clusters"
        )));
    }

    let dim = obj.dim;
    let mut w = vec![0.0; dim];
    let mut b = (n_pos as f64 / n_neg as f64).ln();
    let mut f = obj.value(&w, b);
    let mut g = obj.gradient(&w, b);
    let mut iterations = 0;

    while norm(&g) > config.grad_tol && iterations < config.max_iter {
        iterations += 1;
        let h = obj.hessian(&w, b);
        let neg_g = DVector::from_iterator(dim + 1, g.iter().map(|v| -v));
        let (dir, newton) = match h.cholesky() {
            Some(chol) => {
                let d = chol.solve(&neg_g);
                if d.iter().all(|v| v.is_finite()) && d.dot(&neg_g) > 0.0 {
                    (d, true)
                } else {
                    (neg_g.clone(), false)
                }
            }
            None => (neg_g.clone(), false),
        };
        let slope = -dir.dot(&neg_g);

        let step = |t: f64| -> (Vec<f64>, f64) {
            let nw: Vec<f64> = w.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
            (nw, b + t * dir[dim])
        };

        // Near the optimum the predicted decrease drops below the resolution
        // of the objective, so the line search would only see rounding
        // noise; a pure Newton step is safe there.
        let at_floor = newton && -slope <= 1e-12 * f.abs().max(1.0);
        let (nw, nb, nf) = if at_floor {
            let (nw, nb) = step(1.0);
            let nf = obj.value(&nw, nb);
            (nw, nb, nf)
        } else {
            let mut t = 1.0;
            let mut accepted = None;
            while t > 1e-14 {
                let (nw, nb) = step(t);
                let nf = obj.value(&nw, nb);
                if nf <= f + 1e-4 * t * slope {
                    accepted = Some((nw, nb, nf));
                    break;
                }
                t *= 0.5;
            }
            match accepted {
                Some(a) => a,
                None => {
                    log::warn!("line search stalled at iteration {iterations}");
                    break;
                }
            }
        };
        w = nw;
        b = nb;
        f = nf;
        g = obj.gradient(&w, b);
        log::debug!("iteration {iterations}: nll {f:.12e}, |g| {:e}, newton {newton}", norm(&g));
    }

    let gradient_norm = norm(&g);
    let converged = gradient_norm <= config.grad_tol;
    if !converged {
        log::warn!(
            "meta-learner fit did not converge after {iterations} iterations (gradient norm {gradient_norm:e})"
        );
    }
    if w.iter().any(|v| !v.is_finite()) || !b.is_finite() {
        return Err(Error::Numerical("fit produced non-finite parameters".into()));
    }
    let mut learner = MetaLearner::new(models, w, b, z_miss)?;
    learner.lambda = config.lambda;
    learner.training_meta = TrainingMeta {
        n_clusters: samples.len(),
        n_positive: n_pos,
        final_nll: f,
        iterations,
        gradient_norm,
        converged,
    };
    Ok(learner)
}

/// Temperature scaling as the one-model special case of [`fit`]:
/// `T = 1/w`, `t = b`.
pub fn fit_temperature(samples: &[(f64, bool)], config: &FitConfig) -> Result<CalibrationParams> {
    let labeled: Vec<LabeledCluster> = samples
        .iter()
        .map(|&(z, label)| LabeledCluster { features: vec![z], label })
        .collect();
    let learner = fit(&labeled, vec!["model".into()], DEFAULT_Z_MISS, config)?;
    let w = learner.weights[0];
    if w <= 0.0 {
        return Err(Error::CalibrationFailure(format!(
            "fitted weight {w} ≤ 0: scores are anti-correlated with correctness"
        )));
    }
    Ok(CalibrationParams {
        temperature: 1.0 / w,
        shift: learner.intercept,
    })
}

/// Factor `g` in `w = p ⊙ r ⊙ g`.
pub fn decompose_weights(w: &[f64], p: &[f64], r: &[f64]) -> Result<Vec<f64>> {
    if w.len() != p.len() || w.len() != r.len() {
        return Err(Error::Contract("weight, p and r vectors differ in length".into()));
    }
    w.iter()
        .zip(p)
        .zip(r)
        .map(|((w, p), r)| {
            if *p == 0.0 || *r == 0.0 {
                Err(Error::Contract("zero calibration or redundancy factor".into()))
            } else {
                Ok(w / (p * r))
            }
        })
        .collect()
}

/// Pairwise Pearson correlation of member scores across clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    /// `None` where fewer than three common clusters exist or a score
    /// sequence has zero variance.
    pub values: Vec<Vec<Option<f64>>>,
    /// Number of clusters in which both models are present.
    pub counts: Vec<Vec<usize>>,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 3 || y.len() != n {
        return None;
    }
    let mx = neumaier_sum(x.iter().copied()) / n as f64;
    let my = neumaier_sum(y.iter().copied()) / n as f64;
    let sxy = neumaier_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let sxx = neumaier_sum(x.iter().map(|a| (a - mx) * (a - mx)));
    let syy = neumaier_sum(y.iter().map(|b| (b - my) * (b - my)));
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation of detection scores for every model pair, over the
/// clusters in which both models appear.
pub fn score_correlation(clusters: &[Cluster], num_models: usize) -> CorrelationMatrix {
    let mut values = vec![vec![None; num_models]; num_models];
    let mut counts = vec![vec![0; num_models]; num_models];
    let scores: Vec<Vec<Option<f64>>> = clusters
        .iter()
        .map(|c| (1..=num_models).map(|l| c.get(l).map(|d| d.score)).collect())
        .collect();
    for i in 0..num_models {
        counts[i][i] = scores.iter().filter(|s| s[i].is_some()).count();
        values[i][i] = Some(1.0);
        for j in (i + 1)..num_models {
            let (xs, ys): (Vec<f64>, Vec<f64>) = scores
                .iter()
                .filter_map(|s| Some((s[i]?, s[j]?)))
                .unzip();
            let r = pearson(&xs, &ys);
            counts[i][j] = xs.len();
            counts[j][i] = xs.len();
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    CorrelationMatrix { values, counts }
}
