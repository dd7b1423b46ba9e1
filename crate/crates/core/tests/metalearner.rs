use obbstack::metalearner::{
    decompose_weights, fit, fit_temperature, nll, nll_gradient, sigma_wa, FitConfig, LabeledCluster, MetaLearner,
};
use obbstack::prob::sigmoid;
use obbstack::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn names(m: usize) -> Vec<String> {
    (1..=m).map(|k| format!("m{k}")).collect()
}

/// Labels drawn from a logistic model with the given weights; a fraction of
/// features replaced by `z_miss`.
fn logistic_data(rng: &mut ChaCha8Rng, n: usize, w: &[f64], b: f64, miss: f64) -> Vec<LabeledCluster> {
    (0..n)
        .map(|_| {
            let features: Vec<f64> = w
                .iter()
                .map(|_| if rng.random::<f64>() < miss { -8.0 } else { rng.random_range(-4.0..4.0) })
                .collect();
            let u: f64 = features.iter().zip(w).map(|(z, w)| z * w).sum::<f64>() + b;
            LabeledCluster { label: rng.random::<f64>() < sigmoid(u), features }
        })
        .collect()
}

fn learner_at(w: Vec<f64>, b: f64, lambda: f64) -> MetaLearner {
    let mut l = MetaLearner::new(names(w.len()), w, b, -8.0).unwrap();
    l.lambda = lambda;
    l
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let data = logistic_data(&mut rng, 300, &[0.6, 0.3, 0.9], -0.2, 0.2);
    let h = 1e-5;
    for _ in 0..100 {
        let w: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
        let b = rng.random_range(-2.0..2.0);
        let lambda = rng.random_range(0.0..0.1);
        let (gw, gb) = nll_gradient(&learner_at(w.clone(), b, lambda), &data).unwrap();
        let f = |w: Vec<f64>, b: f64| nll(&learner_at(w, b, lambda), &data).unwrap();
        let mut analytic = gw.clone();
        analytic.push(gb);
        let mut numeric = Vec::new();
        for k in 0..3 {
            let (mut up, mut dn) = (w.clone(), w.clone());
            up[k] += h;
            dn[k] -= h;
            numeric.push((f(up, b) - f(dn, b)) / (2.0 * h));
        }
        numeric.push((f(w.clone(), b + h) - f(w.clone(), b - h)) / (2.0 * h));
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1.0);
        assert!(diff / scale <= 1e-6, "relative error {}", diff / scale);
    }
}

#[test]
fn nll_is_midpoint_convex() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data = logistic_data(&mut rng, 200, &[1.0, -0.5], 0.3, 0.3);
    for _ in 0..500 {
        let lambda = rng.random_range(0.0..1.0);
        let p1: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
        let p2: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mid: Vec<f64> = p1.iter().zip(&p2).map(|(a, b)| (a + b) / 2.0).collect();
        let f = |p: &[f64]| nll(&learner_at(p[..2].to_vec(), p[2], lambda), &data).unwrap();
        assert!(f(&mid) <= (f(&p1) + f(&p2)) / 2.0 + 1e-9);
    }
}

#[test]
fn sigma_wa_is_increasing_in_positive_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let l = learner_at(vec![0.4, 1.3, 0.05], -0.7, 0.0);
    for _ in 0..1000 {
        let z: Vec<f64> = (0..3).map(|_| rng.random_range(-6.0..6.0)).collect();
        let k = rng.random_range(0..3);
        let mut up = z.clone();
        up[k] += rng.random_range(0.01..1.0);
        assert!(sigma_wa(&up, &l).unwrap() > sigma_wa(&z, &l).unwrap());
    }
}

#[test]
fn fit_recovers_generating_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let truth = [0.8, 0.3, 1.2];
    let data = logistic_data(&mut rng, 40_000, &truth, -0.5, 0.0);
    let l = fit(&data, names(3), -8.0, &FitConfig::default()).unwrap();
    assert!(l.training_meta.converged);
    assert!(l.training_meta.gradient_norm <= 1e-8);
    for (w, t) in l.weights.iter().zip(truth) {
        assert!((w - t).abs() < 0.05, "{w} vs {t}");
    }
    assert!((l.intercept + 0.5).abs() < 0.05);
}

#[test]
fn single_model_fit_equals_temperature_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let pairs: Vec<(f64, bool)> = (0..5000)
        .map(|_| {
            let z = rng.random_range(-6.0..6.0);
            (z, rng.random::<f64>() < sigmoid(z / 2.5 + 0.3))
        })
        .collect();
    let samples: Vec<LabeledCluster> =
        pairs.iter().map(|&(z, label)| LabeledCluster { features: vec![z], label }).collect();
    let cfg = FitConfig::default();
    let l = fit(&samples, names(1), -8.0, &cfg).unwrap();
    let ts = fit_temperature(&pairs, &cfg).unwrap();
    assert!((l.weights[0] - 1.0 / ts.temperature).abs() <= 1e-8);
    assert!((l.intercept - ts.shift).abs() <= 1e-8);
    assert!((ts.temperature - 2.5).abs() < 0.15);
    assert_eq!(l.equivalent_temperature(), Some(1.0 / l.weights[0]));
}

#[test]
fn rescaling_one_model_rescales_its_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let data = logistic_data(&mut rng, 5000, &[0.7, 0.4], 0.1, 0.0);
    let cfg = FitConfig { lambda: 0.0, ..FitConfig::default() };
    let base = fit(&data, names(2), -8.0, &cfg).unwrap();
    for c in [0.25, 3.0] {
        let scaled: Vec<LabeledCluster> = data
            .iter()
            .map(|s| LabeledCluster { features: vec![s.features[0] * c, s.features[1]], label: s.label })
            .collect();
        let l = fit(&scaled, names(2), -8.0, &cfg).unwrap();
        assert!((l.weights[0] * c - base.weights[0]).abs() < 1e-6);
        assert!((l.weights[1] - base.weights[1]).abs() < 1e-6);
        for (a, b) in data.iter().zip(&scaled) {
            let pa = base.predict(&a.features).unwrap();
            let pb = l.predict(&b.features).unwrap();
            assert!((pa - pb).abs() < 1e-6);
        }
    }
}

#[test]
fn single_class_data_is_degenerate() {
    let samples = vec![LabeledCluster { features: vec![1.0], label: true }; 10];
    assert!(matches!(fit(&samples, names(1), -8.0, &FitConfig::default()), Err(Error::DegenerateData(_))));
}

#[test]
fn anti_correlated_scores_fail_calibration() {
    let pairs: Vec<(f64, bool)> = (0..200).map(|i| (i as f64 / 20.0 - 5.0, i % 7 != 0 && i < 100)).collect();
    assert!(matches!(fit_temperature(&pairs, &FitConfig::default()), Err(Error::CalibrationFailure(_))));
}

#[test]
fn learner_json_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let data = logistic_data(&mut rng, 2000, &[0.3, 0.9], 0.2, 0.3);
    let l = fit(&data, names(2), -8.0, &FitConfig::default()).unwrap();
    let back = MetaLearner::from_json(&l.to_json(None)).unwrap();
    assert_eq!(back, l);
    assert!(MetaLearner::from_json(&l.to_json(None).replace("obbstack-meta/1", "other/9")).is_err());
}

#[test]
fn decomposition_recovers_factors() {
    let g = decompose_weights(&[0.24, 0.5], &[0.8, 0.5], &[1.0, 2.0]).unwrap();
    assert!((g[0] - 0.3).abs() < 1e-15 && (g[1] - 0.5).abs() < 1e-15);
    assert!(decompose_weights(&[0.1], &[0.0], &[1.0]).is_err());
    assert!(decompose_weights(&[0.1, 0.2], &[1.0], &[1.0]).is_err());
}

#[test]
fn fits_converge_with_saturated_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..200 {
        let n = rng.random_range(50..600);
        let t = rng.random_range(0.3..4.0);
        let pairs: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                let z: f64 = rng.random_range(-5.0..5.0);
                ((t * z).clamp(-13.8, 13.8), rng.random::<f64>() < sigmoid(z))
            })
            .collect();
        let samples: Vec<LabeledCluster> =
            pairs.iter().map(|&(z, label)| LabeledCluster { features: vec![z], label }).collect();
        if samples.iter().all(|s| s.label) || samples.iter().all(|s| !s.label) {
            continue;
        }
        let l = fit(&samples, names(1), -8.0, &FitConfig::default()).unwrap();
        assert!(l.training_meta.converged, "trial {trial}: {:?}", l.training_meta);
    }
}
