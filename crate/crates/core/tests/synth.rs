use obbstack::clustering::cluster_runs;
use obbstack::eval::{match_detections, MatchFlag};
use obbstack::ingest::{Detection, DetectionRun};
use obbstack::metalearner::score_correlation;
use obbstack::synth::{
    generate_scenes, run_benchmark, simulate_detector, DetectorProfile, ObjectCount, Scenario, SyntheticScene,
};
use obbstack::PipelineConfig;

fn categories() -> Vec<String> {
    vec!["plane".into(), "ship".into(), "vehicle".into()]
}

fn scene(n: usize, seed: u64) -> SyntheticScene {
    generate_scenes(n, ObjectCount { min: 4, max: 12 }, [1024.0, 1024.0], &categories(), seed).unwrap()
}

fn scenario(profiles: Vec<DetectorProfile>, seeds: Vec<u64>) -> Scenario {
    Scenario {
        n_images: 200,
        objects_per_image: ObjectCount { min: 4, max: 12 },
        field: [1024.0, 1024.0],
        categories: categories(),
        val_fraction: 0.5,
        seeds,
        profiles,
        pipeline: PipelineConfig { z_miss: -2.0, ..PipelineConfig::default() },
    }
}

#[test]
fn simulation_is_seed_deterministic() {
    let s = scene(30, 5);
    assert_eq!(s, scene(30, 5));
    let p = DetectorProfile { temperature: 2.0, ..DetectorProfile::new("a") };
    let a = simulate_detector(&s, &p, 5).unwrap();
    assert_eq!(a, simulate_detector(&s, &p, 5).unwrap());
    assert_ne!(a, simulate_detector(&s, &p, 6).unwrap());
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    assert_eq!(pool.install(|| simulate_detector(&scene(30, 5), &p, 5).unwrap()), a);
}

/// Flags each detection TP/FP against the scene's ground truth.
fn flags(run: &DetectionRun, s: &SyntheticScene) -> Vec<(f64, bool)> {
    let gt = s.ground_truth();
    let grouped = gt.grouped();
    let mut out = Vec::new();
    for ((image, cat), dets) in obbstack::ingest::group_detections(&run.detections) {
        let mut dets: Vec<&Detection> = dets.iter().collect();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let objs = grouped.get(&(image.clone(), cat.clone())).cloned().unwrap_or_default();
        for (d, f) in dets.iter().zip(match_detections(&dets, &objs, 0.5)) {
            out.push((d.score, f == MatchFlag::Tp));
        }
    }
    out
}

#[test]
fn unit_temperature_scores_are_calibrated() {
    let s = scene(1500, 8);
    let p = DetectorProfile::new("calibrated");
    let run = simulate_detector(&s, &p, 8).unwrap();
    let flagged = flags(&run, &s);
    assert!(flagged.len() >= 10_000, "{}", flagged.len());
    for bin in 0..10 {
        let (lo, hi) = (bin as f64 / 10.0, (bin + 1) as f64 / 10.0);
        let inside: Vec<&(f64, bool)> = flagged.iter().filter(|(sc, _)| *sc >= lo && *sc < hi).collect();
        if inside.len() < 200 {
            continue;
        }
        let mean = inside.iter().map(|(sc, _)| sc).sum::<f64>() / inside.len() as f64;
        let precision = inside.iter().filter(|(_, tp)| *tp).count() as f64 / inside.len() as f64;
        assert!((precision - mean).abs() <= 0.05, "bin {bin}: precision {precision:.3} vs score {mean:.3}");
    }
}

#[test]
fn noiseless_clones_correlate_perfectly() {
    let s = scene(40, 3);
    let parent = DetectorProfile::new("a");
    let mut a = simulate_detector(&s, &parent, 3).unwrap();
    let mut b = simulate_detector(&s, &DetectorProfile::clone_named(&parent, "b", 0.0), 3).unwrap();
    a.set_model_index(1);
    b.set_model_index(2);
    let clusters = cluster_runs(&[a, b], 0.5).unwrap();
    let corr = score_correlation(&clusters, 2);
    assert!((corr.values[0][1].unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn overconfident_model_gets_a_smaller_weight() {
    let profiles = |t| {
        vec![
            DetectorProfile { recall: 0.7, ..DetectorProfile::new("steady") },
            DetectorProfile { recall: 0.7, temperature: t, ..DetectorProfile::new("probe") },
        ]
    };
    let w = |t| {
        let s = scenario(profiles(t), vec![4]);
        run_benchmark(&s, 4).unwrap().report.weights[1]
    };
    let (w1, w3) = (w(1.0), w(3.0));
    assert!(w3 < 0.6 * w1, "T=3 weight {w3} vs T=1 weight {w1}");
}

#[test]
fn clone_family_weight_grows_sublinearly() {
    let base = DetectorProfile { recall: 0.7, ..DetectorProfile::new("x") };
    for seed in [1, 2, 3] {
        let totals: Vec<f64> = [1, 2, 4]
            .iter()
            .map(|&k| {
                let mut p = vec![
                    DetectorProfile { skill: 5.0, recall: 0.7, ..DetectorProfile::new("a") },
                    DetectorProfile { skill: 3.0, recall: 0.7, ..DetectorProfile::new("b") },
                    base.clone(),
                ];
                p.extend((1..k).map(|j| DetectorProfile::clone_named(&base, format!("x{j}"), 0.3)));
                let r = run_benchmark(&scenario(p, vec![seed]), seed).unwrap().report;
                r.weights[2..].iter().sum()
            })
            .collect();
        assert!(totals[0] < totals[1] && totals[1] < totals[2], "{totals:?}");
        assert!(totals[2] < 4.0 * totals[0], "{totals:?}");
    }
}

#[test]
fn benchmark_is_reproducible() {
    let p = vec![DetectorProfile::new("a"), DetectorProfile { temperature: 3.0, ..DetectorProfile::new("b") }];
    let s = Scenario { n_images: 40, ..scenario(p, vec![9]) };
    let a = run_benchmark(&s, 9).unwrap();
    let b = run_benchmark(&s, 9).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.fused, b.fused);
}
