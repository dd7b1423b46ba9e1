use obbstack::eval::{average_precision, evaluate, ApMode, EvalConfig, MatchFlag};
use obbstack::geometry::Obb;
use obbstack::ingest::{Detection, DetectionRun, GroundTruth, GroundTruthObject};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CATS: [&str; 2] = ["plane", "ship"];

fn grid_box(cell: usize, rng: &mut ChaCha8Rng) -> Obb {
    let (cx, cy) = ((cell % 5) as f64 * 100.0 + 50.0, (cell / 5) as f64 * 100.0 + 50.0);
    Obb::canonicalize(cx, cy, rng.random_range(20.0..40.0), rng.random_range(8.0..20.0), rng.random_range(0.0..3.0))
        .unwrap()
}

/// Objects on a coarse grid (never overlapping), jittered detections of a
/// random subset, and background false positives.
fn scene(rng: &mut ChaCha8Rng, distinct_scores: bool) -> (DetectionRun, GroundTruth) {
    let mut gt = Vec::new();
    let mut run = DetectionRun::new("m", 1);
    let score = |rng: &mut ChaCha8Rng| {
        if distinct_scores {
            rng.random_range(0.01..1.0)
        } else {
            rng.random_range(1..=5) as f64 / 5.0
        }
    };
    for img in 0..rng.random_range(1..4) {
        let image_id = format!("I{img}");
        let mut cells: Vec<usize> = (0..25).collect();
        cells.shuffle(rng);
        for &cell in &cells[..rng.random_range(0..8)] {
            let obb = grid_box(cell, rng);
            let category = CATS[rng.random_range(0..2)];
            gt.push(GroundTruthObject {
                obb,
                category: category.into(),
                difficult: rng.random::<f64>() < 0.15,
                image_id: image_id.clone(),
            });
            for _ in 0..rng.random_range(0..3) {
                let d = Obb::canonicalize(
                    obb.x + rng.random_range(-6.0..6.0),
                    obb.y + rng.random_range(-6.0..6.0),
                    obb.w,
                    obb.h,
                    obb.theta + rng.random_range(-0.2..0.2),
                )
                .unwrap();
                let s = score(rng);
                run.detections.push(Detection::from_score(d, s, 1, category, image_id.clone()).unwrap());
            }
        }
        for &cell in &cells[20..20 + rng.random_range(0..4)] {
            let s = score(rng);
            let cat = CATS[rng.random_range(0..2)];
            run.detections.push(Detection::from_score(grid_box(cell, rng), s, 1, cat, image_id.clone()).unwrap());
        }
    }
    (run, GroundTruth::new(gt))
}

fn cfg(mode: ApMode) -> EvalConfig {
    EvalConfig { ap_mode: mode, ..EvalConfig::default() }
}

#[test]
fn ap_stays_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for _ in 0..500 {
        let (run, gt) = scene(&mut rng, false);
        for mode in [ApMode::Voc07, ApMode::Voc12] {
            let r = evaluate(&run, &gt, &cfg(mode)).unwrap();
            assert!(r.per_category_ap.values().all(|ap| (0.0..=1.0).contains(ap)));
            assert!((0.0..=1.0).contains(&r.map));
        }
    }
}

#[test]
fn detection_order_is_irrelevant_for_distinct_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..300 {
        let (mut run, gt) = scene(&mut rng, true);
        let before = evaluate(&run, &gt, &cfg(ApMode::Voc12)).unwrap();
        run.detections.shuffle(&mut rng);
        assert_eq!(evaluate(&run, &gt, &cfg(ApMode::Voc12)).unwrap(), before);
    }
}

#[test]
fn lowest_scored_false_positive_never_helps() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..300 {
        let (run, gt) = scene(&mut rng, true);
        for mode in [ApMode::Voc07, ApMode::Voc12] {
            let before = evaluate(&run, &gt, &cfg(mode)).unwrap();
            let mut more = run.clone();
            let far = Obb::canonicalize(5000.0, 5000.0, 10.0, 5.0, 0.0).unwrap();
            more.detections.push(Detection::from_score(far, 0.001, 1, CATS[0], "I0").unwrap());
            let after = evaluate(&more, &gt, &cfg(mode)).unwrap();
            for (cat, ap) in &after.per_category_ap {
                assert!(*ap <= before.per_category_ap[cat] + 1e-15);
            }
        }
    }
}

#[test]
fn new_true_positive_never_hurts_voc12() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..300 {
        let (run, gt) = scene(&mut rng, true);
        // an object nobody detected, found exactly
        let missed = gt.objects.iter().find(|g| {
            !g.difficult
                && !run.detections.iter().any(|d| d.image_id == g.image_id && (d.obb.x - g.obb.x).abs() < 50.0 && (d.obb.y - g.obb.y).abs() < 50.0)
        });
        let Some(g) = missed else { continue };
        let before = evaluate(&run, &gt, &cfg(ApMode::Voc12)).unwrap();
        let mut more = run.clone();
        let s = rng.random_range(0.01..1.0);
        more.detections.push(Detection::from_score(g.obb, s, 1, g.category.clone(), g.image_id.clone()).unwrap());
        let after = evaluate(&more, &gt, &cfg(ApMode::Voc12)).unwrap();
        assert!(after.per_category_ap[&g.category] >= before.per_category_ap[&g.category] - 1e-15);
    }
}

#[test]
fn average_precision_edge_cases() {
    use MatchFlag::*;
    assert_eq!(average_precision(&[], 0, ApMode::Voc12), 0.0);
    assert_eq!(average_precision(&[Fp, Fp], 3, ApMode::Voc12), 0.0);
    assert_eq!(average_precision(&[Tp, Tp], 2, ApMode::Voc12), 1.0);
    assert!((average_precision(&[Tp, Fp, Tp], 2, ApMode::Voc12) - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    assert_eq!(
        average_precision(&[Tp, Ignored, Fp], 2, ApMode::Voc12),
        average_precision(&[Tp, Fp], 2, ApMode::Voc12)
    );
}
