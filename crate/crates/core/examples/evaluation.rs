//! Distance-based matching, per-class AP and the size/clutter breakdowns on
//! hand-made detections.

use centerpoint::data::{generate_synthetic_set, Scene, SyntheticSpec};
use centerpoint::evaluation::{
    average_precision, evaluate, match_detections, read_detections, write_detections, DetectionRecord, EvalConfig,
    MatchThresholds, DETECTIONS_FILE,
};
use centerpoint::geometry::{GroundTruthObject, Point2D};
use centerpoint::single_stage::Detection;

fn det(x: f64, y: f64, class_id: u32, score: f64) -> Detection {
    Detection { center: Point2D::new(x, y), class_id, score, hbox: None }
}

fn main() -> centerpoint::Result<()> {
    let gts = [GroundTruthObject::from_center(Point2D::new(50.0, 50.0), 0)];
    let dets = [det(52.0, 50.0, 0, 0.9), det(51.0, 51.0, 0, 0.8), det(70.0, 50.0, 0, 0.7)];
    let m = match_detections(&dets, &gts, None, MatchThresholds::default())?;
    println!("outcomes {:?}", m.outcomes);
    // the same offsets at 0.5 m/px: 1 m, 0.7 m and 10 m
    let m = match_detections(&dets, &gts, Some(0.5), MatchThresholds::default())?;
    println!("with gsd 0.5: {:?}", m.outcomes);
    println!("AP of [TP, FP, TP] with 2 GTs: {:.4}", average_precision(&[true, false, true], 2).unwrap());

    // Jittered copies of the ground truth as detections, with a few misses
    let scenes = generate_synthetic_set(&SyntheticSpec::default(), 20, 3, "eval")?;
    let dets: Vec<Vec<Detection>> = scenes
        .iter()
        .map(|s| {
            s.scene
                .objects
                .iter()
                .enumerate()
                .filter(|(i, _)| i % 7 != 3)
                .map(|(i, o)| det(o.center.x + (i % 5) as f64, o.center.y - 2.0, o.class_id, 1.0 - 0.01 * i as f64))
                .collect()
        })
        .collect();
    let dir = std::env::temp_dir().join("centerpoint_demo_eval");
    std::fs::create_dir_all(&dir)?;
    let records: Vec<DetectionRecord> = scenes
        .iter()
        .zip(&dets)
        .flat_map(|(s, d)| d.iter().map(|x| DetectionRecord::from_detection(&s.scene.image_id, x)))
        .collect();
    write_detections(dir.join(DETECTIONS_FILE), &records)?;
    let mut by_image = read_detections(dir.join(DETECTIONS_FILE))?;
    let reloaded: Vec<Vec<Detection>> = scenes.iter().map(|s| by_image.remove(&s.scene.image_id).unwrap_or_default()).collect();

    let anns: Vec<&Scene> = scenes.iter().map(|s| &s.scene).collect();
    let refs: Vec<&[Detection]> = reloaded.iter().map(Vec::as_slice).collect();
    let report = evaluate(&anns, &refs, &EvalConfig::default())?;
    println!("per-class AP {:?}", report.per_class_ap);
    println!("mAP {:?}  sizes {:?}", report.map, report.size_bins);
    for b in report.clutter.iter().flatten() {
        println!("  clutter {:>8}: {} images, mAP {:?}", b.label, b.image_ids.len(), b.map);
    }
    Ok(())
}
