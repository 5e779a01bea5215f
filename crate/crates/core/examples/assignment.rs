//! Anchor points and distance-based target assignment, next to the IoU
//! assignment used by box anchors.

use centerpoint::assignment::{generate_anchor_boxes, generate_anchor_points, iou_match, match_centerpoints, IouThresholds};
use centerpoint::geometry::{GroundTruthObject, HorizontalBox, Point2D};
use centerpoint::single_stage::default_anchor_boxes;

fn main() -> centerpoint::Result<()> {
    let anchors = generate_anchor_points(64, 64, &[8, 16]);
    println!("{} anchor points over {} levels", anchors.len(), anchors.levels.len());

    let gts = vec![
        GroundTruthObject::from_center(Point2D::new(20.0, 20.0), 0),
        GroundTruthObject::from_center(Point2D::new(45.0, 30.0), 1),
    ];
    let a = match_centerpoints(&anchors, &gts, 1.0);
    for (anchor, gt) in a.positives() {
        let t = a.target(anchor);
        println!("anchor {anchor:>3} -> gt {gt}  offset ({:+.3}, {:+.3})", t[0], t[1]);
    }

    let boxes = generate_anchor_boxes(&anchors, &default_anchor_boxes());
    let gt_boxes = gts
        .iter()
        .map(|g| HorizontalBox::new(g.center.x - 10.0, g.center.y - 8.0, g.center.x + 10.0, g.center.y + 8.0))
        .collect::<centerpoint::Result<Vec<_>>>()?;
    let b = iou_match(&boxes, &gt_boxes, IouThresholds::default());
    println!("{} box anchors, {} positive under IoU matching", boxes.len(), b.num_positive());
    Ok(())
}
