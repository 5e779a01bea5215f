//! Reducing boxes to centerpoints, GSD-aware distances and imputed windows.

use centerpoint::geometry::{
    box_center, center_distance, impute_square_box, rotated_to_horizontal, HorizontalBox, Point2D, RotatedBox, SourceBox,
};

fn main() -> centerpoint::Result<()> {
    let hbox = SourceBox::Horizontal(HorizontalBox::new(10.0, 20.0, 50.0, 40.0)?);
    let rbox = SourceBox::Rotated(RotatedBox::new(Point2D::new(100.0, 80.0), 60.0, 20.0, 0.5)?);
    for b in [&hbox, &rbox] {
        println!("{b:?}\n  center {:?}  area {:.1}", box_center(b), b.area());
    }
    if let SourceBox::Rotated(r) = rbox {
        println!("  rotated box envelope {:?}", rotated_to_horizontal(&r));
    }

    let (a, b) = (Point2D::new(0.0, 0.0), Point2D::new(6.0, 8.0));
    println!("distance: {} px, {} m at 0.3 m/px", center_distance(&a, &b, None)?, center_distance(&a, &b, Some(0.3))?);
    assert!(center_distance(&a, &b, Some(0.0)).is_err());

    // the fixed square the two-stage detector pools around a proposal
    println!("70 px window at (30, 30): {:?}", impute_square_box(&Point2D::new(30.0, 30.0), 70.0)?);
    Ok(())
}
