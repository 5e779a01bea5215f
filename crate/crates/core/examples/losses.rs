//! The loss functions and their analytic gradients.

use centerpoint::losses::{binary_cross_entropy, cross_entropy, focal_loss, smooth_l1};

fn main() -> centerpoint::Result<()> {
    let f = focal_loss(&[2.0, -1.0, 0.0], &[true, false, false], Some(0.25), 2.0)?;
    println!("focal: {:.4}  grad {:?}", f.value, f.grad);

    let s = smooth_l1(&[0.3, -0.05], &[0.0, 0.0], 0.1)?;
    println!("smooth-L1: {:.4}  grad {:?}", s.value, s.grad);

    let b = binary_cross_entropy(&[0.5, -0.5], &[true, true])?;
    println!("BCE: {:.4}  grad {:?}", b.value, b.grad);

    // two rows of K + 1 = 3 logits, the last column is background
    let c = cross_entropy(&[1.0, 0.0, -1.0, 0.2, 0.1, 2.0], &[0, 2], 3)?;
    println!("CE: {:.4}  grad {:?}", c.value, c.grad);
    Ok(())
}
