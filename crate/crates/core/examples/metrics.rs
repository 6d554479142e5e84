//! Mask metrics on hand-made masks, including the empty-mask conventions.

use avseg::mask::BinaryMask;
use avseg::metrics::{f_score, iou, DEFAULT_BETA_SQ};

fn main() -> avseg::Result<()> {
    let square = |y0: usize, x0: usize| BinaryMask::from_fn(8, 8, move |y, x| (y0..y0 + 4).contains(&y) && (x0..x0 + 4).contains(&x));
    let gt = square(2, 2);
    let empty = BinaryMask::zeros(8, 8);
    let cases = [
        ("exact", square(2, 2), gt.clone()),
        ("shifted by one", square(3, 3), gt.clone()),
        ("disjoint", square(0, 4), square(4, 0)),
        ("empty vs object", empty.clone(), gt.clone()),
        ("both empty", empty.clone(), empty.clone()),
    ];
    println!("{:<16} {:>6} {:>8}", "case", "IoU", "F(0.3)");
    for (name, pred, target) in &cases {
        println!(
            "{name:<16} {:>6.3} {:>8.3}",
            iou(pred, target)?,
            f_score(pred, target, DEFAULT_BETA_SQ)?
        );
    }
    Ok(())
}
