//! Contrastive and mask losses on small batches.

use avseg::losses::{loss_a2v, loss_avf, loss_mask_bce, loss_v2a, BatchEmbeddings, DEFAULT_TEMPERATURE};
use avseg::mask::{BinaryMask, SoftMask};
use avseg::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> avseg::Result<()> {
    let (b, d, stages) = (4, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // Identical embeddings everywhere: every pair looks alike, loss is 2 S log B.
    let flat = BatchEmbeddings {
        audio: Tensor::full(&[b, d], 0.5),
        visual: (0..stages).map(|_| Tensor::full(&[b, d, 4, 4], 0.5)).collect(),
        temperature: DEFAULT_TEMPERATURE,
    };
    println!("uninformative: L_avf {:.6}, 2 S log B = {:.6}", loss_avf(&flat)?, 2.0 * stages as f64 * (b as f64).ln());

    // Each visual map carries its own audio vector at one location: loss drops toward zero.
    let audio = Tensor::from_fn(&[b, d], |_| rng.gen_range(-1.0..1.0));
    let visual = (0..stages)
        .map(|_| {
            Tensor::from_fn(&[b, d, 4, 4], |i| {
                let (n, c, loc) = (i / (d * 16), (i / 16) % d, i % 16);
                if loc == 5 { audio.data()[n * d + c] } else { 0.01 }
            })
        })
        .collect();
    let aligned = BatchEmbeddings {
        audio,
        visual,
        temperature: DEFAULT_TEMPERATURE,
    };
    println!(
        "aligned: L_a2v {:.4}, L_v2a {:.4}, L_avf {:.4}",
        loss_a2v(&aligned)?,
        loss_v2a(&aligned)?,
        loss_avf(&aligned)?
    );

    let target = BinaryMask::from_fn(8, 8, |y, x| y < 4 && x < 4);
    for (name, p) in [("confident right", 0.95), ("undecided", 0.5)] {
        let pred = SoftMask::new(8, 8, target.values().iter().map(|&t| if t == 1 { p } else { 1.0 - p }).collect())?;
        println!("mask BCE ({name}): {:.4}", loss_mask_bce(&pred, &target)?);
    }
    Ok(())
}
