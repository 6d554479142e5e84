//! Pseudo masks from instance labels and images: train the activation model,
//! refine against the derived saliency, export the masks.

use avseg::data::TrainingSet;
use avseg::metrics::iou;
use avseg::pipeline::{build_pseudo_masks, load_data};
use avseg::pseudomask::export_pseudo_masks;
use avseg::RunConfig;

fn main() -> avseg::Result<()> {
    let cfg = RunConfig::toy();
    let data = load_data(&cfg)?;
    let train = TrainingSet::new(data.train.clone());
    let (ccam, masks) = build_pseudo_masks(&cfg, &train)?;
    println!(
        "{} masks; classification loss {:.3} -> {:.3}, contrast loss {:.3} -> {:.3}",
        masks.len(),
        ccam.pretrain_losses.first().copied().unwrap_or(f64::NAN),
        ccam.pretrain_losses.last().copied().unwrap_or(f64::NAN),
        ccam.epoch_losses.first().copied().unwrap_or(f64::NAN),
        ccam.epoch_losses.last().copied().unwrap_or(f64::NAN),
    );
    println!("ground-truth reads while building: {}", train.gt_reads());

    // Diagnostic only: the generator's masks were never shown to the model.
    let q = data.train.iter().map(|s| iou(&masks[&s.id], s.gt_mask.as_ref().unwrap()).unwrap()).sum::<f64>()
        / data.train.len() as f64;
    println!("pseudo-mask mIoU against hidden masks: {q:.3}");

    let out = std::env::temp_dir().join("avseg-example-pseudomasks");
    let entries = export_pseudo_masks(&masks, &out)?;
    println!("exported {} PNGs and a manifest to {}", entries.len(), out.display());
    Ok(())
}
