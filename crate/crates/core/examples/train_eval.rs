//! Toy weak-supervision run: pseudo masks, training, test evaluation.
//!
//! `cargo run --release --example train_eval -- [key=value ...]`, e.g. `mode=pmr_only seed=2`

use std::time::Instant;

use avseg::config::{Mode, RunConfig};
use avseg::data::TrainingSet;
use avseg::pipeline::{build_pseudo_masks, evaluate_untrained, load_data, run_experiment};
use avseg::metrics::iou;

fn main() -> avseg::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let cfg = RunConfig::load(None, Some("toy"), &overrides)?;
    let out = std::env::temp_dir().join("avseg-example-train-eval");
    let data = load_data(&cfg)?;
    println!("data: {} train / {} val / {} test", data.train.len(), data.val.len(), data.test.len());

    let t = Instant::now();
    let pseudo = if cfg.mode == Mode::Weak || cfg.mode == Mode::PmrOnly {
        let (ccam, masks) = build_pseudo_masks(&cfg, &TrainingSet::new(data.train.clone()))?;
        // Diagnostic only: pseudo-mask quality against held-out training masks.
        let q: f64 = data
            .train
            .iter()
            .map(|s| iou(&masks[&s.id], s.gt_mask.as_ref().unwrap()).unwrap())
            .sum::<f64>()
            / data.train.len() as f64;
        println!(
            "pseudo masks in {:.1}s (final contrast loss {:.4}), mIoU vs hidden masks {q:.3}",
            t.elapsed().as_secs_f64(),
            ccam.epoch_losses.last().copied().unwrap_or(f64::NAN)
        );
        Some(masks)
    } else {
        None
    };

    let chance = evaluate_untrained(&cfg, &data.test, cfg.readout.resolve(cfg.mode))?;
    println!("untrained test mIoU {:.4}", chance.miou);
    let t = Instant::now();
    let r = run_experiment(&cfg, &data, pseudo.as_ref(), &out)?;
    println!(
        "mode {:?}: test mIoU {:.4}, F {:.4} in {:.1}s",
        cfg.mode,
        r.test.miou,
        r.test.fscore,
        t.elapsed().as_secs_f64()
    );
    Ok(())
}
