//! Toy dataset: generate, write the frame/audio/mask tree, load it back.

use avseg::data::{generate_dataset, load_avsbench_layout, write_avsbench_layout, SynthSpec};

fn main() -> avseg::Result<()> {
    let spec = SynthSpec::toy(4, 12, 7);
    let data = generate_dataset(&spec)?;
    println!("{} train / {} val / {} test", data.train.len(), data.val.len(), data.test.len());
    for (kind, tone) in spec.shape_kinds.iter().zip(&spec.tone_map) {
        println!("  {kind:?} <-> {tone:?}");
    }
    let s = &data.train[0];
    let fg = s.gt_mask.as_ref().map(|m| m.fg_fraction()).unwrap_or(0.0);
    println!("sample {} class {:?}: foreground {:.1}% of pixels", s.id, s.class_id, 100.0 * fg);

    let root = std::env::temp_dir().join("avseg-example-data");
    let _ = std::fs::remove_dir_all(&root);
    write_avsbench_layout(&data, &root, Some(&spec))?;
    let back = load_avsbench_layout(&root)?;
    println!(
        "written to {}; reloaded hash {} the in-memory hash",
        root.display(),
        if back.content_hash() == data.content_hash() { "matches" } else { "differs from" }
    );
    Ok(())
}
