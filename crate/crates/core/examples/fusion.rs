//! Encoders and audio-visual fusion on one toy sample: stage shapes, the
//! identity at initialization, and per-stage audio-visual similarity.

use avseg::data::{generate_dataset, SynthSpec};
use avseg::fusion::{max_pooled_similarity, similarity_map};
use avseg::{Model, RunConfig};

fn main() -> avseg::Result<()> {
    let cfg = RunConfig::toy();
    let mut model = Model::from_run(&cfg)?;
    let data = generate_dataset(&SynthSpec::toy(4, 4, 1))?;
    let s = &data.train[0];

    let a = model.encode_audio(&model.spectrogram(&s.waveform)?)?;
    let v = model.encode_visual(&s.image)?;
    println!("audio embedding: {} dims", a.dim());
    for (i, (h, w)) in v.stage_shapes().iter().enumerate() {
        let sim = max_pooled_similarity(&a, &v.stages[i])?;
        println!("stage {i}: {} x {h} x {w}, max cosine with audio {sim:+.3}", v.dim());
    }

    // μ starts at zero, so fusion passes the visual features through unchanged.
    let z = model.fuse(&v, &a)?;
    let drift = |z: &avseg::fusion::FusedFeatures| {
        z.stages
            .iter()
            .zip(&v.stages)
            .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max)
    };
    println!("max |z - v| at init: {:.1e}", drift(&z));

    let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).filter(|n| n.ends_with("mu.weight")).collect();
    for n in &names {
        model.store.by_name_mut(n).unwrap().data_mut().fill(0.05);
    }
    let z = model.fuse(&v, &a)?;
    println!("max |z - v| with mu = 0.05: {:.3}", drift(&z));

    let m = similarity_map(&a.vector, &z.stages[0]);
    let (lo, hi) = m.data().iter().fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
    println!("stage-0 similarity map {:?}, range [{lo:+.3}, {hi:+.3}]", m.shape());
    Ok(())
}
