//! Audio front end: a two-tone clip through the log-magnitude transform, plus a WAV round trip.

use avseg::audio::{compute_spectrogram, AudioConfig, Waveform};

fn main() -> avseg::Result<()> {
    let cfg = AudioConfig::toy();
    let sr = cfg.sample_rate;
    let n = (sr as f64 * 1.0) as usize;
    let samples: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr as f64;
            0.6 * (2.0 * std::f64::consts::PI * 500.0 * t).sin() + 0.3 * (2.0 * std::f64::consts::PI * 1500.0 * t).sin()
        })
        .collect();
    let w = Waveform::new(samples, sr)?;
    let s = compute_spectrogram(&w, &cfg)?;
    println!("{:.2}s at {} Hz -> {} bands x {} frames", w.duration_secs(), sr, s.freq_bins, s.time_steps);

    // Strongest bands in the middle frame should sit at 500 Hz and 1500 Hz.
    let col = s.column(s.time_steps / 2);
    let mut bands: Vec<usize> = (0..col.len()).collect();
    bands.sort_by(|&a, &b| col[b].total_cmp(&col[a]));
    let hz = |k: usize| k as f64 * sr as f64 / cfg.n_fft as f64;
    println!("top bands: {:.0} Hz, {:.0} Hz", hz(bands[0]), hz(bands[1]));

    let path = std::env::temp_dir().join("avseg-example-tone.wav");
    w.write_wav(&path)?;
    let back = Waveform::read_wav(&path, None)?;
    let err = w.samples.iter().zip(&back.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("wav round trip at {}: max abs error {err:.2e}", path.display());
    Ok(())
}
