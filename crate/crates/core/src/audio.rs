//! Waveforms, log-magnitude STFT spectrograms and WAV I/O.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        let w = Self {
            samples,
            sample_rate,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::InvalidWaveform("no samples".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidWaveform("sample rate must be > 0".into()));
        }
        if let Some(i) = self.samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidWaveform(format!("non-finite sample at index {i}")));
        }
        Ok(())
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Linear-interpolation resampling.
    pub fn resample(&self, target_rate: u32) -> Waveform {
        if target_rate == self.sample_rate {
            return self.clone();
        }
        let ratio = self.sample_rate as f64 / target_rate as f64;
        let n_out = ((self.samples.len() as f64) / ratio).round().max(1.0) as usize;
        let last = self.samples.len() - 1;
        let samples = (0..n_out)
            .map(|i| {
                let x = i as f64 * ratio;
                let i0 = (x.floor() as usize).min(last);
                let i1 = (i0 + 1).min(last);
                let f = x - i0 as f64;
                self.samples[i0] * (1.0 - f) + self.samples[i1] * f
            })
            .collect();
        Waveform {
            samples,
            sample_rate: target_rate,
        }
    }

    /// Reads a mono (or down-mixed) WAV file, PCM 16-bit or float32, resampled
    /// to `target_rate` when given.
    pub fn read_wav(path: &Path, target_rate: Option<u32>) -> Result<Waveform> {
        let wav_err = |reason: String| Error::Wav {
            path: path.to_path_buf(),
            reason,
        };
        let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(e.to_string()))?;
        let spec = reader.spec();
        let channels = spec.channels.max(1) as usize;
        let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Float, 32) => reader
                .samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_err(e.to_string()))?,
            (hound::SampleFormat::Int, 16) => reader
                .samples::<i16>()
                .map(|s| s.map(|v| v as f64 / 32768.0))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_err(e.to_string()))?,
            (fmt, bits) => {
                return Err(wav_err(format!("unsupported sample format {fmt:?}/{bits}-bit")))
            }
        };
        let samples: Vec<f64> = interleaved
            .chunks(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect();
        let w = Waveform::new(samples, spec.sample_rate)
            .map_err(|e| wav_err(e.to_string()))?;
        Ok(match target_rate {
            Some(r) => w.resample(r),
            None => w,
        })
    }

    /// Writes mono float32 WAV.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let wav_err = |e: hound::Error| Error::Wav {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(path, spec).map_err(wav_err)?;
        for &s in &self.samples {
            w.write_sample(s as f32).map_err(wav_err)?;
        }
        w.finalize().map_err(wav_err)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    /// Transform size; the spectrogram has `n_fft / 2 + 1` frequency bands.
    pub n_fft: usize,
    /// Time axis length after centered crop / edge padding.
    pub target_frames: usize,
    /// Clip length used by generators.
    pub clip_secs: f64,
}

impl AudioConfig {
    /// 3 s at 22050 Hz, 50 ms windows, 25 ms hop, 512-point transform, 257 x 300.
    pub fn full_scale() -> Self {
        Self {
            sample_rate: 22050,
            window_ms: 50.0,
            hop_ms: 25.0,
            n_fft: 512,
            target_frames: 300,
            clip_secs: 3.0,
        }
    }

    /// 64 x 64 spectrograms from 1 s at 8 kHz.
    pub fn toy() -> Self {
        Self {
            sample_rate: 8000,
            window_ms: 32.0,
            hop_ms: 16.0,
            n_fft: 126,
            target_frames: 64,
            clip_secs: 1.0,
        }
    }

    pub fn window_samples(&self) -> usize {
        (self.window_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn freq_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("audio.sample_rate must be > 0".into()));
        }
        if !(self.window_ms > 0.0 && self.hop_ms > 0.0) {
            return Err(Error::Config("audio window and hop must be > 0 ms".into()));
        }
        if self.window_samples() == 0 || self.hop_samples() == 0 {
            return Err(Error::Config("audio window/hop round to zero samples".into()));
        }
        if self.n_fft < 2 || self.target_frames == 0 {
            return Err(Error::Config("audio n_fft must be >= 2 and target_frames >= 1".into()));
        }
        Ok(())
    }
}

/// Log-magnitude time-frequency matrix, `F x T` row-major (frequency major).
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub values: Vec<f64>,
    pub freq_bins: usize,
    pub time_steps: usize,
}

impl Spectrogram {
    pub fn new(values: Vec<f64>, freq_bins: usize, time_steps: usize) -> Self {
        assert_eq!(values.len(), freq_bins * time_steps);
        Self {
            values,
            freq_bins,
            time_steps,
        }
    }

    pub fn at(&self, f: usize, t: usize) -> f64 {
        self.values[f * self.time_steps + t]
    }

    pub fn column(&self, t: usize) -> Vec<f64> {
        (0..self.freq_bins).map(|f| self.at(f, t)).collect()
    }

    /// `[1, F, T]` view for the audio encoder.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.freq_bins, self.time_steps], self.values.clone())
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    hop: usize,
    n_fft: usize,
}

impl Stft {
    fn new(cfg: &AudioConfig) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            fft: planner.plan_fft_forward(cfg.n_fft),
            window: hann(cfg.window_samples()),
            hop: cfg.hop_samples(),
            n_fft: cfg.n_fft,
        }
    }

    /// `log(1 + |X_t(k)|)` for `k < n_fft/2 + 1`, where `X_t` is the transform of
    /// the windowed frame evaluated at `n_fft` equally spaced frequencies. Frames
    /// longer than `n_fft` are folded (time-aliased) modulo `n_fft`, which gives
    /// exactly those frequency samples.
    fn run(&self, x: &[f64]) -> (Vec<Vec<f64>>, usize) {
        let win = self.window.len();
        let frames = 1 + (x.len() - win) / self.hop;
        let bins = self.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut cols = Vec::with_capacity(frames);
        for t in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            let frame = &x[t * self.hop..t * self.hop + win];
            for (n, (&s, &w)) in frame.iter().zip(&self.window).enumerate() {
                buf[n % self.n_fft].re += s * w;
            }
            self.fft.process(&mut buf);
            cols.push(buf[..bins].iter().map(|c| c.norm().ln_1p()).collect());
        }
        (cols, frames)
    }
}

/// Log-magnitude STFT normalized to `cfg.target_frames` columns.
pub fn compute_spectrogram(w: &Waveform, cfg: &AudioConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    w.validate()?;
    let resampled;
    let w = if w.sample_rate != cfg.sample_rate {
        resampled = w.resample(cfg.sample_rate);
        &resampled
    } else {
        w
    };
    let need = cfg.window_samples();
    if w.samples.len() < need {
        return Err(Error::AudioTooShort {
            got: w.samples.len(),
            need,
        });
    }
    let (cols, frames) = Stft::new(cfg).run(&w.samples);
    let bins = cfg.freq_bins();
    let mut values = vec![0.0; bins * frames];
    for (t, col) in cols.iter().enumerate() {
        for (f, &v) in col.iter().enumerate() {
            values[f * frames + t] = v;
        }
    }
    Ok(pad_or_crop(&Spectrogram::new(values, bins, frames), cfg.target_frames))
}

/// Fixes the time axis at `target_t` columns: centered crop when longer, edge
/// replication split evenly on both sides when shorter.
pub fn pad_or_crop(s: &Spectrogram, target_t: usize) -> Spectrogram {
    assert!(target_t >= 1, "target_t must be >= 1");
    let t = s.time_steps;
    let src_col = |o: usize| -> usize {
        if t >= target_t {
            (t - target_t) / 2 + o
        } else {
            let left = (target_t - t) / 2;
            o.saturating_sub(left).min(t - 1)
        }
    };
    let mut values = vec![0.0; s.freq_bins * target_t];
    for f in 0..s.freq_bins {
        for o in 0..target_t {
            values[f * target_t + o] = s.at(f, src_col(o));
        }
    }
    Spectrogram::new(values, s.freq_bins, target_t)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct DFT of the windowed frame at `n_fft` frequencies, no folding.
    fn naive_column(x: &[f64], start: usize, cfg: &AudioConfig) -> Vec<f64> {
        let win = hann(cfg.window_samples());
        (0..cfg.freq_bins())
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &w) in win.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / cfg.n_fft as f64;
                    re += x[start + n] * w * ang.cos();
                    im += x[start + n] * w * ang.sin();
                }
                (re * re + im * im).sqrt().ln_1p()
            })
            .collect()
    }

    fn tone(freq: f64, cfg: &AudioConfig, secs: f64) -> Waveform {
        let n = (secs * cfg.sample_rate as f64) as usize;
        let sr = cfg.sample_rate as f64;
        Waveform::new(
            (0..n)
                .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin())
                .collect(),
            cfg.sample_rate,
        )
        .unwrap()
    }

    #[test]
    fn full_scale_shape_is_257_by_300() {
        let cfg = AudioConfig::full_scale();
        let w = tone(440.0, &cfg, 3.0);
        let s = compute_spectrogram(&w, &cfg).unwrap();
        assert_eq!((s.freq_bins, s.time_steps), (257, 300));
        assert!(s.values.iter().all(|v| v.is_finite()));
        // 3 s of audio at a 25 ms hop gives about 120 real frames.
        let frames = 1 + (w.samples.len() - cfg.window_samples()) / cfg.hop_samples();
        assert_eq!(frames, 119);
    }

    #[test]
    fn zero_waveform_gives_zero_spectrogram() {
        let cfg = AudioConfig::toy();
        let w = Waveform::new(vec![0.0; 8000], 8000).unwrap();
        let s = compute_spectrogram(&w, &cfg).unwrap();
        assert!(s.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bin_center_tone_matches_naive_dft() {
        for cfg in [AudioConfig::toy(), AudioConfig::full_scale()] {
            let k = 20;
            let freq = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
            let w = tone(freq, &cfg, cfg.clip_secs);
            let frames = 1 + (w.samples.len() - cfg.window_samples()) / cfg.hop_samples();
            let s = compute_spectrogram(
                &w,
                &AudioConfig {
                    target_frames: frames,
                    ..cfg.clone()
                },
            )
            .unwrap();
            for t in [0, frames / 2, frames - 1] {
                let want = naive_column(&w.samples, t * cfg.hop_samples(), &cfg);
                let got = s.column(t);
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                }
                let argmax = got
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0;
                assert_eq!(argmax, k);
            }
            // Columns agree closely; only the negative-frequency image varies with phase.
            let peak: Vec<f64> = (0..frames).map(|t| s.at(k, t)).collect();
            let (lo, hi) = peak
                .iter()
                .fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            assert!((hi - lo) / hi < 1e-2);
        }
    }

    #[test]
    fn short_and_invalid_audio_are_rejected() {
        let cfg = AudioConfig::toy();
        let short = Waveform::new(vec![0.1; 10], 8000).unwrap();
        assert!(matches!(
            compute_spectrogram(&short, &cfg),
            Err(Error::AudioTooShort { .. })
        ));
        let bad = Waveform {
            samples: vec![0.0, f64::NAN, 0.0],
            sample_rate: 8000,
        };
        assert!(matches!(
            compute_spectrogram(&bad, &cfg),
            Err(Error::InvalidWaveform(_))
        ));
    }

    fn ramp(t: usize) -> Spectrogram {
        Spectrogram::new((0..2 * t).map(|i| (i % t) as f64).collect(), 2, t)
    }

    #[test]
    fn pad_or_crop_cases() {
        let padded = pad_or_crop(&ramp(120), 300);
        assert_eq!(padded.time_steps, 300);
        // 90 replicated columns on the left, 90 on the right.
        assert_eq!(padded.at(1, 0), 0.0);
        assert_eq!(padded.at(1, 90), 0.0);
        assert_eq!(padded.at(1, 91), 1.0);
        assert_eq!(padded.at(1, 299), 119.0);

        let same = ramp(300);
        assert_eq!(pad_or_crop(&same, 300), same);

        let cropped = pad_or_crop(&ramp(400), 300);
        assert_eq!(cropped.column(0), ramp(400).column(50));
        assert_eq!(cropped.column(299), ramp(400).column(349));
    }

    #[test]
    fn wav_roundtrip_and_resample() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new((0..800).map(|i| ((i as f64) * 0.01).sin() as f32 as f64).collect(), 8000)
            .unwrap();
        w.write_wav(&path).unwrap();
        assert_eq!(Waveform::read_wav(&path, None).unwrap(), w);
        let r = Waveform::read_wav(&path, Some(16000)).unwrap();
        assert_eq!(r.sample_rate, 16000);
        assert_eq!(r.samples.len(), 1600);
        assert_eq!(r.samples[2], w.samples[1]);
    }

    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn scaling_up_never_decreases_entries(
            seed in 0u64..1000,
            c in 1.0f64..10.0,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cfg = AudioConfig::toy();
            let samples: Vec<f64> = (0..4000).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w = Waveform::new(samples.clone(), 8000).unwrap();
            let w2 = Waveform::new(samples.iter().map(|s| s * c).collect(), 8000).unwrap();
            let a = compute_spectrogram(&w, &cfg).unwrap();
            let b = compute_spectrogram(&w2, &cfg).unwrap();
            prop_assert_eq!((b.freq_bins, b.time_steps), (a.freq_bins, a.time_steps));
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!(y + 1e-12 >= *x);
            }
            prop_assert_eq!(compute_spectrogram(&w, &cfg).unwrap(), a);
        }
    }
}
