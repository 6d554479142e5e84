//! Procedural audio-visual toy data and the on-disk frame/audio/mask layout.
//!
//! Layout: `root/{train,val,test}/{video}/frames/*.png`, `audio.wav`,
//! `masks/*.png` (optional for train) and an optional `meta.json` with the
//! class id. Each frame is one sample with id `{video}/{frame stem}`.

use std::cell::Cell;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::Waveform;
use crate::encoders::component_rng;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::Tensor;

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
}

impl Geometry {
    const ALL: [Geometry; 6] = [
        Geometry::Disk,
        Geometry::Square,
        Geometry::Triangle,
        Geometry::Cross,
        Geometry::Ring,
        Geometry::Diamond,
    ];

    /// Whether offset `(dy, dx)` from the center lies inside a shape of radius `r`.
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            Geometry::Disk => dy * dy + dx * dx <= r * r,
            Geometry::Square => dy.abs() <= r && dx.abs() <= r,
            Geometry::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0,
            Geometry::Cross => {
                let arm = r / 3.0;
                (dy.abs() <= r && dx.abs() <= arm) || (dx.abs() <= r && dy.abs() <= arm)
            }
            Geometry::Ring => {
                let d = dy * dy + dx * dx;
                d <= r * r && d >= (0.5 * r) * (0.5 * r)
            }
            Geometry::Diamond => dy.abs() + dx.abs() <= r,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeKind {
    pub geometry: Geometry,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tone {
    pub fundamental_hz: f64,
    /// Amplitudes of harmonics 1, 2, ...
    pub harmonics: Vec<f64>,
}

impl Tone {
    pub fn render(&self, sample_rate: u32, n: usize) -> Vec<f64> {
        let sr = f64::from(sample_rate);
        let norm: f64 = self.harmonics.iter().sum();
        (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                self.harmonics
                    .iter()
                    .enumerate()
                    .map(|(h, a)| a * (2.0 * PI * (h + 1) as f64 * self.fundamental_hz * t).sin())
                    .sum::<f64>()
                    * 0.5
                    / norm
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub image_size: (usize, usize),
    pub shape_kinds: Vec<ShapeKind>,
    pub tone_map: Vec<Tone>,
    pub noise_level: f64,
    pub sample_rate: u32,
    pub clip_secs: f64,
    /// Also draw one silent shape of another class.
    pub distractors: bool,
    pub seed: u64,
}

const PALETTE: [[f64; 3]; 6] = [
    [0.9, 0.15, 0.15],
    [0.15, 0.75, 0.2],
    [0.2, 0.3, 0.95],
    [0.95, 0.85, 0.1],
    [0.85, 0.2, 0.85],
    [0.1, 0.85, 0.85],
];

impl SynthSpec {
    /// Default class table: distinct geometry and color per class, tones on
    /// exact bins of a 126-point transform at 8 kHz. Fundamentals are spaced
    /// 4 bins apart, closer when more classes must fit under Nyquist.
    pub fn toy(n_classes: usize, samples_per_class: usize, seed: u64) -> Self {
        let bin_hz = 8000.0 / 126.0;
        let top = n_classes.saturating_sub(1);
        let step = (1..=4).rev().find(|s| 3 * (5 + s * top) < 63).unwrap_or(4);
        Self {
            n_classes,
            samples_per_class,
            image_size: (64, 64),
            shape_kinds: (0..n_classes)
                .map(|c| ShapeKind {
                    geometry: Geometry::ALL[c % Geometry::ALL.len()],
                    color: PALETTE[(c + c / PALETTE.len()) % PALETTE.len()],
                })
                .collect(),
            tone_map: (0..n_classes)
                .map(|c| Tone {
                    fundamental_hz: (5 + step * c) as f64 * bin_hz,
                    harmonics: vec![1.0, 0.4, 0.15],
                })
                .collect(),
            noise_level: 0.05,
            sample_rate: 8000,
            clip_secs: 1.0,
            distractors: false,
            seed,
        }
    }

    fn min_radius(&self) -> f64 {
        0.15 * self.image_size.0.min(self.image_size.1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.samples_per_class == 0 {
            return Err(Error::Config("n_classes and samples_per_class must be >= 1".into()));
        }
        if self.shape_kinds.len() != self.n_classes || self.tone_map.len() != self.n_classes {
            return Err(Error::Config(format!(
                "need one shape kind and one tone per class ({}), got {} and {}",
                self.n_classes,
                self.shape_kinds.len(),
                self.tone_map.len()
            )));
        }
        if self.min_radius() < 3.0 {
            return Err(Error::Config(format!(
                "image size {:?} too small for the minimum shape (need at least 20x20)",
                self.image_size
            )));
        }
        let nyquist = f64::from(self.sample_rate) / 2.0;
        for t in &self.tone_map {
            if t.harmonics.is_empty() || t.fundamental_hz * t.harmonics.len() as f64 >= nyquist {
                return Err(Error::Config(format!(
                    "tone {} Hz with {} harmonics exceeds Nyquist {nyquist} Hz",
                    t.fundamental_hz,
                    t.harmonics.len()
                )));
            }
        }
        for (i, a) in self.tone_map.iter().enumerate() {
            if self.tone_map[..i].iter().any(|b| b == a) {
                return Err(Error::Config("class tones must be distinct".into()));
            }
        }
        if !(self.noise_level >= 0.0) || !(self.clip_secs > 0.0) {
            return Err(Error::Config("noise_level must be >= 0 and clip_secs > 0".into()));
        }
        Ok(())
    }
}

/// One frame/audio pair. The ground-truth mask is held out of weak training.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub waveform: Waveform,
    pub gt_mask: Option<BinaryMask>,
    pub class_id: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[SamplePair]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// SHA-256 over ids, pixels, samples, masks and labels of every split.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, split) in SPLITS.iter().zip([&self.train, &self.val, &self.test]) {
            h.update(name.as_bytes());
            h.update((split.len() as u64).to_le_bytes());
            for s in split {
                h.update(s.id.as_bytes());
                h.update([0]);
                for d in s.image.shape() {
                    h.update((*d as u64).to_le_bytes());
                }
                for v in s.image.data() {
                    h.update(v.to_le_bytes());
                }
                h.update(s.waveform.sample_rate.to_le_bytes());
                for v in &s.waveform.samples {
                    h.update(v.to_le_bytes());
                }
                match &s.gt_mask {
                    Some(m) => {
                        h.update([1]);
                        h.update((m.height as u64).to_le_bytes());
                        h.update(m.values());
                    }
                    None => h.update([0]),
                }
                h.update(s.class_id.map_or(u64::MAX, |c| c as u64).to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct Placed {
    class: usize,
    cy: f64,
    cx: f64,
    r: f64,
}

fn place(spec: &SynthSpec, class: usize, rng: &mut impl Rng) -> Placed {
    let (h, w) = spec.image_size;
    let rmin = spec.min_radius();
    let rmax = 0.3 * h.min(w) as f64;
    let r = rng.gen_range(rmin..=rmax);
    Placed {
        class,
        cy: rng.gen_range(r..=(h as f64 - 1.0 - r)),
        cx: rng.gen_range(r..=(w as f64 - 1.0 - r)),
        r,
    }
}

fn footprint(spec: &SynthSpec, p: &Placed) -> BinaryMask {
    let geom = spec.shape_kinds[p.class].geometry;
    let (h, w) = spec.image_size;
    BinaryMask::from_fn(h, w, |y, x| geom.contains(y as f64 - p.cy, x as f64 - p.cx, p.r))
}

fn render_sample(spec: &SynthSpec, index: usize, class: usize) -> SamplePair {
    let mut rng = component_rng(spec.seed, &format!("synth{index}"));
    let (h, w) = spec.image_size;

    // Low-saturation textured background.
    let base: f64 = rng.gen_range(0.3..0.6);
    let tint: [f64; 3] = [0, 1, 2].map(|_| rng.gen_range(-0.05..0.05));
    let (fy, fx, phase) = (
        rng.gen_range(0.05..0.3),
        rng.gen_range(0.05..0.3),
        rng.gen_range(0.0..2.0 * PI),
    );
    let mut image = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let stripes = 0.08 * (fy * y as f64 + fx * x as f64 + phase).sin();
            let grain = rng.gen_range(-0.04..0.04);
            for c in 0..3 {
                image[(c * h + y) * w + x] = base + tint[c] + stripes + grain;
            }
        }
    }

    let mut paint = |mask: &BinaryMask, color: [f64; 3], rng: &mut rand_chacha::ChaCha8Rng| {
        let shade: f64 = rng.gen_range(0.85..1.0);
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) {
                    let grain = rng.gen_range(-0.03..0.03);
                    for c in 0..3 {
                        image[(c * h + y) * w + x] = color[c] * shade + grain;
                    }
                }
            }
        }
    };

    if spec.distractors && spec.n_classes > 1 {
        let other = (class + rng.gen_range(1..spec.n_classes)) % spec.n_classes;
        let p = place(spec, other, &mut rng);
        let m = footprint(spec, &p);
        paint(&m, spec.shape_kinds[other].color, &mut rng);
    }
    let object = place(spec, class, &mut rng);
    let gt = footprint(spec, &object);
    paint(&gt, spec.shape_kinds[class].color, &mut rng);
    debug_assert!(gt.count_ones() > 0 && gt.fg_fraction() < 0.5);

    let n = (spec.clip_secs * f64::from(spec.sample_rate)).round() as usize;
    let samples = spec.tone_map[class]
        .render(spec.sample_rate, n)
        .into_iter()
        .map(|v| {
            let noise = if spec.noise_level > 0.0 {
                spec.noise_level * rng.gen_range(-1.0..1.0)
            } else {
                0.0
            };
            // Values round-trip exactly through 32-bit float WAV.
            (v + noise) as f32 as f64
        })
        .collect();

    SamplePair {
        id: format!("syn{index:05}/0"),
        image: Tensor::new(vec![3, h, w], image.into_iter().map(quantize).collect()),
        waveform: Waveform {
            samples,
            sample_rate: spec.sample_rate,
        },
        gt_mask: Some(gt),
        class_id: Some(class),
    }
}

/// Renders `n_classes * samples_per_class` samples and splits them 70/15/15
/// after a seeded shuffle.
pub fn generate_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let total = spec.n_classes * spec.samples_per_class;
    let mut samples: Vec<SamplePair> = (0..total)
        .map(|i| render_sample(spec, i, i % spec.n_classes))
        .collect();
    samples.shuffle(&mut component_rng(spec.seed, "split"));
    let n_train = (0.7 * total as f64).round() as usize;
    let n_val = (0.15 * total as f64).round() as usize;
    let mut test = samples.split_off((n_train + n_val).min(total));
    let mut val = samples.split_off(n_train.min(samples.len()));
    // Same order as a directory listing, so a written tree loads back identically.
    for split in [&mut samples, &mut val, &mut test] {
        split.sort_by(|a, b| a.id.cmp(&b.id));
    }
    Ok(Dataset {
        train: samples,
        val,
        test,
    })
}

const SPEC_FILE: &str = "spec.json";

#[derive(Serialize, Deserialize)]
struct Meta {
    class_id: usize,
}

fn write_rgb(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut bytes = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push((image.data()[(c * h + y) * w + x] * 255.0).round() as u8);
            }
        }
    }
    crate::mask::write_png_raw(path, w, h, png::ColorType::Rgb, png::BitDepth::Eight, &bytes)
}

fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = crate::mask::read_png(path)?;
    let (h, w) = (img.height, img.width);
    let mut data = vec![0.0; 3 * h * w];
    for (p, px) in img.pixels.chunks(img.channels).enumerate() {
        for c in 0..3 {
            let v = if img.channels >= 3 { px[c] } else { px[0] };
            data[c * h * w + p] = f64::from(v) / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data))
}

fn split_id(id: &str) -> (&str, &str) {
    id.rsplit_once('/').unwrap_or((id, "0"))
}

/// Writes the dataset in the frame/audio/mask layout. Frames of one video must
/// be adjacent and share a waveform.
pub fn write_avsbench_layout(data: &Dataset, root: &Path, spec: Option<&SynthSpec>) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    if let Some(spec) = spec {
        let p = root.join(SPEC_FILE);
        fs::write(&p, serde_json::to_string_pretty(spec)?).map_err(|e| Error::io(&p, e))?;
    }
    for (name, split) in SPLITS.iter().zip([&data.train, &data.val, &data.test]) {
        let split_dir = root.join(name);
        fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
        for s in split {
            let (video, frame) = split_id(&s.id);
            let vdir = split_dir.join(video);
            let frames = vdir.join("frames");
            fs::create_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
            write_rgb(&frames.join(format!("{frame}.png")), &s.image)?;
            let wav = vdir.join("audio.wav");
            if !wav.exists() {
                s.waveform.write_wav(&wav)?;
            }
            if let Some(m) = &s.gt_mask {
                let masks = vdir.join("masks");
                fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
                m.write_png(&masks.join(format!("{frame}.png")))?;
            }
            if let Some(class_id) = s.class_id {
                let p = vdir.join("meta.json");
                fs::write(&p, serde_json::to_string(&Meta { class_id })?).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    Ok(())
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn layout_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Layout {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Loads every split present under `root`. Masks may be missing in `train`
/// only.
pub fn load_avsbench_layout(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(layout_err(root, "dataset root is not a directory"));
    }
    let mut data = Dataset::default();
    for name in SPLITS {
        let split_dir = root.join(name);
        if !split_dir.exists() {
            continue;
        }
        let mut out = Vec::new();
        for vdir in sorted_entries(&split_dir)? {
            if !vdir.is_dir() {
                continue;
            }
            let video = vdir
                .file_name()
                .and_then(|s| s.to_str())
                .ok_or_else(|| layout_err(&vdir, "video directory name is not UTF-8"))?
                .to_string();
            let frames_dir = vdir.join("frames");
            if !frames_dir.is_dir() {
                return Err(layout_err(&frames_dir, "missing frames directory"));
            }
            let wav = vdir.join("audio.wav");
            if !wav.is_file() {
                return Err(layout_err(&wav, "missing audio.wav"));
            }
            let waveform = Waveform::read_wav(&wav, None)?;
            let meta = vdir.join("meta.json");
            let class_id = if meta.is_file() {
                let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
                let m: Meta = serde_json::from_str(&text)
                    .map_err(|e| layout_err(&meta, format!("bad meta.json: {e}")))?;
                Some(m.class_id)
            } else {
                None
            };
            let frames: Vec<_> = sorted_entries(&frames_dir)?
                .into_iter()
                .filter(|p| p.extension().is_some_and(|e| e == "png"))
                .collect();
            if frames.is_empty() {
                return Err(layout_err(&frames_dir, "no PNG frames"));
            }
            for frame in frames {
                let stem = frame
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| layout_err(&frame, "frame name is not UTF-8"))?;
                let id = format!("{video}/{stem}");
                let image = read_rgb(&frame)?;
                let mask_path = vdir.join("masks").join(format!("{stem}.png"));
                let gt_mask = if mask_path.is_file() {
                    let m = BinaryMask::read_png(&mask_path)?;
                    if (m.height, m.width) != (image.shape()[1], image.shape()[2]) {
                        return Err(layout_err(
                            &mask_path,
                            format!(
                                "mask is {}x{} but frame is {}x{}",
                                m.height,
                                m.width,
                                image.shape()[1],
                                image.shape()[2]
                            ),
                        ));
                    }
                    Some(m)
                } else if name == "train" {
                    None
                } else {
                    return Err(Error::MissingGroundTruth(format!(
                        "{} (split {name})",
                        mask_path.display()
                    )));
                };
                out.push(SamplePair {
                    id,
                    image,
                    waveform: waveform.clone(),
                    gt_mask,
                    class_id,
                });
            }
        }
        match name {
            "train" => data.train = out,
            "val" => data.val = out,
            _ => data.test = out,
        }
    }
    if data.is_empty() {
        log::warn!("no samples found under {}", root.display());
    }
    Ok(data)
}

/// Reads the generator spec stored next to a synthetic tree, if any.
pub fn load_spec(root: &Path) -> Result<Option<SynthSpec>> {
    let p = root.join(SPEC_FILE);
    if !p.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

/// Training samples whose ground-truth masks are reachable only through a
/// counted accessor.
pub struct TrainingSet {
    samples: Vec<SamplePair>,
    gt_reads: Cell<usize>,
}

impl TrainingSet {
    pub fn new(samples: Vec<SamplePair>) -> Self {
        Self {
            samples,
            gt_reads: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.samples[i].id
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.samples[i].image
    }

    pub fn waveform(&self, i: usize) -> &Waveform {
        &self.samples[i].waveform
    }

    pub fn class_id(&self, i: usize) -> Option<usize> {
        self.samples[i].class_id
    }

    /// Ground-truth mask of sample `i`; every call is counted.
    pub fn ground_truth(&self, i: usize) -> Option<&BinaryMask> {
        self.gt_reads.set(self.gt_reads.get() + 1);
        self.samples[i].gt_mask.as_ref()
    }

    pub fn gt_reads(&self) -> usize {
        self.gt_reads.get()
    }
}
