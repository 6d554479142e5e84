//! Training, evaluation, pseudo-mask phase and sweeps.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audio::compute_spectrogram;
use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{Mode, Readout, RunConfig, SimilarityFeatures};
use crate::data::{generate_dataset, load_avsbench_layout, Dataset, SamplePair, SynthSpec, TrainingSet};
use crate::encoders::{check_image, component_rng};
use crate::error::{Error, Result};
use crate::losses::{contrastive_on_tape, Direction, LossReport};
use crate::mask::SoftMask;
use crate::metrics::MetricsReport;
use crate::model::Model;
use crate::nn::{Adam, AdamState};
use crate::plot::{line_plot, Series};
use crate::pseudomask::{
    file_stem_for, generate_pseudo_masks, train_ccam, train_saliency_detector, BackgroundActivation,
    PseudoMaskSet, SaliencyProvider, TrainedCcam,
};
use crate::segmentation::binarize;
use crate::tensor::Tensor;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const EPOCH_LOG: &str = "train_log.jsonl";
pub const STEP_LOG: &str = "steps.jsonl";
pub const NONFINITE_DUMP: &str = "nonfinite_batch.json";

/// Synthetic generator settings derived from a run configuration.
pub fn synth_spec(cfg: &RunConfig) -> SynthSpec {
    let d = &cfg.data;
    SynthSpec {
        image_size: cfg.encoder.image_size,
        noise_level: d.noise_level,
        distractors: d.distractors,
        ..SynthSpec::toy(d.n_classes, d.samples_per_class, d.seed)
    }
}

/// The configured directory tree, or the synthetic set generated in memory.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.root {
        Some(root) => load_avsbench_layout(root),
        None => generate_dataset(&synth_spec(cfg)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub miou: f64,
    pub fscore: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub steps: usize,
    /// Means over the epoch's steps.
    pub losses: LossReport,
    pub val: Option<EvalSummary>,
}

#[derive(Serialize)]
struct StepRecord<'a> {
    epoch: usize,
    step: usize,
    ids: &'a [String],
    losses: LossReport,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub checkpoint: PathBuf,
}

/// Everything a training run may touch. Ground truth is reachable only via
/// `train.ground_truth`, which supervised mode alone calls.
pub struct TrainInputs<'a> {
    pub train: &'a TrainingSet,
    pub pseudo: Option<&'a PseudoMaskSet>,
    pub val: &'a [SamplePair],
}

fn mask_target(
    cfg: &RunConfig,
    inputs: &TrainInputs,
    batch: &[usize],
) -> Result<Tensor> {
    let (h, w) = cfg.encoder.image_size;
    let mut planes = Vec::with_capacity(batch.len());
    for &i in batch {
        let id = inputs.train.id(i);
        let m = if cfg.mode == Mode::Supervised {
            inputs
                .train
                .ground_truth(i)
                .ok_or_else(|| Error::MissingGroundTruth(id.to_string()))?
        } else {
            inputs
                .pseudo
                .and_then(|p| p.get(id))
                .ok_or_else(|| Error::Config(format!("no pseudo mask for training sample {id}")))?
        };
        if (m.height, m.width) != (h, w) {
            return Err(Error::shape("mask target", (id, h, w), (id, m.height, m.width)));
        }
        planes.push(m.to_tensor().reshape(&[1, h, w]));
    }
    Ok(Tensor::stack(&planes))
}

fn append_line<T: Serialize>(path: &Path, record: &T) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(record)?).map_err(|e| Error::io(path, e))
}

/// Keeps log lines whose `epoch` is at most `upto`.
fn truncate_log(path: &Path, upto: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kept: Vec<&str> = text
        .lines()
        .filter(|l| {
            serde_json::from_str::<serde_json::Value>(l)
                .ok()
                .and_then(|v| v.get("epoch").and_then(|e| e.as_u64()))
                .is_some_and(|e| e as usize <= upto)
        })
        .collect();
    let mut out = kept.join("\n");
    if !out.is_empty() {
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Trains the segmentation network and writes a checkpoint plus logs into
/// `run_dir` after every epoch. With `resume`, continues from the checkpoint in
/// `run_dir` when one exists.
pub fn train(cfg: &RunConfig, inputs: &TrainInputs, run_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    if inputs.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if cfg.mode.uses_pseudo_masks() && inputs.pseudo.is_none() {
        return Err(Error::Config(format!("mode {:?} needs pseudo masks", cfg.mode)));
    }
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let ck_path = run_dir.join(CHECKPOINT_FILE);
    let epoch_log = run_dir.join(EPOCH_LOG);
    let step_log = run_dir.join(STEP_LOG);

    let resuming = resume && ck_path.exists();
    let mut model = if resuming {
        Model::from_run(cfg)?
    } else {
        initial_model(cfg, inputs.train)?
    };
    let mut opt = Adam::new(cfg.optimizer.clone(), &model.store);
    let mut start = 0;
    let mut history = Vec::new();
    if resuming {
        let ck = Checkpoint::load(&ck_path, &model.config_hash())?;
        ck.restore(&mut model.store)?;
        if let Some(state) = ck.adam.clone() {
            opt = Adam::from_state(cfg.optimizer.clone(), state);
        }
        start = ck.epoch;
        truncate_log(&epoch_log, start)?;
        truncate_log(&step_log, start)?;
        if epoch_log.exists() {
            history = read_epoch_log(&epoch_log)?;
        }
    } else {
        for p in [&epoch_log, &step_log] {
            if p.exists() {
                fs::remove_file(p).map_err(|e| Error::io(p, e))?;
            }
        }
    }

    let (h, w) = cfg.encoder.image_size;
    let (fb, ft) = cfg.encoder.spec_size;
    let n = inputs.train.len();
    let mut specs = Vec::with_capacity(n);
    for i in 0..n {
        check_image(inputs.train.image(i), (h, w))?;
        let s = compute_spectrogram(inputs.train.waveform(i), &cfg.audio)?;
        specs.push(s.to_tensor());
    }
    let min_batch = if cfg.mode.uses_contrastive() { 2 } else { 1 };

    for epoch in start..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut component_rng(cfg.seed, &format!("epoch{epoch}")));
        let mut sum = LossReport::default();
        let mut steps = 0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            if batch.len() < min_batch {
                continue;
            }
            let ids: Vec<String> = batch.iter().map(|&i| inputs.train.id(i).to_string()).collect();
            let spec_batch =
                Tensor::stack(&batch.iter().map(|&i| specs[i].clone()).collect::<Vec<_>>()).reshape(&[
                    batch.len(),
                    1,
                    fb,
                    ft,
                ]);
            let img_batch =
                Tensor::stack(&batch.iter().map(|&i| inputs.train.image(i).clone()).collect::<Vec<_>>());

            let mut g = Graph::new();
            let p = model.store.bind(&mut g);
            let sv = g.constant(spec_batch);
            let iv = g.constant(img_batch);
            let fwd = model.forward(&mut g, &p, sv, iv);
            let wts = cfg.loss.weights;
            let mut total: Option<Var> = None;
            let mut add = |g: &mut Graph, term: Var, weight: f64| {
                let t = g.scale(term, weight);
                total = Some(match total {
                    Some(acc) => g.add(acc, t),
                    None => t,
                });
            };
            let (mut l_a2v, mut l_v2a, mut l_pmr) = (0.0, 0.0, 0.0);
            if cfg.mode.uses_contrastive() {
                let feats = match cfg.loss.similarity_features {
                    SimilarityFeatures::PreFusion => &fwd.visual,
                    SimilarityFeatures::Fused => &fwd.fused,
                };
                let tau = cfg.loss.temperature;
                let a2v = contrastive_on_tape(&mut g, fwd.audio, feats, tau, Direction::AudioToVisual);
                let v2a = contrastive_on_tape(&mut g, fwd.audio, feats, tau, Direction::VisualToAudio);
                l_a2v = g.value(a2v).item();
                l_v2a = g.value(v2a).item();
                add(&mut g, a2v, wts.avf);
                add(&mut g, v2a, wts.avf);
            }
            if cfg.mode.uses_mask_loss() {
                let target = mask_target(cfg, inputs, batch)?;
                let bce = g.bce(fwd.mask, &target);
                l_pmr = g.value(bce).item();
                add(&mut g, bce, wts.pmr);
            }
            let report = LossReport::new(l_a2v, l_v2a, l_pmr, wts);
            if !report.is_finite() {
                let dump = run_dir.join(NONFINITE_DUMP);
                fs::write(
                    &dump,
                    serde_json::to_string_pretty(&serde_json::json!({
                        "epoch": epoch + 1,
                        "batch": step,
                        "sample_ids": ids,
                        "losses": report,
                    }))?,
                )
                .map_err(|e| Error::io(&dump, e))?;
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: step,
                    sample_ids: ids,
                });
            }
            let loss = total.expect("every mode has a loss term");
            let mut grads = g.backward(loss);
            let grads = p.gradients(&mut grads);
            opt.step(&mut model.store, &grads);

            append_line(
                &step_log,
                &StepRecord {
                    epoch: epoch + 1,
                    step,
                    ids: &ids,
                    losses: report,
                },
            )?;
            sum.l_a2v += report.l_a2v;
            sum.l_v2a += report.l_v2a;
            sum.l_avf += report.l_avf;
            sum.l_pmr += report.l_pmr;
            sum.total += report.total;
            steps += 1;
        }
        let k = steps.max(1) as f64;
        let losses = LossReport {
            l_a2v: sum.l_a2v / k,
            l_v2a: sum.l_v2a / k,
            l_avf: sum.l_avf / k,
            l_pmr: sum.l_pmr / k,
            total: sum.total / k,
        };
        let val = if cfg.eval_each_epoch && !inputs.val.is_empty() {
            let pred = ModelPredictor::new(&model, cfg.readout.resolve(cfg.mode));
            let r = evaluate(&pred, inputs.val, cfg.metrics.beta_sq, cfg.metrics.threshold, None)?;
            Some(EvalSummary {
                miou: r.miou,
                fscore: r.fscore,
            })
        } else {
            None
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            steps,
            losses,
            val,
        };
        log::info!(
            "epoch {}: loss {:.5} (avf {:.5}, pmr {:.5}){}",
            record.epoch,
            losses.total,
            losses.l_avf,
            losses.l_pmr,
            val.map(|v| format!(", val mIoU {:.4}", v.miou)).unwrap_or_default()
        );
        append_line(&epoch_log, &record)?;
        history.push(record);
        Checkpoint::capture(&model.store, model.config_hash(), epoch + 1, Some(opt.state().clone()))
            .save(&ck_path)?;
    }
    Ok(TrainOutcome {
        model,
        history,
        checkpoint: ck_path,
    })
}

/// Fresh model for `cfg` with the visual encoder pretrained on the instance
/// labels of `train` (no masks involved).
pub fn initial_model(cfg: &RunConfig, train: &TrainingSet) -> Result<Model> {
    let mut model = Model::from_run(cfg)?;
    if cfg.pretrain.epochs == 0 {
        return Ok(model);
    }
    let labels: Vec<usize> = (0..train.len())
        .map(|i| {
            train.class_id(i).ok_or_else(|| {
                Error::Config(format!(
                    "visual pretraining needs an instance label for {} (set pretrain.epochs = 0 to skip)",
                    train.id(i)
                ))
            })
        })
        .collect::<Result<_>>()?;
    let images: Vec<Tensor> = (0..train.len()).map(|i| train.image(i).clone()).collect();
    let losses = model.pretrain_visual(&images, &labels, &cfg.pretrain, cfg.seed)?;
    log::info!(
        "visual pretraining: loss {:.4} -> {:.4}",
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(model)
}

/// Rebuilds the model for `cfg` and loads parameters from `path`.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<(Model, usize, Option<AdamState>)> {
    let mut model = Model::from_run(cfg)?;
    let ck = Checkpoint::load(path, &model.config_hash())?;
    ck.restore(&mut model.store)?;
    Ok((model, ck.epoch, ck.adam))
}

/// Anything that maps a sample to a soft mask at the sample's resolution.
pub trait MaskPredictor {
    fn predict(&self, sample: &SamplePair) -> Result<SoftMask>;
}

pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub readout: Readout,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a Model, readout: Readout) -> Self {
        Self { model, readout }
    }
}

impl MaskPredictor for ModelPredictor<'_> {
    fn predict(&self, s: &SamplePair) -> Result<SoftMask> {
        self.model.readout(self.readout, &s.waveform, &s.image)
    }
}

/// Predict, binarize at `threshold`, score against ground truth. With
/// `out_dir`, writes `metrics.json` and per-sample soft (8-bit) and binary
/// (1-bit) PNGs under `masks/`.
pub fn evaluate(
    predictor: &dyn MaskPredictor,
    split: &[SamplePair],
    beta_sq: f64,
    threshold: f64,
    out_dir: Option<&Path>,
) -> Result<MetricsReport> {
    if split.is_empty() {
        return Err(Error::NoEvaluationPairs);
    }
    if let Some(s) = split.iter().find(|s| s.gt_mask.is_none()) {
        return Err(Error::MissingGroundTruth(s.id.clone()));
    }
    let mask_dir = out_dir.map(|d| d.join("masks"));
    if let Some(d) = &mask_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut items = Vec::with_capacity(split.len());
    for s in split {
        let gt = s.gt_mask.clone().expect("checked above");
        let soft = predictor.predict(s)?;
        let pred = binarize(&soft, threshold);
        if let Some(d) = &mask_dir {
            let stem = file_stem_for(&s.id);
            soft.write_png(&d.join(format!("{stem}_soft.png")))?;
            pred.write_png(&d.join(format!("{stem}_mask.png")))?;
        }
        items.push((s.id.clone(), pred, gt));
    }
    let report = MetricsReport::from_pairs(&items, beta_sq, threshold)?;
    if let Some(d) = out_dir {
        let p = d.join("metrics.json");
        fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(report)
}

/// Pseudo-mask phase: trains the activation model on the training images and
/// their instance labels (no masks involved), fits the saliency detector to its
/// background maps and refines a pseudo mask for each image.
pub fn build_pseudo_masks(cfg: &RunConfig, train_set: &TrainingSet) -> Result<(TrainedCcam, PseudoMaskSet)> {
    let images: Vec<Tensor> = (0..train_set.len()).map(|i| train_set.image(i).clone()).collect();
    let labels: Option<Vec<usize>> = (0..train_set.len()).map(|i| train_set.class_id(i)).collect();
    let ccam = train_ccam(&cfg.pseudomask, &images, labels.as_deref(), cfg.seed)?;
    let samples: Vec<(String, Tensor)> = (0..train_set.len())
        .map(|i| (train_set.id(i).to_string(), train_set.image(i).clone()))
        .collect();
    let detector = train_saliency_detector(&ccam, &images, cfg.seed)?;
    let provider: &dyn SaliencyProvider = match &detector {
        Some((d, losses)) => {
            log::info!("saliency detector: final loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
            d
        }
        None => &BackgroundActivation,
    };
    let masks = generate_pseudo_masks(&ccam, provider, &samples)?;
    Ok((ccam, masks))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub mode: Mode,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub test: MetricsReport,
}

/// Train on `data.train` and evaluate on `data.test`. Pseudo masks are built
/// when the mode needs them and none are passed in.
pub fn run_experiment(
    cfg: &RunConfig,
    data: &Dataset,
    pseudo: Option<&PseudoMaskSet>,
    run_dir: &Path,
) -> Result<ExperimentResult> {
    cfg.validate()?;
    let train_set = TrainingSet::new(data.train.clone());
    let built;
    let pseudo = match pseudo {
        Some(p) => Some(p),
        None if cfg.mode.uses_pseudo_masks() => {
            built = build_pseudo_masks(cfg, &train_set)?.1;
            Some(&built)
        }
        None => None,
    };
    let inputs = TrainInputs {
        train: &train_set,
        pseudo,
        val: &data.val,
    };
    let out = train(cfg, &inputs, run_dir, false)?;
    let pred = ModelPredictor::new(&out.model, cfg.readout.resolve(cfg.mode));
    let test = evaluate(
        &pred,
        &data.test,
        cfg.metrics.beta_sq,
        cfg.metrics.threshold,
        Some(&run_dir.join("eval")),
    )?;
    Ok(ExperimentResult {
        mode: cfg.mode,
        seed: cfg.seed,
        history: out.history,
        test,
    })
}

/// Scores a freshly initialized model with the given readout.
pub fn evaluate_untrained(cfg: &RunConfig, split: &[SamplePair], readout: Readout) -> Result<MetricsReport> {
    let model = Model::from_run(cfg)?;
    evaluate(
        &ModelPredictor::new(&model, readout),
        split,
        cfg.metrics.beta_sq,
        cfg.metrics.threshold,
        None,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    FusionStages,
    BatchSize,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fusion_stages" => Ok(Self::FusionStages),
            "batch_size" => Ok(Self::BatchSize),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?} (expected fusion_stages or batch_size)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::FusionStages => "fusion_stages",
            Self::BatchSize => "batch_size",
        }
    }

    pub fn default_values(self) -> Vec<usize> {
        match self {
            Self::FusionStages => vec![1, 2, 3, 4],
            Self::BatchSize => vec![8, 16, 32, 64, 128],
        }
    }

    pub fn apply(self, cfg: &RunConfig, value: usize) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Self::FusionStages => c.encoder.stages = value,
            Self::BatchSize => c.batch_size = value,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub miou: f64,
    pub fscore: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    /// Values rejected by configuration validation, with the reason.
    pub skipped: Vec<(usize, String)>,
    pub csv: PathBuf,
    pub plot: PathBuf,
}

/// One run per axis value with the shared seed, then a CSV and a line plot of
/// test mIoU and F-score against the axis.
pub fn sweep(
    cfg: &RunConfig,
    data: &Dataset,
    axis: SweepAxis,
    values: &[usize],
    pseudo: Option<&PseudoMaskSet>,
    out_dir: &Path,
) -> Result<SweepReport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let built;
    let pseudo = match pseudo {
        Some(p) => Some(p),
        None if cfg.mode.uses_pseudo_masks() => {
            built = build_pseudo_masks(cfg, &TrainingSet::new(data.train.clone()))?.1;
            Some(&built)
        }
        None => None,
    };
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for &v in values {
        let c = axis.apply(cfg, v);
        if let Err(e) = c.validate() {
            log::warn!("skipping {}={v}: {e}", axis.name());
            skipped.push((v, e.to_string()));
            continue;
        }
        let r = run_experiment(&c, data, pseudo, &out_dir.join(format!("{}_{v}", axis.name())))?;
        log::info!("{}={v}: test mIoU {:.4}, F {:.4}", axis.name(), r.test.miou, r.test.fscore);
        rows.push(SweepRow {
            value: v,
            miou: r.test.miou,
            fscore: r.test.fscore,
        });
    }
    let csv = out_dir.join(format!("sweep_{}.csv", axis.name()));
    let mut f = BufWriter::new(File::create(&csv).map_err(|e| Error::io(&csv, e))?);
    writeln!(f, "{},miou,fscore", axis.name()).map_err(|e| Error::io(&csv, e))?;
    for r in &rows {
        writeln!(f, "{},{},{}", r.value, r.miou, r.fscore).map_err(|e| Error::io(&csv, e))?;
    }
    f.flush().map_err(|e| Error::io(&csv, e))?;
    let plot = out_dir.join(format!("sweep_{}.svg", axis.name()));
    let pts = |g: fn(&SweepRow) -> f64| rows.iter().map(|r| (r.value as f64, g(r))).collect();
    line_plot(
        &plot,
        &format!("test metrics vs {}", axis.name()),
        axis.name(),
        &[
            Series {
                name: "mIoU".into(),
                points: pts(|r| r.miou),
            },
            Series {
                name: "F-score".into(),
                points: pts(|r| r.fscore),
            },
        ],
    )?;
    let report = SweepReport {
        axis,
        rows,
        skipped,
        csv,
        plot,
    };
    let p = out_dir.join(format!("sweep_{}.json", axis.name()));
    fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&p, e))?;
    Ok(report)
}

/// Parses `train_log.jsonl`; a malformed line is reported by number.
pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::CorruptLog {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Loss-vs-epoch and metric-vs-epoch plots plus the CSV they are drawn from.
pub fn plot_losses(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let log_path = run_dir.join(EPOCH_LOG);
    if !log_path.is_file() {
        return Err(Error::Layout {
            path: log_path,
            reason: "missing training log".into(),
        });
    }
    let records = read_epoch_log(&log_path)?;
    if records.is_empty() {
        return Err(Error::CorruptLog {
            path: log_path,
            line: 0,
            reason: "log has no epochs".into(),
        });
    }
    let csv = run_dir.join("loss_curve.csv");
    let mut text = String::from("epoch,total,l_a2v,l_v2a,l_avf,l_pmr,val_miou,val_fscore\n");
    for r in &records {
        let l = &r.losses;
        let (m, f) = r
            .val
            .map(|v| (v.miou.to_string(), v.fscore.to_string()))
            .unwrap_or_default();
        text.push_str(&format!(
            "{},{},{},{},{},{},{m},{f}\n",
            r.epoch, l.total, l.l_a2v, l.l_v2a, l.l_avf, l.l_pmr
        ));
    }
    fs::write(&csv, text).map_err(|e| Error::io(&csv, e))?;

    let series = |name: &str, g: &dyn Fn(&EpochRecord) -> Option<f64>| Series {
        name: name.into(),
        points: records
            .iter()
            .filter_map(|r| g(r).map(|v| (r.epoch as f64, v)))
            .collect(),
    };
    let loss_svg = run_dir.join("loss.svg");
    line_plot(
        &loss_svg,
        "training loss",
        "epoch",
        &[
            series("total", &|r| Some(r.losses.total)),
            series("L_avf", &|r| Some(r.losses.l_avf)),
            series("L_pmr", &|r| Some(r.losses.l_pmr)),
        ],
    )?;
    let mut out = vec![csv, loss_svg];
    if records.iter().any(|r| r.val.is_some()) {
        let metrics_svg = run_dir.join("metrics.svg");
        line_plot(
            &metrics_svg,
            "validation metrics",
            "epoch",
            &[
                series("mIoU", &|r| r.val.map(|v| v.miou)),
                series("F-score", &|r| r.val.map(|v| v.fscore)),
            ],
        )?;
        out.push(metrics_svg);
    }
    Ok(out)
}
