//! Acceptance criteria, one test each. Every test prints a single
//! `[PASS]` / `[FAIL]` line before asserting; run with `--nocapture` to see them.
//!
//! The training criteria use the toy profile on one shared data split with
//! model seeds 0, 1 and 2 and compare medians.

mod common;

use std::sync::OnceLock;
use std::time::Instant;

use avseg::data::{Dataset, TrainingSet};
use avseg::encoders::{GlobalAudioEmbedding, MultiScaleVisualFeatures};
use avseg::fusion::{max_pooled_similarity, Fusion, FusionConfig};
use avseg::losses::{loss_avf, BatchEmbeddings};
use avseg::mask::BinaryMask;
use avseg::metrics::{f_score, iou};
use avseg::nn::ParamStore;
use avseg::pipeline::{build_pseudo_masks, evaluate_untrained, load_data, run_experiment, train, TrainInputs};
use avseg::pseudomask::{refine_pseudo_mask, ClassAgnosticMap, PseudoMaskSet, SaliencyMap};
use avseg::tensor::Tensor;
use avseg::RunConfig;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

fn report(name: &str, pass: bool, detail: String) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

fn toy(seed: u64, extra: &[&str]) -> RunConfig {
    let mut o = vec![format!("seed={seed}")];
    o.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::load(None, Some("toy"), &o).unwrap()
}

#[test]
fn closed_form_uninformative_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for b in [2usize, 4, 8] {
        for s in [1usize, 4] {
            // Identical pairs across the batch make every similarity equal.
            let a = rand_tensor(&mut rng, &[5]);
            let audio = Tensor::stack(&vec![a; b]);
            let visual = (0..s)
                .map(|k| {
                    let v = rand_tensor(&mut rng, &[5, 4 >> k.min(2), 4 >> k.min(2)]);
                    Tensor::stack(&vec![v; b])
                })
                .collect();
            let batch = BatchEmbeddings {
                audio,
                visual,
                temperature: 0.07,
            };
            let want = 2.0 * s as f64 * (b as f64).ln();
            worst = worst.max((loss_avf(&batch).unwrap() - want).abs());
        }
    }
    report(
        "closed-form loss 2*S*log(B), B in {2,4,8}, S in {1,4}",
        worst < 1e-6,
        format!("max |error| {worst:.2e}"),
    );
}

#[test]
fn gradient_suites_match_finite_differences() {
    let t = Instant::now();
    let mut worst = Vec::new();
    for kind in GRADIENT_SUITES {
        let w = (0..20).map(|i| gradient_instance(kind, 5000 + i)).fold(0.0, f64::max);
        worst.push(format!("{kind} {w:.1e}"));
        if w >= 1e-3 {
            return report("gradient FD suites", false, format!("{kind} worst relative error {w:.2e}"));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    report(
        "gradient FD suites (5 x 20 instances, rel < 1e-3, < 2 min)",
        secs < 120.0,
        format!("{} in {secs:.1}s", worst.join(", ")),
    );
}

#[test]
fn refinement_equals_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0;
    for i in 0..1000 {
        let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(1..7), rng.gen_range(1..7));
        // Every other input on a coarse grid so ties occur.
        let val = |r: &mut ChaCha8Rng| {
            if i % 2 == 0 {
                f64::from(r.gen_range(0..5u8)) / 4.0
            } else {
                r.gen_range(0.0..1.0)
            }
        };
        let s = Tensor::from_fn(&[1, h, w], |_| val(&mut rng));
        let a = Tensor::from_fn(&[c, h, w], |_| val(&mut rng));
        let invert = rng.gen_bool(0.5);
        let got = refine_pseudo_mask(
            &SaliencyMap::new(s.clone()).unwrap(),
            &ClassAgnosticMap::new(a.clone()).unwrap(),
            invert,
        )
        .unwrap();
        if got.values() != refine_oracle(&s, &a, invert).as_slice() {
            bad += 1;
        }
    }
    report(
        "refine_pseudo_mask equals brute force (1000 inputs, exact)",
        bad == 0,
        format!("{bad} mismatches"),
    );
}

#[test]
fn max_pooled_similarity_matches_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let d = rng.gen_range(1..8);
        let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let v = rand_tensor(&mut rng, &[d, h, w]);
        let a = rand_tensor(&mut rng, &[d]);
        let got = max_pooled_similarity(&GlobalAudioEmbedding::new(a.data().to_vec()), &v).unwrap();
        worst = worst.max((got - max_sim_oracle(a.data(), &v)).abs());
    }
    report(
        "max_pooled_similarity matches exhaustive loop (1000 instances)",
        worst < 1e-6,
        format!("max |error| {worst:.2e}"),
    );
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut empties = 0;
    for i in 0..1000 {
        let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let mut pick = |rng: &mut ChaCha8Rng, k: usize| match k {
            0 => {
                empties += 1;
                BinaryMask::zeros(h, w)
            }
            _ => {
                let p = rng.gen_range(0.05..0.95);
                rand_mask(rng, h, w, p)
            }
        };
        let pred = pick(&mut rng, i % 7);
        let gt = pick(&mut rng, i % 5);
        let beta_sq = if i % 2 == 0 { 0.3 } else { rng.gen_range(0.1..2.0) };
        worst = worst
            .max((iou(&pred, &gt).unwrap() - iou_oracle(&pred, &gt)).abs())
            .max((f_score(&pred, &gt, beta_sq).unwrap() - f_oracle(&pred, &gt, beta_sq)).abs());
    }
    let e = BinaryMask::zeros(3, 3);
    let full = BinaryMask::from_fn(3, 3, |_, _| true);
    let conventions = iou(&e, &e).unwrap() == 1.0
        && f_score(&e, &e, 0.3).unwrap() == 1.0
        && iou(&e, &full).unwrap() == 0.0
        && f_score(&e, &full, 0.3).unwrap() == 0.0;
    report(
        "iou and f_score match brute force (1000 pairs, empty conventions)",
        worst < 1e-12 && conventions,
        format!("max |error| {worst:.1e}, {empties} empty masks, conventions hold: {conventions}"),
    );
}

#[test]
fn zero_mu_fusion_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let (d, stages) = (rng.gen_range(1..9), rng.gen_range(1..5));
        let mut store = ParamStore::new();
        let cfg = FusionConfig {
            bias: i % 2 == 0,
            zero_init_mu: true,
        };
        let fusion = Fusion::new(&cfg, d, stages, &mut store, &mut rng);
        let v = MultiScaleVisualFeatures::new(
            (0..stages).map(|s| rand_tensor(&mut rng, &[d, 16 >> s, 16 >> s])).collect(),
        )
        .unwrap();
        let a = GlobalAudioEmbedding::new(rand_tensor(&mut rng, &[d]).data().to_vec());
        let z = fusion.fuse_all(&store, &v, &a).unwrap();
        for (zs, vs) in z.stages.iter().zip(&v.stages) {
            for (p, q) in zs.data().iter().zip(vs.data()) {
                worst = worst.max((p - q).abs());
            }
        }
    }
    report(
        "zero-mu fuse_all is the identity",
        worst < 1e-7,
        format!("max |drift| {worst:.1e} over 200 configurations"),
    );
}

/// Test mIoU of every ablation arm per seed, plus the single-stage variant.
struct Ablation {
    full: Vec<f64>,
    pmr_only: Vec<f64>,
    avf_only: Vec<f64>,
    baseline: Vec<f64>,
    single_stage: Vec<f64>,
}

fn ablation() -> &'static Ablation {
    static CELL: OnceLock<Ablation> = OnceLock::new();
    CELL.get_or_init(|| {
        let data = load_data(&toy(0, &[])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut r = Ablation {
            full: vec![],
            pmr_only: vec![],
            avf_only: vec![],
            baseline: vec![],
            single_stage: vec![],
        };
        let run = |cfg: &RunConfig, pseudo: Option<&PseudoMaskSet>, name: &str| {
            let out = run_experiment(cfg, &data, pseudo, &dir.path().join(name)).unwrap();
            out.test.miou
        };
        for seed in SEEDS {
            let cfg = toy(seed, &[]);
            let (_, pseudo) = build_pseudo_masks(&cfg, &TrainingSet::new(data.train.clone())).unwrap();
            r.full.push(run(&toy(seed, &["mode=weak"]), Some(&pseudo), "full"));
            r.pmr_only.push(run(&toy(seed, &["mode=pmr_only"]), Some(&pseudo), "pmr"));
            r.avf_only.push(run(&toy(seed, &["mode=avf_only"]), None, "avf"));
            r.single_stage.push(run(&toy(seed, &["mode=weak", "encoder.stages=1"]), Some(&pseudo), "s1"));
            let base = toy(seed, &["mode=avf_only"]);
            r.baseline.push(evaluate_untrained(&base, &data.test, base.readout.resolve(base.mode)).unwrap().miou);
        }
        r
    })
}

fn fmt(v: &[f64]) -> String {
    format!("{:.3} (seeds {:.3?})", median(v), v)
}

#[test]
fn learnability_beats_chance() {
    let a = ablation();
    let (m, chance) = (median(&a.full), median(&a.baseline));
    report(
        "learnability: toy test mIoU >= 0.50 above untrained chance",
        m >= 0.50 && m > chance,
        format!("weak {}, untrained {}", fmt(&a.full), fmt(&a.baseline)),
    );
}

#[test]
fn ablation_ordering() {
    let a = ablation();
    let (f, p, v, b) = (median(&a.full), median(&a.pmr_only), median(&a.avf_only), median(&a.baseline));
    report(
        "ablation medians: full >= PMR-only >= baseline, full >= AVF-only >= baseline",
        f >= p && p >= b && f >= v && v >= b,
        format!(
            "full {}, PMR-only {}, AVF-only {}, baseline {}",
            fmt(&a.full),
            fmt(&a.pmr_only),
            fmt(&a.avf_only),
            fmt(&a.baseline)
        ),
    );
}

#[test]
fn four_stages_at_least_one() {
    let a = ablation();
    report(
        "median mIoU with S=4 >= S=1",
        median(&a.full) >= median(&a.single_stage),
        format!("S=4 {}, S=1 {}", fmt(&a.full), fmt(&a.single_stage)),
    );
}

const SHORT: [&str; 2] = ["mode=weak", "epochs=6"];

fn weak_run(data: &Dataset, pseudo: &PseudoMaskSet, cfg: &RunConfig, dir: &std::path::Path, resume: bool) -> (ParamStore, Vec<f64>, usize) {
    let train_set = TrainingSet::new(data.train.clone());
    let inputs = TrainInputs {
        train: &train_set,
        pseudo: Some(pseudo),
        val: &data.val,
    };
    let out = train(cfg, &inputs, dir, resume).unwrap();
    let losses = out.history.iter().map(|r| r.losses.total).collect();
    (out.model.store, losses, train_set.gt_reads())
}

fn max_param_diff(a: &ParamStore, b: &ParamStore) -> f64 {
    assert_eq!(a.shapes(), b.shapes());
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, x), (_, y))| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max)
}

#[test]
fn weak_training_reads_no_ground_truth() {
    let cfg = toy(0, &SHORT);
    let data = load_data(&cfg).unwrap();
    let train_set = TrainingSet::new(data.train.clone());
    let (_, pseudo) = build_pseudo_masks(&cfg, &train_set).unwrap();
    let pm_reads = train_set.gt_reads();
    let dir = tempfile::tempdir().unwrap();
    let (_, _, reads) = weak_run(&data, &pseudo, &cfg, dir.path(), false);
    report(
        "zero ground-truth reads during weak training",
        pm_reads == 0 && reads == 0,
        format!("{pm_reads} reads building pseudo masks, {reads} reads training"),
    );
}

#[test]
fn determinism_and_resume() {
    let cfg = toy(0, &SHORT);
    let data = load_data(&cfg).unwrap();
    let (_, p1) = build_pseudo_masks(&cfg, &TrainingSet::new(data.train.clone())).unwrap();
    let (_, p2) = build_pseudo_masks(&cfg, &TrainingSet::new(data.train.clone())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, la, _) = weak_run(&data, &p1, &cfg, &dir.path().join("a"), false);
    let (b, lb, _) = weak_run(&data, &p2, &cfg, &dir.path().join("b"), false);
    let repeat = max_param_diff(&a, &b)
        .max(la.iter().zip(&lb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));

    let half = toy(0, &[SHORT[0], "epochs=3"]);
    let resumed_dir = dir.path().join("c");
    weak_run(&data, &p1, &half, &resumed_dir, false);
    let (c, lc, _) = weak_run(&data, &p1, &cfg, &resumed_dir, true);
    let resume = max_param_diff(&a, &c)
        .max(la.iter().zip(&lc).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    report(
        "determinism (repeat within 1e-6) and resume equivalence (within 1e-5)",
        p1 == p2 && repeat <= 1e-6 && resume <= 1e-5 && lc.len() == la.len(),
        format!(
            "pseudo masks identical: {}, repeat max diff {repeat:.1e}, resume max diff {resume:.1e}",
            p1 == p2
        ),
    );
}
