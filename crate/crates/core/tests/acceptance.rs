//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines show up in
//! `cargo test` output. `ACCEPTANCE_ONLY=2,7` restricts the run to the listed
//! criteria. Criteria listed in `NOT_GATING` are reported but do not fail the
//! process; the README explains why.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slideseg::experiment::{cmd_run, cmd_synth, ExperimentConfig, RunOutcome};
use slideseg::inference::{
    binarize, predict_raster, predict_slide_full, InferenceConfig, InferenceMode, TileGrid,
};
use slideseg::metrics::{fp_tissue_percentage, slide_dice, summarize, SlideMetrics};
use slideseg::objective::{bce_loss, bce_loss_grad, dice_loss, dice_loss_eps, dice_loss_grad};
use slideseg::patch_pipeline::{assign_label_cl1, assign_label_cl2, LabelCriterion};
use slideseg::segnet::{build_model, ArchitectureSpec};
use slideseg::slide_store::{BinaryMask, MaskRole, RgbRaster};
use slideseg::synthdata::DatasetIndex;
use slideseg::training::make_folds_from_ids;

const NOT_GATING: [u32; 1] = [6];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed < Duration::from_secs(limit_s)
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-12 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

// 1. Patch labels against fraction and count oracles.
fn c1_labels() -> Verdict {
    let t0 = Instant::now();
    let n = 256 * 256;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mask = vec![0u8; n];
    let mut mismatches = 0usize;
    let mut cases = 0usize;
    let check = |mask: &[u8]| {
        let count = mask.iter().filter(|&&v| v != 0).count();
        let cl1 = u8::from(count as f64 / n as f64 >= 0.51);
        let cl2 = u8::from(count >= 1);
        usize::from(assign_label_cl1(mask) != cl1) + usize::from(assign_label_cl2(mask) != cl2)
    };
    for k in [33_423usize, 33_424] {
        mask.fill(0);
        mask[..k].fill(1);
        mask.shuffle(&mut rng);
        mismatches += check(&mask);
        cases += 1;
    }
    for i in 0..10_000 {
        let k = match i % 4 {
            0 => rng.random_range(0..=n),
            1 => rng.random_range(33_400..=33_450),
            2 => rng.random_range(0..=3),
            _ => rng.random_range(n - 3..=n),
        };
        mask.fill(0);
        mask[..k].fill(1);
        mask.shuffle(&mut rng);
        mismatches += check(&mask);
        cases += 1;
    }
    let t = t0.elapsed();
    verdict(
        mismatches == 0 && within(t, 30),
        format!(
            "{cases} masks, {mismatches} mismatches, {:.1}s (< 30s)",
            t.as_secs_f64()
        ),
    )
}

// 2. Loss fixtures and finite-difference gradients.
fn c2_losses() -> Verdict {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let mut fixture = |name: &str, got: f64, want: f64| {
        if rel_err(got, want) > 1e-6 && (got - want).abs() > 1e-12 {
            failures.push(format!("{name}: {got} vs {want}"));
        }
    };
    let n = 65_536;
    let ones = vec![1.0; n];
    let zeros = vec![0.0; n];
    fixture("perfect", dice_loss(&ones, &ones).unwrap(), 0.0);
    fixture(
        "all wrong",
        dice_loss(&ones, &zeros).unwrap(),
        1.0 - 1.0 / 65_537.0,
    );
    fixture(
        "hand counts",
        dice_loss_eps(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 1.0, 0.0], 0.0).unwrap(),
        0.5,
    );
    fixture(
        "bce p=0.5 y=1",
        bce_loss(&[0.5], &[1.0]).unwrap(),
        std::f64::consts::LN_2,
    );
    fixture(
        "bce p=0.5 y=0",
        bce_loss(&[0.5], &[0.0]).unwrap(),
        std::f64::consts::LN_2,
    );
    fixture(
        "bce batch",
        bce_loss(&[0.9, 0.2], &[1.0, 0.0]).unwrap(),
        (-(0.9f64).ln() - (0.8f64).ln()) / 2.0,
    );
    let exact = bce_loss(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
    if !(exact > 0.0 && exact < 1e-6) {
        failures.push(format!("bce at p = y: {exact}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-4;
    let mut worst = 0f64;
    for _ in 0..25 {
        let pred: Vec<f64> = (0..64).map(|_| rng.random_range(0.05..0.95)).collect();
        let target: Vec<f64> = (0..64)
            .map(|_| f64::from(u8::from(rng.random_bool(0.4))))
            .collect();
        let (_, g_dice) = dice_loss_grad(&pred, &target).unwrap();
        let (_, g_bce) = bce_loss_grad(&pred, &target).unwrap();
        for i in 0..64 {
            let mut up = pred.clone();
            let mut down = pred.clone();
            up[i] += h;
            down[i] -= h;
            let fd_dice =
                (dice_loss(&up, &target).unwrap() - dice_loss(&down, &target).unwrap()) / (2.0 * h);
            let fd_bce =
                (bce_loss(&up, &target).unwrap() - bce_loss(&down, &target).unwrap()) / (2.0 * h);
            worst = worst
                .max(rel_err(g_dice[i], fd_dice))
                .max(rel_err(g_bce[i], fd_bce));
        }
    }
    if worst > 1e-3 {
        failures.push(format!("gradient relative error {worst:.2e}"));
    }
    let t = t0.elapsed();
    verdict(
        failures.is_empty() && within(t, 60),
        if failures.is_empty() {
            format!(
                "7 fixtures, 25 gradient instances, max rel err {worst:.1e}, {:.1}s",
                t.as_secs_f64()
            )
        } else {
            failures.join("; ")
        },
    )
}

fn tiny_spec(patch: usize, classifier: bool) -> ArchitectureSpec {
    ArchitectureSpec {
        input_px: patch,
        stage_widths: vec![4, 4, 6, 6, 8],
        decoder_widths: vec![6, 6, 4, 4, 4],
        classifier,
        init_gain: 1.0,
        ..ArchitectureSpec::default()
    }
}

fn random_raster(rng: &mut impl Rng, w: usize, h: usize) -> RgbRaster {
    let data = (0..w * h * 3).map(|_| rng.random::<u8>()).collect();
    RgbRaster::from_raw(w, h, data).unwrap()
}

// 3. Tile grids partition the slide; stitching ignores tile order.
fn c3_stitching() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = build_model(&tiny_spec(32, false), 3).unwrap();
    let cfg = InferenceConfig {
        batch_size: 5,
        ..InferenceConfig::new(InferenceMode::Single)
    };
    let mut bad_cover = 0;
    let mut bad_perm = 0;
    for i in 0..50 {
        let w = rng.random_range(1..=300);
        let h = rng.random_range(1..=300);
        let rescale = if i % 5 == 4 {
            rng.random_range(1.2..2.5)
        } else {
            1.0
        };
        let grid = TileGrid::new(0, rescale, (w, h), 32);
        let (ew, eh) = grid.extent;
        let mut hits = vec![0u8; ew * eh];
        for t in &grid.tiles {
            for y in t.origin.1..(t.origin.1 + t.size).min(eh) {
                for x in t.origin.0..(t.origin.0 + t.size).min(ew) {
                    hits[y * ew + x] += 1;
                }
            }
        }
        if hits.iter().any(|&c| c != 1) {
            bad_cover += 1;
        }
        let raster = random_raster(&mut rng, w, h);
        let base = predict_raster(&model, &raster, &grid, &cfg, None).unwrap();
        let mut order: Vec<usize> = (0..grid.tiles.len()).collect();
        order.shuffle(&mut rng);
        let shuffled = predict_raster(&model, &raster, &grid, &cfg, Some(&order)).unwrap();
        let same = base.raw.data.len() == shuffled.raw.data.len()
            && base
                .raw
                .data
                .iter()
                .zip(&shuffled.raw.data)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            bad_perm += 1;
        }
    }
    let t = t0.elapsed();
    verdict(
        bad_cover == 0 && bad_perm == 0 && within(t, 120),
        format!(
            "50 extents, {bad_cover} coverage failures, {bad_perm} order-dependent, {:.1}s (< 120s)",
            t.as_secs_f64()
        ),
    )
}

fn synth_dataset(
    dir: &Path,
    patients: usize,
    base_px: usize,
    positive_fraction: f64,
) -> ExperimentConfig {
    let cfg = ExperimentConfig {
        dataset_dir: dir.join("ds"),
        output_dir: dir.join("runs"),
        n_patients: patients,
        slides_per_patient: 2,
        positive_fraction,
        base_px,
        ..ExperimentConfig::default()
    };
    cmd_synth(&cfg).unwrap();
    cfg
}

fn median_of(values: &mut [f32]) -> f64 {
    values.sort_by(f32::total_cmp);
    values[values.len() / 2] as f64
}

// 4. Classifier masking only removes pixels and never adds false positives.
fn c4_masking() -> Verdict {
    let t0 = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = synth_dataset(tmp.path(), 5, 512, 0.8);
    let index = DatasetIndex::load(&cfg.dataset_dir).unwrap();
    let slides = index.open_all(&cfg.dataset_dir).unwrap();
    let model = build_model(&tiny_spec(32, true), 4).unwrap();
    let mut violations = 0;
    let mut masked_tiles = 0;
    let mut total_tiles = 0;
    let mut fp_pairs = Vec::new();
    for slide in &slides {
        // Thresholds at the medians of this slide's outputs, so both masks
        // and tile decisions are mixed under random weights.
        let probe = predict_slide_full(
            &model,
            slide,
            7.78,
            &InferenceConfig::new(InferenceMode::Multitask),
        )
        .unwrap();
        let seg_thr = median_of(&mut probe.raw.data.clone());
        let cls_thr = median_of(&mut probe.tile_cls.clone().unwrap());
        let icfg = InferenceConfig {
            cls_threshold: cls_thr,
            ..InferenceConfig::new(InferenceMode::Multitask)
        };
        let pred = predict_slide_full(&model, slide, 7.78, &icfg).unwrap();
        let single = binarize(&pred.raw, seg_thr);
        let multi = binarize(pred.masked.as_ref().unwrap(), seg_thr);
        let cls = pred.tile_cls.as_ref().unwrap();
        masked_tiles += cls.iter().filter(|&&c| (c as f64) < cls_thr).count();
        total_tiles += cls.len();
        let tissue = slide.load_mask(MaskRole::Tissue, pred.raw.level).unwrap();
        let fp_single = fp_tissue_percentage(&single, &tissue).unwrap();
        let fp_multi = fp_tissue_percentage(&multi, &tissue).unwrap();
        if !multi.is_subset_of(&single) || fp_multi > fp_single {
            violations += 1;
        }
        fp_pairs.push((fp_single, fp_multi));
    }
    let mean =
        |f: fn(&(f64, f64)) -> f64| fp_pairs.iter().map(f).sum::<f64>() / fp_pairs.len() as f64;
    let t = t0.elapsed();
    verdict(
        violations == 0 && masked_tiles > 0 && within(t, 300),
        format!(
            "{} slides, {masked_tiles}/{total_tiles} tiles masked, {violations} violations, \
             mean FP% {:.2} -> {:.2}, {:.1}s (< 300s)",
            slides.len(),
            mean(|p| p.0),
            mean(|p| p.1),
            t.as_secs_f64()
        ),
    )
}

/// CPU-scaled desk configuration: 10 patients × 2 slides (one negative
/// patient), 2048 px base so 15.56 µm is a 512 px level, 64 px patches.
fn desk_config(root: &Path) -> ExperimentConfig {
    let mut cfg = synth_dataset(root, 10, 2048, 0.9);
    cfg.resolution_um = 15.56;
    cfg.epochs = 5;
    cfg.steps_per_epoch = 100;
    cfg.batch_size = 16;
    cfg.learning_rate = 1e-5;
    cfg.patch_px = 64;
    cfg.validate_each_epoch = false;
    cfg
}

fn fold_positive_medians(out: &RunOutcome) -> Vec<f64> {
    (0..out.folds.k)
        .map(|f| {
            let per: Vec<SlideMetrics> = out
                .rows
                .iter()
                .filter(|r| r.fold == f)
                .map(|r| r.metrics.clone())
                .collect();
            summarize(&per).unwrap().median_dice_pos.unwrap_or(f64::NAN)
        })
        .collect()
}

struct DeskRuns {
    single: RunOutcome,
    single_time: Duration,
    multi: Option<(RunOutcome, Duration)>,
}

fn desk_runs(want_multi: bool) -> DeskRuns {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = desk_config(tmp.path());
    cfg.run_id = "single".into();
    let t0 = Instant::now();
    let single = cmd_run(&cfg).unwrap();
    let single_time = t0.elapsed();
    let multi = want_multi.then(|| {
        cfg.run_id = "seg_cl1".into();
        cfg.mode = InferenceMode::Multitask;
        cfg.label_criterion = Some(LabelCriterion::Cl1);
        let t0 = Instant::now();
        let out = cmd_run(&cfg).unwrap();
        (out, t0.elapsed())
    });
    DeskRuns {
        single,
        single_time,
        multi,
    }
}

// 5. Single-task learning on the desk dataset.
fn c5_learning(runs: &DeskRuns) -> Verdict {
    let medians = fold_positive_medians(&runs.single);
    let good = medians.iter().filter(|&&m| m >= 0.80).count();
    let t = runs.single_time;
    verdict(
        good >= 4 && within(t, 30 * 60),
        format!(
            "positive median Dice per fold {:?}, {good}/5 ≥ 0.80, {:.0}s (< 1800s)",
            medians
                .iter()
                .map(|m| (m * 1000.0).round() / 1000.0)
                .collect::<Vec<_>>(),
            t.as_secs_f64()
        ),
    )
}

// 6. Multitask CL1 against single-task on the same budget.
fn c6_multitask(runs: &DeskRuns) -> Verdict {
    let (multi, t) = runs.multi.as_ref().expect("multitask run");
    let s = &runs.single.summary.summary;
    let m = &multi.summary.summary;
    let fp_s = s.fp_pct_mean.unwrap_or(f64::NAN);
    let fp_m = m.fp_pct_mean.unwrap_or(f64::NAN);
    let dice_ok = m.median_dice_all >= s.median_dice_all - 0.02;
    let fp_ok = fp_m < fp_s;
    verdict(
        dice_ok && fp_ok,
        format!(
            "median Dice single {:.3} vs multitask {:.3} ({}); mean FP% single {:.3} vs multitask {:.3} ({}); \
             positive median Dice {:.3} vs {:.3}; {:.0}s",
            s.median_dice_all,
            m.median_dice_all,
            if dice_ok { "ok" } else { "drop > 0.02" },
            fp_s,
            fp_m,
            if fp_ok { "lower" } else { "not strictly lower" },
            s.median_dice_pos.unwrap_or(f64::NAN),
            m.median_dice_pos.unwrap_or(f64::NAN),
            t.as_secs_f64()
        ),
    )
}

fn metric(dice: f64, positive: bool) -> SlideMetrics {
    SlideMetrics {
        slide_id: String::new(),
        dice,
        gt_positive: positive,
        pred_positive: dice > 0.0,
        fp_tissue_pct: None,
    }
}

// 7. Dice conventions and summary statistics.
fn c7_metrics() -> Verdict {
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let mask = |on: &[usize]| {
        let mut m = BinaryMask::zeros(0, 4, 4, MaskRole::Prediction);
        for &i in on {
            m.set(i % 4, i / 4, true);
        }
        m
    };
    let cases = [
        ("empty gt, nonempty pred", mask(&[1, 2]), mask(&[]), 0.0),
        ("nonempty gt, empty pred", mask(&[]), mask(&[3]), 0.0),
        ("empty, empty", mask(&[]), mask(&[]), 1.0),
        ("half overlap", mask(&[0, 1]), mask(&[1, 2]), 0.5),
    ];
    for (name, pred, gt, want) in cases {
        let got = slide_dice(&pred, &gt).unwrap().dice;
        if got != want {
            failures.push(format!("{name}: {got}"));
        }
    }
    // (values, median, iqr), hand computed with interpolated quartiles at
    // position q·(n−1).
    let fixtures: [(&[f64], f64, f64); 5] = [
        (&[0.5], 0.5, 0.0),
        (&[0.25, 0.5, 0.75, 1.0], 0.625, 0.375),
        (&[1.0, 0.0, 0.5, 0.25, 0.75], 0.5, 0.5),
        (&[0.0, 0.0, 1.0, 1.0, 1.0, 1.0], 1.0, 0.75),
        (&[0.125, 0.875, 0.5], 0.5, 0.375),
    ];
    for (i, (values, median, iqr)) in fixtures.iter().enumerate() {
        let per: Vec<SlideMetrics> = values.iter().map(|&d| metric(d, true)).collect();
        let s = summarize(&per).unwrap();
        if s.median_dice_all != *median || s.iqr_all != *iqr || s.median_dice_pos != Some(*median) {
            failures.push(format!(
                "fixture {i}: median {} iqr {}",
                s.median_dice_all, s.iqr_all
            ));
        }
    }
    let t = t0.elapsed();
    verdict(
        failures.is_empty() && within(t, 10),
        if failures.is_empty() {
            format!(
                "4 Dice conventions, 5 summary fixtures exact, {:.2}s",
                t.as_secs_f64()
            )
        } else {
            failures.join("; ")
        },
    )
}

// 8. Two identical runs agree on folds, fingerprints and metrics.
fn c8_determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = synth_dataset(tmp.path(), 5, 512, 0.8);
    cfg.seed = 8;
    cfg.epochs = 2;
    cfg.steps_per_epoch = 5;
    cfg.batch_size = 4;
    cfg.patch_px = 32;
    cfg.resolution_um = 7.78;
    let mut files = Vec::new();
    for run in ["a", "b"] {
        cfg.run_id = run.into();
        let out = cmd_run(&cfg).unwrap();
        let read = |name: &str| std::fs::read(out.run_dir.join(name)).unwrap();
        files.push((
            read("folds.json"),
            read("fingerprints.json"),
            read("metrics.csv"),
        ));
    }
    let (a, b) = (&files[0], &files[1]);
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2];
    verdict(
        same.iter().all(|&s| s),
        format!(
            "folds {} fingerprints {} metrics {}",
            same[0], same[1], same[2]
        ),
    )
}

// 9. Fold fractions on a 29 × 2 cohort.
fn c9_folds() -> Verdict {
    let slides: Vec<(String, String)> = (0..58)
        .map(|i| (format!("slide_{i:03}"), format!("patient_{:03}", i / 2)))
        .collect();
    let m = make_folds_from_ids(&slides, 5, 0).unwrap();
    let mut fractions = Vec::new();
    let mut disjoint = true;
    let mut covered = BTreeSet::new();
    for f in &m.folds {
        let val: BTreeSet<&str> = f.val_slide_ids.iter().map(String::as_str).collect();
        let val_patients: BTreeSet<String> = f
            .val_slide_ids
            .iter()
            .map(|s| patient_of(&slides, s))
            .collect();
        let train_patients: BTreeSet<String> = f
            .train_slide_ids
            .iter()
            .map(|s| patient_of(&slides, s))
            .collect();
        disjoint &= val_patients.is_disjoint(&train_patients);
        disjoint &= f.train_slide_ids.iter().all(|s| !val.contains(s.as_str()));
        covered.extend(val.iter().map(|s| s.to_string()));
        fractions.push(f.val_slide_ids.len() as f64 / slides.len() as f64);
    }
    let in_range = fractions.iter().all(|&f| (0.17..=0.24).contains(&f));
    verdict(
        disjoint && in_range && covered.len() == slides.len(),
        format!(
            "validation fractions {:?}, patient-disjoint {disjoint}, every slide validated once {}",
            fractions
                .iter()
                .map(|f| (f * 1000.0).round() / 1000.0)
                .collect::<Vec<_>>(),
            covered.len() == slides.len()
        ),
    )
}

fn patient_of(slides: &[(String, String)], id: &str) -> String {
    slides.iter().find(|(s, _)| s == id).unwrap().1.clone()
}

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |c: u32| only.as_ref().is_none_or(|o| o.contains(&c));
    // `cargo test -- --list` and similar harness probes.
    if std::env::args().any(|a| a == "--list") {
        return;
    }

    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut run = |n: u32, name: &'static str, f: &dyn Fn() -> Verdict| {
        if wanted(n) {
            let v = f();
            report(n, name, &v);
            results.push((n, name, v));
        }
    };
    run(1, "label exactness", &c1_labels);
    run(2, "loss oracles", &c2_losses);
    run(3, "stitching partition", &c3_stitching);
    run(4, "masking monotonicity", &c4_masking);
    run(7, "metric conventions", &c7_metrics);
    run(8, "determinism", &c8_determinism);
    run(9, "fold protocol", &c9_folds);
    if wanted(5) || wanted(6) {
        let runs = desk_runs(wanted(6));
        run(5, "desk-scale learning", &|| c5_learning(&runs));
        if wanted(6) {
            run(6, "multitask direction", &|| c6_multitask(&runs));
        }
    }

    let gating_failures: Vec<u32> = results
        .iter()
        .filter(|(n, _, v)| !v.pass && !NOT_GATING.contains(n))
        .map(|(n, _, _)| *n)
        .collect();
    let passed = results.iter().filter(|(_, _, v)| v.pass).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
    if !gating_failures.is_empty() {
        println!("acceptance: failing criteria {gating_failures:?}");
        std::process::exit(1);
    }
}

fn report(n: u32, name: &str, v: &Verdict) {
    let status = match (v.pass, NOT_GATING.contains(&n)) {
        (true, _) => "PASS",
        (false, false) => "FAIL",
        (false, true) => "FAIL (reported, not gating)",
    };
    println!("criterion {n} [{name}]: {status}: {}", v.detail);
}
