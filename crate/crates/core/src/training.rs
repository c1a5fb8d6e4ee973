//! Patient-disjoint k-fold splits and the per-fold training loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::inference::{
    binarize, predict_slide_full, InferenceConfig, InferenceMode, DEFAULT_THRESHOLD,
};
use crate::metrics::{median, slide_dice};
use crate::objective::{bce_loss_grad, dice_loss_grad, LossReport};
use crate::patch_pipeline::{
    AugmentationConfig, LabelCriterion, PatchSample, PatchSampler, SamplerConfig, SamplingSource,
};
use crate::segnet::layers::Param;
use crate::segnet::{
    build_model, fingerprint_of, save_checkpoint, ArchitectureSpec, ModelBundle, Tensor,
};
use crate::slide_store::SlidePyramid;

/// Independent 64-bit seed for a named stream under a root seed.
pub fn derive_seed(root: u64, stream: &str, index: u64) -> u64 {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(format!("{root}/{stream}/{index}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldEntry {
    pub fold_id: usize,
    pub train_slide_ids: Vec<String>,
    pub val_slide_ids: Vec<String>,
    pub val_patient_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldManifest {
    pub k: usize,
    pub seed: u64,
    pub dataset_hash: String,
    pub folds: Vec<FoldEntry>,
}

impl FoldManifest {
    pub fn fold(&self, fold_id: usize) -> Result<&FoldEntry> {
        self.folds
            .iter()
            .find(|f| f.fold_id == fold_id)
            .ok_or_else(|| Error::InvalidConfig(format!("no fold {fold_id} in manifest")))
    }
}

/// `(slide_id, patient_id)` pairs; the hash covers ids only.
pub fn dataset_hash(slides: &[(String, String)]) -> String {
    let mut lines: Vec<String> = slides.iter().map(|(s, p)| format!("{s}\t{p}\n")).collect();
    lines.sort();
    fsio::sha256_hex(lines.concat().as_bytes())
}

pub fn make_folds(slides: &[SlidePyramid], k: usize, seed: u64) -> Result<FoldManifest> {
    let refs: Vec<(String, String)> = slides
        .iter()
        .map(|s| (s.slide_id.clone(), s.patient_id.clone()))
        .collect();
    make_folds_from_ids(&refs, k, seed)
}

/// Shuffles patients with `seed`, then hands each patient (largest first,
/// ties in shuffled order) to the group with the fewest slides so far.
pub fn make_folds_from_ids(
    slides: &[(String, String)],
    k: usize,
    seed: u64,
) -> Result<FoldManifest> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("k = {k}; need k ≥ 2")));
    }
    let mut by_patient: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for (s, p) in slides {
        if !seen.insert(s.as_str()) {
            return Err(Error::InvalidConfig(format!("duplicate slide id {s}")));
        }
        by_patient.entry(p.as_str()).or_default().push(s.as_str());
    }
    if by_patient.len() < k {
        return Err(Error::NotEnoughPatients {
            patients: by_patient.len(),
            k,
        });
    }
    let mut patients: Vec<(&str, Vec<&str>)> = by_patient.into_iter().collect();
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    patients.sort_by_key(|(_, s)| std::cmp::Reverse(s.len()));
    let mut groups: Vec<(Vec<&str>, Vec<&str>)> = vec![(Vec::new(), Vec::new()); k];
    for (patient, slide_ids) in patients {
        let g = (0..k).min_by_key(|&g| (groups[g].1.len(), g)).unwrap();
        groups[g].0.push(patient);
        groups[g].1.extend(slide_ids);
    }
    let all: BTreeSet<&str> = slides.iter().map(|(s, _)| s.as_str()).collect();
    let folds = groups
        .into_iter()
        .enumerate()
        .map(|(fold_id, (patients, val))| {
            let val: BTreeSet<&str> = val.into_iter().collect();
            let mut pats: Vec<String> = patients.into_iter().map(String::from).collect();
            pats.sort();
            FoldEntry {
                fold_id,
                train_slide_ids: all.difference(&val).map(|s| s.to_string()).collect(),
                val_slide_ids: val.into_iter().map(String::from).collect(),
                val_patient_ids: pats,
            }
        })
        .collect();
    Ok(FoldManifest {
        k,
        seed,
        dataset_hash: dataset_hash(slides),
        folds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moment buffers follow parameter order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed");
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step = (c.learning_rate * bc2.sqrt() / bc1) as f32;
        let eps = (c.eps * bc2.sqrt()) as f32;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                p.value[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub resolution_um: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub multitask: bool,
    pub label_criterion: Option<LabelCriterion>,
    pub cls_loss_weight: f64,
    pub seed: u64,
    pub patch_px: usize,
    pub class_balance: f64,
    pub augmentations: AugmentationConfig,
    pub workers: usize,
    /// `input_px` and `classifier` are taken from `patch_px` and `multitask`.
    pub architecture: ArchitectureSpec,
    pub validate_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            resolution_um: 15.56,
            epochs: 30,
            steps_per_epoch: 250,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            multitask: false,
            label_criterion: None,
            cls_loss_weight: 1.0,
            seed: 0,
            patch_px: 256,
            class_balance: 0.5,
            augmentations: AugmentationConfig::default(),
            workers: 1,
            architecture: ArchitectureSpec::default(),
            validate_each_epoch: true,
        }
    }
}

impl TrainConfig {
    /// Single-task schedule: 30 epochs at the given resolution.
    pub fn reference_single_task(resolution_um: f64) -> Self {
        Self {
            resolution_um,
            ..Self::default()
        }
    }

    /// Multi-task schedule: 100 epochs at 15.56 µm.
    pub fn reference_multitask(criterion: LabelCriterion) -> Self {
        Self {
            resolution_um: 15.56,
            epochs: 100,
            multitask: true,
            label_criterion: Some(criterion),
            ..Self::default()
        }
    }

    pub fn mode(&self) -> InferenceMode {
        if self.multitask {
            InferenceMode::Multitask
        } else {
            InferenceMode::Single
        }
    }

    pub fn effective_architecture(&self) -> ArchitectureSpec {
        ArchitectureSpec {
            input_px: self.patch_px,
            classifier: self.multitask,
            ..self.architecture.clone()
        }
    }

    pub fn sampler_config(&self, fold_id: usize) -> SamplerConfig {
        SamplerConfig {
            target_um: self.resolution_um,
            patch_px: self.patch_px,
            class_balance: self.class_balance,
            label_criterion: self.label_criterion.unwrap_or(LabelCriterion::Cl1),
            augmentations: self.augmentations.clone(),
            seed: derive_seed(self.seed, "sampler", fold_id as u64),
            workers: self.workers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs ≥ 1");
        }
        if self.steps_per_epoch < 1 {
            return bad("steps_per_epoch ≥ 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size ≥ 1");
        }
        if self.multitask && self.label_criterion.is_none() {
            return bad("multitask training needs a label_criterion");
        }
        if !(self.resolution_um.is_finite() && self.resolution_um > 0.0) {
            return bad("resolution_um must be positive");
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0
            && (0.0..1.0).contains(&o.beta1)
            && (0.0..1.0).contains(&o.beta2)
            && o.eps > 0.0)
        {
            return bad("invalid Adam settings");
        }
        if !(self.cls_loss_weight.is_finite() && self.cls_loss_weight >= 0.0) {
            return bad("cls_loss_weight must be ≥ 0");
        }
        self.effective_architecture().validate()?;
        self.sampler_config(0).validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_dice_loss: f64,
    pub mean_bce_loss: f64,
    pub mean_total_loss: f64,
    pub val_median_dice: Option<f64>,
    pub checkpoint: String,
    pub params_sha256: String,
}

/// Where each training patch came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub step: usize,
    pub item: usize,
    pub slide_id: String,
    pub level: usize,
    pub center: (usize, usize),
    pub label: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub fingerprint: String,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub provenance: Vec<ProvenanceRecord>,
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,epoch,dice,bce,total\n");
        for s in &self.steps {
            writeln!(
                out,
                "{},{},{},{},{}",
                s.step, s.epoch, s.loss.dice_loss, s.loss.bce_loss, s.loss.total
            )
            .unwrap();
        }
        out
    }

    pub fn provenance_csv(&self) -> String {
        let mut out = String::from("step,item,slide_id,level,center_x,center_y,label\n");
        for p in &self.provenance {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                p.step, p.item, p.slide_id, p.level, p.center.0, p.center.1, p.label
            )
            .unwrap();
        }
        out
    }

    pub fn sampled_slides(&self) -> BTreeSet<&str> {
        self.provenance
            .iter()
            .map(|p| p.slide_id.as_str())
            .collect()
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fsio::write_bytes(&dir.join("train_log.csv"), self.steps_csv().as_bytes())?;
        fsio::write_bytes(
            &dir.join("provenance.csv"),
            self.provenance_csv().as_bytes(),
        )?;
        fsio::write_json(&dir.join("epochs.json"), &self.epochs)
    }
}

pub struct TrainOutcome {
    pub model: ModelBundle,
    pub log: TrainLog,
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch}.ckpt"))
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";

fn select<'a>(slides: &'a [SlidePyramid], ids: &[String]) -> Result<Vec<&'a SlidePyramid>> {
    ids.iter()
        .map(|id| {
            slides
                .iter()
                .find(|s| &s.slide_id == id)
                .ok_or_else(|| Error::MissingFile(PathBuf::from(format!("<slide {id}>"))))
        })
        .collect()
}

fn batch_tensors(samples: &[PatchSample], p: usize) -> (Tensor, Vec<f64>, Vec<f64>) {
    let mut x = Vec::with_capacity(samples.len() * 3 * p * p);
    let mut target = Vec::with_capacity(samples.len() * p * p);
    for s in samples {
        x.extend_from_slice(&s.image);
        target.extend(s.mask.iter().map(|&m| m as f64));
    }
    let labels = samples.iter().map(|s| s.label as f64).collect();
    (
        Tensor::from_vec([samples.len(), 3, p, p], x).expect("sample sizes agree"),
        target,
        labels,
    )
}

/// One optimization step; returns the loss before the update.
pub fn train_step(
    model: &mut ModelBundle,
    adam: &mut Adam,
    samples: &[PatchSample],
    multitask: bool,
    cls_weight: f64,
) -> Result<LossReport> {
    let p = model.spec.input_px;
    let (x, target, labels) = batch_tensors(samples, p);
    let tape = model.forward_train(&x)?;
    let out = tape.output();
    let seg: Vec<f64> = out.seg.data.iter().map(|&v| v as f64).collect();
    let (dice, dseg) = dice_loss_grad(&seg, &target)?;
    let (bce, dcls) = match (multitask, out.cls.as_ref()) {
        (true, Some(cls)) => {
            let pred: Vec<f64> = cls.iter().map(|&v| v as f64).collect();
            let (l, g) = bce_loss_grad(&pred, &labels)?;
            (
                l,
                Some(
                    g.into_iter()
                        .map(|v| (v * cls_weight) as f32)
                        .collect::<Vec<f32>>(),
                ),
            )
        }
        (true, None) => {
            return Err(Error::InvalidConfig(
                "multitask training needs a classifier head".into(),
            ))
        }
        (false, _) => (0.0, None),
    };
    let report = LossReport {
        dice_loss: dice,
        bce_loss: bce,
        total: dice + cls_weight * bce,
        batch_size: samples.len(),
    };
    if !report.total.is_finite() {
        return Ok(report);
    }
    let d_seg = Tensor::from_vec(out.seg.shape, dseg.into_iter().map(|v| v as f32).collect())?;
    model.net.zero_grad();
    model.net.backward(tape, &d_seg, dcls.as_deref());
    adam.step(model.net.params_mut());
    Ok(report)
}

/// Median Dice of `model` over `slides` at `resolution_um`.
pub fn validation_median_dice(
    model: &ModelBundle,
    slides: &[&SlidePyramid],
    resolution_um: f64,
    mode: InferenceMode,
) -> Result<f64> {
    let cfg = InferenceConfig::new(mode);
    let dices = slides
        .iter()
        .map(|s| {
            let pred = predict_slide_full(model, s, resolution_um, &cfg)?;
            let mask = binarize(pred.map(), DEFAULT_THRESHOLD);
            let gt = s.load_annotation(pred.grid.level)?;
            Ok(slide_dice(&mask, &gt)?.dice)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(median(&dices).unwrap_or(f64::NAN))
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    step: usize,
    epoch: usize,
    loss: &'a LossReport,
    params_sha256: String,
    batch: &'a [ProvenanceRecord],
}

/// Trains one fold. With `out_dir`, writes per-epoch and final checkpoints
/// plus `train_log.csv`, `epochs.json` and `provenance.csv`.
pub fn train_fold(
    config: &TrainConfig,
    fold: &FoldEntry,
    slides: &[SlidePyramid],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train = select(slides, &fold.train_slide_ids)?;
    let val = select(slides, &fold.val_slide_ids)?;
    let sources = train
        .par_iter()
        .map(|s| SamplingSource::load(s, config.resolution_um))
        .collect::<Result<Vec<_>>>()?;
    let mut sampler = PatchSampler::new(sources, config.sampler_config(fold.fold_id))?;

    let arch = config.effective_architecture();
    let mut model = build_model(&arch, derive_seed(config.seed, "init", fold.fold_id as u64))?;
    model.fingerprint = fingerprint_of(&serde_json::json!({
        "spec": arch,
        "train": config,
        "fold": fold.fold_id,
    }));
    let mut adam = Adam::new(config.optimizer);
    let mut log = TrainLog {
        fingerprint: model.fingerprint.clone(),
        ..TrainLog::default()
    };
    if let Some(dir) = out_dir {
        fsio::create_dir_all(dir)?;
    }

    let mut step = 0;
    for epoch in 1..=config.epochs {
        let first = log.steps.len();
        for _ in 0..config.steps_per_epoch {
            step += 1;
            let samples = sampler.next_batch(config.batch_size)?;
            let prov_start = log.provenance.len();
            log.provenance.extend(
                samples
                    .iter()
                    .enumerate()
                    .map(|(item, s)| ProvenanceRecord {
                        step,
                        item,
                        slide_id: s.source.slide_id.clone(),
                        level: s.source.level,
                        center: s.source.center,
                        label: s.label,
                    }),
            );
            let report = train_step(
                &mut model,
                &mut adam,
                &samples,
                config.multitask,
                config.cls_loss_weight,
            )?;
            if !report.total.is_finite() {
                let dump_dir = out_dir
                    .map(Path::to_path_buf)
                    .unwrap_or_else(std::env::temp_dir);
                let dump = dump_dir.join(format!("nonfinite_fold{}_step{step}.json", fold.fold_id));
                fsio::write_json(
                    &dump,
                    &NonFiniteDump {
                        step,
                        epoch,
                        loss: &report,
                        params_sha256: model.param_checksum(),
                        batch: &log.provenance[prov_start..],
                    },
                )?;
                return Err(Error::NonFiniteLoss { step, dump });
            }
            log.steps.push(StepRecord {
                step,
                epoch,
                loss: report,
            });
        }
        let epoch_steps = &log.steps[first..];
        let mean = |f: fn(&LossReport) -> f64| {
            epoch_steps.iter().map(|s| f(&s.loss)).sum::<f64>() / epoch_steps.len() as f64
        };
        let val_median_dice = if config.validate_each_epoch || epoch == config.epochs {
            Some(validation_median_dice(
                &model,
                &val,
                config.resolution_um,
                config.mode(),
            )?)
        } else {
            None
        };
        let ckpt = out_dir.map(|d| checkpoint_path(d, epoch));
        if let Some(path) = &ckpt {
            save_checkpoint(&model, path, epoch, fold.fold_id)?;
        }
        log.epochs.push(EpochRecord {
            epoch,
            mean_dice_loss: mean(|l| l.dice_loss),
            mean_bce_loss: mean(|l| l.bce_loss),
            mean_total_loss: mean(|l| l.total),
            val_median_dice,
            checkpoint: ckpt
                .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
                .unwrap_or_default(),
            params_sha256: model.param_checksum(),
        });
        if let Some(dir) = out_dir {
            log.write(dir)?;
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(
            &model,
            &dir.join(FINAL_CHECKPOINT),
            config.epochs,
            fold.fold_id,
        )?;
    }
    Ok(TrainOutcome { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::dice_loss;
    use crate::segnet::forward;
    use proptest::prelude::*;

    fn ids(patients: usize, per: usize) -> Vec<(String, String)> {
        (0..patients)
            .flat_map(|p| {
                (0..per).map(move |s| (format!("slide_{p:02}_{s}"), format!("patient_{p:02}")))
            })
            .collect()
    }

    fn check_partition(m: &FoldManifest, slides: &[(String, String)]) {
        let patient: BTreeMap<&str, &str> = slides
            .iter()
            .map(|(s, p)| (s.as_str(), p.as_str()))
            .collect();
        let mut union = BTreeSet::new();
        for f in &m.folds {
            let vp: BTreeSet<&str> = f
                .val_slide_ids
                .iter()
                .map(|s| patient[s.as_str()])
                .collect();
            let tp: BTreeSet<&str> = f
                .train_slide_ids
                .iter()
                .map(|s| patient[s.as_str()])
                .collect();
            assert!(vp.is_disjoint(&tp));
            assert_eq!(
                f.val_slide_ids.len() + f.train_slide_ids.len(),
                slides.len()
            );
            for s in &f.val_slide_ids {
                assert!(union.insert(s.clone()), "{s} validated twice");
            }
        }
        assert_eq!(union.len(), slides.len());
    }

    #[test]
    fn ten_patients_two_slides() {
        let s = ids(10, 2);
        let m = make_folds_from_ids(&s, 5, 3).unwrap();
        check_partition(&m, &s);
        for f in &m.folds {
            assert_eq!((f.val_slide_ids.len(), f.train_slide_ids.len()), (4, 16));
        }
    }

    #[test]
    fn twenty_nine_patients_fraction() {
        let s = ids(29, 2);
        let m = make_folds_from_ids(&s, 5, 11).unwrap();
        check_partition(&m, &s);
        for f in &m.folds {
            let frac = f.val_slide_ids.len() as f64 / 58.0;
            assert!((0.17..=0.24).contains(&frac), "{frac}");
        }
    }

    #[test]
    fn too_few_patients() {
        let e = make_folds_from_ids(&ids(4, 2), 5, 0).unwrap_err();
        assert!(matches!(e, Error::NotEnoughPatients { patients: 4, k: 5 }));
        assert!(make_folds_from_ids(&ids(4, 2), 1, 0).is_err());
    }

    #[test]
    fn folds_deterministic_and_seed_dependent() {
        let s = ids(12, 2);
        assert_eq!(
            make_folds_from_ids(&s, 5, 1).unwrap(),
            make_folds_from_ids(&s, 5, 1).unwrap()
        );
        let a = make_folds_from_ids(&s, 5, 1).unwrap();
        let b = make_folds_from_ids(&s, 5, 2).unwrap();
        assert_ne!(a.folds, b.folds);
        assert_eq!(a.dataset_hash, b.dataset_hash);
    }

    proptest! {
        #[test]
        fn partition_properties(sizes in proptest::collection::vec(1usize..4, 5..30), k in 2usize..6, seed in any::<u64>()) {
            let slides: Vec<(String, String)> = sizes
                .iter()
                .enumerate()
                .flat_map(|(p, &n)| (0..n).map(move |s| (format!("s{p}_{s}"), format!("p{p}"))))
                .collect();
            let m = make_folds_from_ids(&slides, k, seed).unwrap();
            check_partition(&m, &slides);
            let counts: Vec<usize> = m.folds.iter().map(|f| f.val_slide_ids.len()).collect();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            prop_assert!(hi - lo <= *sizes.iter().max().unwrap());
        }
    }

    #[test]
    fn config_validation() {
        let c = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("epochs ≥ 1"));
        let c = TrainConfig {
            multitask: true,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn schedules() {
        let s = TrainConfig::reference_single_task(3.89);
        assert_eq!(
            (s.epochs, s.batch_size, s.optimizer.learning_rate),
            (30, 16, 1e-5)
        );
        let m = TrainConfig::reference_multitask(LabelCriterion::Cl2);
        assert_eq!((m.epochs, m.resolution_um), (100, 15.56));
        assert_eq!((m.optimizer.beta1, m.optimizer.beta2), (0.9, 0.999));
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = Param {
            name: "w".into(),
            shape: vec![3],
            value: vec![1.0, 1.0, 1.0],
            grad: vec![0.5, -2.0, 0.0],
        };
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        });
        adam.step(vec![&mut p]);
        assert!((p.value[0] - 0.9).abs() < 1e-6);
        assert!((p.value[1] - 1.1).abs() < 1e-6);
        assert_eq!(p.value[2], 1.0);
    }

    fn fixed_batch(p: usize) -> Vec<PatchSample> {
        use crate::patch_pipeline::{PatchSource, SampledClass};
        (0..4)
            .map(|k| {
                let mut image = vec![0.9f32; 3 * p * p];
                let mut mask = vec![0u8; p * p];
                for y in 0..p {
                    for x in 0..p {
                        let inside =
                            (x as i64 - (8 + 4 * k) as i64).pow(2) + (y as i64 - 16).pow(2) < 64;
                        if inside {
                            mask[y * p + x] = 1;
                            image[y * p + x] = 0.5;
                            image[p * p + y * p + x] = 0.3;
                        }
                    }
                }
                let label = LabelCriterion::Cl2.assign(&mask);
                PatchSample {
                    patch_px: p,
                    image,
                    mask,
                    label,
                    criterion: LabelCriterion::Cl2,
                    source: PatchSource {
                        slide_id: "s".into(),
                        level: 0,
                        origin: (0.0, 0.0),
                        rescale: 1.0,
                        center: (0, 0),
                    },
                    sampled_class: SampledClass::Cancer,
                }
            })
            .collect()
    }

    #[test]
    fn overfits_one_batch() {
        let arch = ArchitectureSpec {
            input_px: 32,
            stage_widths: vec![8, 8, 16, 16, 16],
            decoder_widths: vec![16, 16, 8, 8, 8],
            classifier: true,
            init_gain: 1.0,
            ..ArchitectureSpec::default()
        };
        let mut model = build_model(&arch, 1).unwrap();
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 3e-3,
            ..AdamConfig::default()
        });
        let batch = fixed_batch(32);
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            last = train_step(&mut model, &mut adam, &batch, true, 1.0)
                .unwrap()
                .total;
            if last < 0.05 {
                break;
            }
        }
        assert!(last < 0.05, "combined loss {last}");
        let (x, target, _) = batch_tensors(&batch, 32);
        let out = forward(&model, &x).unwrap();
        let seg: Vec<f64> = out.seg.data.iter().map(|&v| v as f64).collect();
        assert!(dice_loss(&seg, &target).unwrap() < 0.2);
    }

    #[test]
    fn derived_seeds_differ_by_stream() {
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "b", 0));
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
        assert_eq!(derive_seed(1, "a", 0), derive_seed(1, "a", 0));
    }
}
