//! Experiment orchestration behind the command-line tool: one flat JSON
//! config per experiment, and the `synth`, `folds`, `run`, `infer` and
//! `eval` commands.
//!
//! Run directory layout (`<output_dir>/<run_id>/`):
//!
//! ```text
//! config.json          effective config after defaults
//! seed.json            root seed
//! folds.json           fold manifest
//! fingerprints.json    per-fold model fingerprint and parameter checksum
//! fold_<i>/            checkpoints and training logs
//! predictions/         <slide_id>.png + .json per validation slide
//! metrics.csv          per-slide metrics
//! summary.json         experiment row: median Dice (IQR), positive median Dice (IQR)
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::inference::{
    binarize, predict_slide_full, read_prediction, write_prediction, InferenceConfig,
    InferenceMode, PredictionMeta,
};
use crate::metrics::{evaluate_slide, summarize, write_metrics_csv, MetricsRow, SummaryRow};
use crate::patch_pipeline::{AugmentationConfig, LabelCriterion};
use crate::segnet::{load_checkpoint, ArchitectureSpec, ModelBundle};
use crate::slide_store::{MaskRole, SlidePyramid};
use crate::synthdata::{generate_dataset, DatasetIndex, DatasetSpec, SynthSpec};
use crate::training::{
    make_folds, train_fold, AdamConfig, FoldManifest, TrainConfig, FINAL_CHECKPOINT,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
    pub run_id: String,
    /// Row label in summaries; defaults to `run_id`.
    pub experiment: Option<String>,
    pub seed: u64,

    pub mode: InferenceMode,
    pub label_criterion: Option<LabelCriterion>,
    pub resolution_um: f64,
    pub threshold: f64,
    pub cls_threshold: f64,

    pub k_folds: usize,
    /// Subset of folds to train; all when absent.
    pub folds: Option<Vec<usize>>,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub cls_loss_weight: f64,
    pub validate_each_epoch: bool,

    pub patch_px: usize,
    pub class_balance: f64,
    /// Master switch; `false` disables every transform below.
    pub augment: bool,
    pub augmentations: AugmentationConfig,
    pub workers: usize,

    pub stage_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub init_gain: f64,

    pub n_patients: usize,
    pub slides_per_patient: usize,
    pub positive_fraction: f64,
    pub base_px: usize,
    pub base_um: f64,
    pub n_levels: usize,
    pub tile_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let arch = ArchitectureSpec::default();
        let synth = SynthSpec::default();
        let data = DatasetSpec::default();
        Self {
            dataset_dir: PathBuf::from("data/synth"),
            output_dir: PathBuf::from("runs"),
            run_id: "run".into(),
            experiment: None,
            seed: 0,
            mode: InferenceMode::Single,
            label_criterion: None,
            resolution_um: train.resolution_um,
            threshold: 0.5,
            cls_threshold: 0.5,
            k_folds: 5,
            folds: None,
            epochs: train.epochs,
            steps_per_epoch: train.steps_per_epoch,
            batch_size: train.batch_size,
            learning_rate: train.optimizer.learning_rate,
            beta1: train.optimizer.beta1,
            beta2: train.optimizer.beta2,
            adam_eps: train.optimizer.eps,
            cls_loss_weight: train.cls_loss_weight,
            validate_each_epoch: train.validate_each_epoch,
            patch_px: train.patch_px,
            class_balance: train.class_balance,
            augment: true,
            augmentations: AugmentationConfig::default(),
            workers: train.workers,
            stage_widths: arch.stage_widths,
            decoder_widths: arch.decoder_widths,
            init_gain: arch.init_gain,
            n_patients: data.n_patients,
            slides_per_patient: data.slides_per_patient,
            positive_fraction: data.positive_fraction,
            base_px: synth.base_px.0,
            base_um: synth.base_um,
            n_levels: synth.n_levels,
            tile_size: synth.tile_size,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = fsio::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn experiment_name(&self) -> &str {
        self.experiment.as_deref().unwrap_or(&self.run_id)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == InferenceMode::Multitask && self.label_criterion.is_none() {
            return Err(Error::InvalidConfig(
                "mode multitask requires label_criterion".into(),
            ));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::InvalidConfig(format!(
                "invalid run_id {:?}",
                self.run_id
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) || !(0.0..=1.0).contains(&self.cls_threshold) {
            return Err(Error::InvalidConfig("thresholds must lie in [0, 1]".into()));
        }
        if let Some(f) = &self.folds {
            if let Some(bad) = f.iter().find(|&&i| i >= self.k_folds) {
                return Err(Error::InvalidConfig(format!(
                    "fold {bad} ≥ k_folds {}",
                    self.k_folds
                )));
            }
        }
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            resolution_um: self.resolution_um,
            epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch,
            batch_size: self.batch_size,
            optimizer: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            multitask: self.mode == InferenceMode::Multitask,
            label_criterion: self.label_criterion,
            cls_loss_weight: self.cls_loss_weight,
            seed: self.seed,
            patch_px: self.patch_px,
            class_balance: self.class_balance,
            augmentations: if self.augment {
                self.augmentations.clone()
            } else {
                AugmentationConfig::disabled()
            },
            workers: self.workers,
            architecture: ArchitectureSpec {
                stage_widths: self.stage_widths.clone(),
                decoder_widths: self.decoder_widths.clone(),
                init_gain: self.init_gain,
                ..ArchitectureSpec::default()
            },
            validate_each_epoch: self.validate_each_epoch,
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            n_patients: self.n_patients,
            slides_per_patient: self.slides_per_patient,
            positive_fraction: self.positive_fraction,
            seed: self.seed,
            template: SynthSpec {
                base_px: (self.base_px, self.base_px),
                base_um: self.base_um,
                n_levels: self.n_levels,
                tile_size: self.tile_size,
                ..SynthSpec::default()
            },
        }
    }

    pub fn inference_config(&self) -> InferenceConfig {
        InferenceConfig {
            mode: self.mode,
            cls_threshold: self.cls_threshold,
            batch_size: self.batch_size,
        }
    }
}

fn require_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            Err(Error::MissingFile(p.to_path_buf()))
        }
        _ => Ok(()),
    }
}

pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<DatasetIndex> {
    require_parent(&cfg.dataset_dir)?;
    generate_dataset(&cfg.dataset_spec(), &cfg.dataset_dir)
}

pub fn load_dataset(dataset_dir: &Path) -> Result<Vec<SlidePyramid>> {
    DatasetIndex::load(dataset_dir)?.open_all(dataset_dir)
}

pub const CONFIG_FILE: &str = "config.json";
pub const FOLDS_FILE: &str = "folds.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PREDICTIONS_DIR: &str = "predictions";
pub const TABLE_FILE: &str = "table.json";

pub fn cmd_folds(cfg: &ExperimentConfig) -> Result<FoldManifest> {
    let slides = load_dataset(&cfg.dataset_dir)?;
    let manifest = make_folds(&slides, cfg.k_folds, cfg.seed)?;
    let dir = cfg.run_dir();
    fsio::create_dir_all(&dir)?;
    fsio::write_json(&dir.join(FOLDS_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldFingerprint {
    pub fold: usize,
    pub fingerprint: String,
    pub params_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub folds: FoldManifest,
    pub fingerprints: Vec<FoldFingerprint>,
    pub rows: Vec<MetricsRow>,
    pub summary: SummaryRow,
}

fn selected_folds(cfg: &ExperimentConfig, manifest: &FoldManifest) -> Vec<usize> {
    match &cfg.folds {
        Some(f) => f.clone(),
        None => manifest.folds.iter().map(|f| f.fold_id).collect(),
    }
}

fn find<'a>(slides: &'a [SlidePyramid], id: &str) -> Result<&'a SlidePyramid> {
    slides
        .iter()
        .find(|s| s.slide_id == id)
        .ok_or_else(|| Error::MissingFile(PathBuf::from(format!("<slide {id}>"))))
}

/// Predicts and stores the validation slides of one fold.
fn predict_fold(
    cfg: &ExperimentConfig,
    model: &ModelBundle,
    manifest: &FoldManifest,
    fold: usize,
    slides: &[SlidePyramid],
    pred_dir: &Path,
) -> Result<()> {
    let icfg = cfg.inference_config();
    for id in &manifest.fold(fold)?.val_slide_ids {
        let slide = find(slides, id)?;
        let pred = predict_slide_full(model, slide, cfg.resolution_um, &icfg)?;
        let mask = binarize(pred.map(), cfg.threshold);
        let meta = PredictionMeta {
            slide_id: id.clone(),
            fingerprint: model.fingerprint.clone(),
            mode: cfg.mode,
            resolution_um: cfg.resolution_um,
            threshold: cfg.threshold,
            cls_threshold: cfg.cls_threshold,
            level: mask.level_index,
            width: mask.width,
            height: mask.height,
        };
        write_prediction(pred_dir, &meta, &mask)?;
    }
    Ok(())
}

/// Per-slide metrics from stored predictions for the validation slides of
/// `folds`.
pub fn evaluate_predictions(
    manifest: &FoldManifest,
    folds: &[usize],
    slides: &[SlidePyramid],
    pred_dir: &Path,
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for &fold in folds {
        for id in &manifest.fold(fold)?.val_slide_ids {
            let (pred, meta) = read_prediction(pred_dir, id)?;
            let slide = find(slides, id)?;
            let gt = slide.load_annotation(pred.level_index)?;
            let tissue = slide.load_mask(MaskRole::Tissue, pred.level_index)?;
            let metrics = evaluate_slide(id, &pred, &gt, &tissue)
                .map_err(|e| Error::stage("evaluate", fold, e))?;
            rows.push(MetricsRow {
                fold,
                mode: meta.mode.to_string(),
                resolution_um: meta.resolution_um,
                metrics,
            });
        }
    }
    Ok(rows)
}

fn summary_row(cfg: &ExperimentConfig, rows: &[MetricsRow]) -> Result<SummaryRow> {
    let per_slide: Vec<_> = rows.iter().map(|r| r.metrics.clone()).collect();
    Ok(SummaryRow::new(
        cfg.experiment_name(),
        cfg.resolution_um,
        &cfg.mode.to_string(),
        cfg.label_criterion.map(|c| c.to_string()),
        summarize(&per_slide)?,
    ))
}

fn write_metrics(dir: &Path, rows: &[MetricsRow], summary: &SummaryRow) -> Result<()> {
    fsio::create_dir_all(dir)?;
    write_metrics_csv(&dir.join(METRICS_FILE), rows)?;
    fsio::write_json(&dir.join(SUMMARY_FILE), summary)
}

/// Adds or replaces this experiment's row in `<output_dir>/table.json`.
fn update_table(cfg: &ExperimentConfig, row: &SummaryRow) -> Result<()> {
    let path = cfg.output_dir.join(TABLE_FILE);
    let mut table: BTreeMap<String, SummaryRow> = if path.is_file() {
        fsio::read_json(&path)?
    } else {
        BTreeMap::new()
    };
    table.insert(cfg.run_id.clone(), row.clone());
    fsio::write_json(&path, &table)
}

pub fn read_table(output_dir: &Path) -> Result<BTreeMap<String, SummaryRow>> {
    fsio::read_json(&output_dir.join(TABLE_FILE))
}

/// Folds → training → validation inference → metrics, per the config.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    fsio::create_dir_all(&run_dir)?;
    fsio::write_json(&run_dir.join(CONFIG_FILE), cfg)?;
    fsio::write_json(
        &run_dir.join("seed.json"),
        &serde_json::json!({ "seed": cfg.seed }),
    )?;
    let slides = load_dataset(&cfg.dataset_dir)?;
    let manifest = make_folds(&slides, cfg.k_folds, cfg.seed)?;
    fsio::write_json(&run_dir.join(FOLDS_FILE), &manifest)?;

    let train_cfg = cfg.train_config();
    let pred_dir = run_dir.join(PREDICTIONS_DIR);
    fsio::create_dir_all(&pred_dir)?;
    let folds = selected_folds(cfg, &manifest);
    let mut fingerprints = Vec::new();
    for &fold in &folds {
        let entry = manifest.fold(fold)?;
        let out = train_fold(
            &train_cfg,
            entry,
            &slides,
            Some(&run_dir.join(format!("fold_{fold}"))),
        )
        .map_err(|e| Error::stage("train", fold, e))?;
        fingerprints.push(FoldFingerprint {
            fold,
            fingerprint: out.model.fingerprint.clone(),
            params_sha256: out.model.param_checksum(),
        });
        predict_fold(cfg, &out.model, &manifest, fold, &slides, &pred_dir)
            .map_err(|e| Error::stage("infer", fold, e))?;
    }
    fsio::write_json(&run_dir.join("fingerprints.json"), &fingerprints)?;

    let rows = evaluate_predictions(&manifest, &folds, &slides, &pred_dir)?;
    let summary = summary_row(cfg, &rows)?;
    write_metrics(&run_dir, &rows, &summary)?;
    update_table(cfg, &summary)?;
    Ok(RunOutcome {
        run_dir,
        folds: manifest,
        fingerprints,
        rows,
        summary,
    })
}

fn load_manifest(run_dir: &Path) -> Result<FoldManifest> {
    fsio::read_json(&run_dir.join(FOLDS_FILE))
}

/// Re-predicts every validation slide from each fold's final checkpoint.
pub fn cmd_infer(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    let manifest = load_manifest(&run_dir)?;
    let slides = load_dataset(&cfg.dataset_dir)?;
    let pred_dir = run_dir.join(PREDICTIONS_DIR);
    fsio::create_dir_all(&pred_dir)?;
    for fold in selected_folds(cfg, &manifest) {
        let ckpt = run_dir.join(format!("fold_{fold}")).join(FINAL_CHECKPOINT);
        let (model, _) = load_checkpoint(&ckpt).map_err(|e| Error::stage("load", fold, e))?;
        predict_fold(cfg, &model, &manifest, fold, &slides, &pred_dir)
            .map_err(|e| Error::stage("infer", fold, e))?;
    }
    Ok(pred_dir)
}

/// Recomputes metrics from stored predictions into `out_dir`.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    predictions_dir: &Path,
    dataset_dir: &Path,
    out_dir: &Path,
) -> Result<(Vec<MetricsRow>, SummaryRow)> {
    let manifest = load_manifest(&cfg.run_dir())?;
    let slides = load_dataset(dataset_dir)?;
    let folds = selected_folds(cfg, &manifest);
    let rows = evaluate_predictions(&manifest, &folds, &slides, predictions_dir)?;
    let summary = summary_row(cfg, &rows)?;
    write_metrics(out_dir, &rows, &summary)?;
    Ok((rows, summary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_validate() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: ExperimentConfig =
            serde_json::from_str(r#"{"run_id": "x", "epochs": 3}"#).unwrap();
        assert_eq!((partial.epochs, partial.steps_per_epoch), (3, 250));
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn multitask_needs_criterion() {
        let cfg = ExperimentConfig {
            mode: InferenceMode::Multitask,
            ..ExperimentConfig::default()
        };
        let e = cfg.validate().unwrap_err();
        assert!(e.to_string().contains("label_criterion"));
        let ok = ExperimentConfig {
            label_criterion: Some(LabelCriterion::Cl1),
            ..cfg
        };
        ok.validate().unwrap();
        assert!(ok.train_config().multitask);
    }

    #[test]
    fn synth_requires_existing_parent() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            dataset_dir: dir.path().join("missing/parent/ds"),
            ..ExperimentConfig::default()
        };
        match cmd_synth(&cfg) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("missing/parent")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
