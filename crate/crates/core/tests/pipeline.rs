use std::collections::BTreeSet;

use slideseg::inference::{predict_slide, InferenceMode};
use slideseg::patch_pipeline::LabelCriterion;
use slideseg::segnet::{load_checkpoint, sidecar_path};
use slideseg::synthdata::{generate_dataset, DatasetSpec, SynthSpec};
use slideseg::training::{checkpoint_path, make_folds, train_fold, TrainConfig, FINAL_CHECKPOINT};

fn tiny(multitask: bool) -> TrainConfig {
    TrainConfig {
        resolution_um: 7.78,
        epochs: 2,
        steps_per_epoch: 4,
        batch_size: 4,
        patch_px: 32,
        multitask,
        label_criterion: multitask.then_some(LabelCriterion::Cl2),
        workers: 2,
        seed: 17,
        ..TrainConfig::default()
    }
}

#[test]
fn train_fold_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let spec = DatasetSpec {
        n_patients: 5,
        slides_per_patient: 2,
        positive_fraction: 0.8,
        seed: 2,
        template: SynthSpec {
            base_px: (512, 512),
            ..SynthSpec::default()
        },
    };
    let index = generate_dataset(&spec, &ds).unwrap();
    let slides = index.open_all(&ds).unwrap();
    let manifest = make_folds(&slides, 5, 3).unwrap();

    for multitask in [false, true] {
        let cfg = tiny(multitask);
        let fold = &manifest.folds[1];
        let out_dir = tmp.path().join(format!("fold_mt{multitask}"));
        let a = train_fold(&cfg, fold, &slides, Some(&out_dir)).unwrap();
        let b = train_fold(&cfg, fold, &slides, None).unwrap();

        // Reruns agree on weights, logs and sampled patches.
        assert_eq!(a.model.fingerprint, b.model.fingerprint);
        assert_eq!(a.model.param_checksum(), b.model.param_checksum());
        assert_eq!(a.log.steps, b.log.steps);
        assert_eq!(a.log.provenance, b.log.provenance);
        assert_eq!(a.log.steps.len(), 8);
        for s in &a.log.steps {
            let l = &s.loss;
            assert!(l.total.is_finite() && (0.0..=1.0).contains(&l.dice_loss));
            if multitask {
                assert_eq!(l.total, l.dice_loss + l.bce_loss);
            } else {
                assert_eq!(l.bce_loss, 0.0);
            }
        }

        // Validation slides are never sampled.
        let val: BTreeSet<&str> = fold.val_slide_ids.iter().map(String::as_str).collect();
        assert_eq!(a.log.provenance.len(), 8 * 4);
        assert!(a
            .log
            .provenance
            .iter()
            .all(|p| !val.contains(p.slide_id.as_str())));

        // Artifacts on disk.
        for e in 1..=2 {
            let p = checkpoint_path(&out_dir, e);
            assert!(p.is_file() && sidecar_path(&p).is_file());
        }
        let log = std::fs::read_to_string(out_dir.join("train_log.csv")).unwrap();
        assert!(log.starts_with("step,epoch,dice,bce,total\n"));
        assert_eq!(log.lines().count(), 9);
        assert!(out_dir.join("provenance.csv").is_file());
        assert_eq!(a.log.epochs.len(), 2);
        assert!(a.log.epochs[1].val_median_dice.is_some());

        // The final checkpoint predicts exactly like the in-memory model, and
        // outputs cover the level extent only.
        let (loaded, meta) = load_checkpoint(&out_dir.join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(meta.fingerprint, a.model.fingerprint);
        let mode = if multitask {
            InferenceMode::Multitask
        } else {
            InferenceMode::Single
        };
        let slide = slides
            .iter()
            .find(|s| s.slide_id == fold.val_slide_ids[0])
            .unwrap();
        let p1 = predict_slide(&a.model, slide, 7.78, mode).unwrap();
        let p2 = predict_slide(&loaded, slide, 7.78, mode).unwrap();
        assert_eq!(p1, p2);
        let lvl = slide.level(p1.level).unwrap();
        assert_eq!((p1.width, p1.height), (lvl.width, lvl.height));
        assert!(p1.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
