//! Patch-based, multi-resolution tumour segmentation for pyramid-tiled
//! gigapixel slides.
//!
//! The pipeline stages map onto modules:
//!
//! 1. [`slide_store`]: pyramid slides on disk, tissue detection, annotation
//!    ingestion.
//! 2. [`synthdata`]: synthetic slides with exactly known tissue and tumour
//!    geometry.
//! 3. [`patch_pipeline`]: class-balanced patch sampling, patch labels and
//!    augmentation.
//! 4. [`segnet`]: a 5-stage encoder / 5-stage decoder U-Net with an optional
//!    single-unit patch classifier, on a small CPU engine.
//! 5. [`objective`]: soft Dice, binary cross-entropy and their sum.
//! 6. [`training`]: patient-disjoint folds and the Adam training loop.
//! 7. [`inference`]: sequential tiling, classifier masking, stitching.
//! 8. [`metrics`]: per-slide Dice conventions and median/IQR summaries.
//! 9. [`experiment`]: config-driven orchestration used by the CLI.

pub mod error;
pub mod experiment;
pub mod fsio;
pub mod inference;
pub mod metrics;
pub mod objective;
pub mod patch_pipeline;
pub mod segnet;
pub mod slide_store;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
