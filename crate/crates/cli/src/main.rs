//! `slideseg` command-line driver.
//!
//! Every command reads an optional flat JSON experiment config
//! (`--config`); command flags override its keys. Failures print one line
//! `error[<kind>]: <message>` to stderr and exit with status 1.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slideseg::experiment::{
    cmd_eval, cmd_folds, cmd_infer, cmd_run, cmd_synth, ExperimentConfig, CONFIG_FILE,
    PREDICTIONS_DIR,
};
use slideseg::inference::InferenceMode;
use slideseg::patch_pipeline::LabelCriterion;
use slideseg::Error;

#[derive(Parser)]
#[command(
    name = "slideseg",
    version,
    about = "Multi-resolution multi-task slide segmentation"
)]
struct Cli {
    /// Experiment config (flat JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory: the dataset for `synth`, the metrics directory for
    /// `eval`, the runs root otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct RunFlags {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Runs root; same as `--out` for run, folds and infer.
    #[arg(long)]
    runs: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<InferenceMode>,
    #[arg(long, value_parser = parse_criterion)]
    criterion: Option<LabelCriterion>,
    #[arg(long)]
    resolution_um: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patch_px: Option<usize>,
    /// Comma-separated fold ids to train.
    #[arg(long, value_delimiter = ',')]
    folds: Option<Vec<usize>>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic slide dataset.
    Synth {
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        per_patient: Option<usize>,
        #[arg(long)]
        positive_fraction: Option<f64>,
        #[arg(long)]
        base_px: Option<usize>,
    },
    /// Write the patient-disjoint fold manifest.
    Folds {
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Train every fold, predict validation slides and compute metrics.
    Run {
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Re-predict validation slides from final checkpoints.
    Infer {
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Recompute metrics from stored predictions.
    Eval {
        /// Defaults to `<run>/predictions`.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[command(flatten)]
        flags: RunFlags,
    },
}

fn parse_mode(s: &str) -> Result<InferenceMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
        .map_err(|_| format!("unknown mode {s:?} (single|multitask)"))
}

fn parse_criterion(s: &str) -> Result<LabelCriterion, String> {
    serde_json::from_value(serde_json::Value::String(s.to_uppercase()))
        .map_err(|_| format!("unknown criterion {s:?} (CL1|CL2)"))
}

fn apply(cfg: &mut ExperimentConfig, f: &RunFlags) {
    if let Some(v) = &f.dataset {
        cfg.dataset_dir = v.clone();
    }
    if let Some(v) = &f.runs {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = &f.run_id {
        cfg.run_id = v.clone();
    }
    if let Some(v) = f.mode {
        cfg.mode = v;
    }
    if let Some(v) = f.criterion {
        cfg.label_criterion = Some(v);
    }
    if let Some(v) = f.resolution_um {
        cfg.resolution_um = v;
    }
    if let Some(v) = f.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = f.steps {
        cfg.steps_per_epoch = v;
    }
    if let Some(v) = f.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = f.patch_px {
        cfg.patch_px = v;
    }
    if let Some(v) = &f.folds {
        cfg.folds = Some(v.clone());
    }
}

/// Falls back to the config a run recorded, keeping command-line overrides.
fn stored_config(
    cfg: ExperimentConfig,
    flags: &RunFlags,
    seed: Option<u64>,
) -> Result<ExperimentConfig, Error> {
    let path = cfg.run_dir().join(CONFIG_FILE);
    if !path.exists() {
        return Ok(cfg);
    }
    let mut stored = ExperimentConfig::load(&path)?;
    stored.output_dir = cfg.output_dir;
    stored.run_id = cfg.run_id;
    apply(&mut stored, flags);
    if let Some(s) = seed {
        stored.seed = s;
    }
    Ok(stored)
}

fn execute(cli: Cli) -> Result<serde_json::Value, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Synth {
            patients,
            per_patient,
            positive_fraction,
            base_px,
        } => {
            if let Some(v) = &cli.out {
                cfg.dataset_dir = v.clone();
            }
            if let Some(v) = patients {
                cfg.n_patients = v;
            }
            if let Some(v) = per_patient {
                cfg.slides_per_patient = v;
            }
            if let Some(v) = positive_fraction {
                cfg.positive_fraction = v;
            }
            if let Some(v) = base_px {
                cfg.base_px = v;
            }
            let index = cmd_synth(&cfg)?;
            let positive = index
                .slides
                .iter()
                .filter(|s| s.label == slideseg::slide_store::SlideLabel::Positive)
                .count();
            Ok(serde_json::json!({
                "dataset_dir": cfg.dataset_dir,
                "slides": index.slides.len(),
                "positive": positive,
            }))
        }
        Command::Folds { k, flags } => {
            apply(&mut cfg, &flags);
            if let Some(v) = &cli.out {
                cfg.output_dir = v.clone();
            }
            if let Some(k) = k {
                cfg.k_folds = k;
            }
            let m = cmd_folds(&cfg)?;
            Ok(serde_json::json!({
                "folds": cfg.run_dir().join(slideseg::experiment::FOLDS_FILE),
                "k": m.k,
                "val_sizes": m.folds.iter().map(|f| f.val_slide_ids.len()).collect::<Vec<_>>(),
            }))
        }
        Command::Run { flags } => {
            apply(&mut cfg, &flags);
            if let Some(v) = &cli.out {
                cfg.output_dir = v.clone();
            }
            let out = cmd_run(&cfg)?;
            Ok(serde_json::json!({
                "run_dir": out.run_dir,
                "summary": out.summary,
            }))
        }
        Command::Infer { flags } => {
            apply(&mut cfg, &flags);
            if let Some(v) = &cli.out {
                cfg.output_dir = v.clone();
            }
            if cli.config.is_none() {
                cfg = stored_config(cfg, &flags, cli.seed)?;
            }
            let dir = cmd_infer(&cfg)?;
            Ok(serde_json::json!({ "predictions": dir }))
        }
        Command::Eval { predictions, flags } => {
            apply(&mut cfg, &flags);
            if cli.config.is_none() {
                cfg = stored_config(cfg, &flags, cli.seed)?;
            }
            let predictions = predictions.unwrap_or_else(|| cfg.run_dir().join(PREDICTIONS_DIR));
            let out_dir = cli
                .out
                .clone()
                .unwrap_or_else(|| cfg.run_dir().join("eval"));
            let (_, summary) = cmd_eval(&cfg, &predictions, &cfg.dataset_dir, &out_dir)?;
            Ok(serde_json::json!({
                "metrics_dir": out_dir,
                "summary": summary,
            }))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
