//! Slide-level evaluation: Dice with empty-mask conventions, median/IQR
//! summaries, and false-positive tissue percentage on negative slides.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::slide_store::BinaryMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideMetrics {
    pub slide_id: String,
    pub dice: f64,
    pub gt_positive: bool,
    pub pred_positive: bool,
    /// Only defined for slides without tumour.
    pub fp_tissue_pct: Option<f64>,
}

/// Dice from pixel counts: 1 when both masks are empty, 0 when exactly one
/// is, `2|P∩G| / (|P|+|G|)` otherwise.
pub fn dice_from_counts(pred: usize, gt: usize, both: usize) -> f64 {
    match (pred, gt) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * both as f64 / (pred + gt) as f64,
    }
}

pub fn slide_dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<SlideMetrics> {
    let both = pred.intersection_count(gt)?;
    let (p, g) = (pred.count(), gt.count());
    Ok(SlideMetrics {
        slide_id: String::new(),
        dice: dice_from_counts(p, g, both),
        gt_positive: g > 0,
        pred_positive: p > 0,
        fp_tissue_pct: None,
    })
}

/// `100 · |pred ∩ tissue| / |tissue|`.
pub fn fp_tissue_percentage(pred: &BinaryMask, tissue: &BinaryMask) -> Result<f64> {
    let both = pred.intersection_count(tissue)?;
    let n = tissue.count();
    if n == 0 {
        return Err(Error::EmptyTissue("tissue mask has no pixels".into()));
    }
    Ok(100.0 * both as f64 / n as f64)
}

/// Dice plus, on slides without tumour, the false-positive tissue share.
pub fn evaluate_slide(
    slide_id: &str,
    pred: &BinaryMask,
    gt: &BinaryMask,
    tissue: &BinaryMask,
) -> Result<SlideMetrics> {
    let mut m = slide_dice(pred, gt)?;
    m.slide_id = slide_id.to_string();
    if !m.gt_positive {
        m.fp_tissue_pct = Some(fp_tissue_percentage(pred, tissue)?);
    }
    Ok(m)
}

/// Quantile of sorted data by linear interpolation between order
/// statistics at position `q · (n − 1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
}

pub fn spread(values: &[f64]) -> Option<Spread> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&v, 0.25);
    let q3 = quantile_sorted(&v, 0.75);
    Some(Spread {
        median: quantile_sorted(&v, 0.5),
        q1,
        q3,
        iqr: q3 - q1,
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    spread(values).map(|s| s.median)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub n_all: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub median_dice_all: f64,
    pub iqr_all: f64,
    pub median_dice_pos: Option<f64>,
    pub iqr_pos: Option<f64>,
    pub fp_pct_mean: Option<f64>,
    pub fp_pct_std: Option<f64>,
}

pub fn summarize(per_slide: &[SlideMetrics]) -> Result<MetricsSummary> {
    if per_slide.is_empty() {
        return Err(Error::EmptyInput("no slide metrics to summarize".into()));
    }
    let all: Vec<f64> = per_slide.iter().map(|m| m.dice).collect();
    let pos: Vec<f64> = per_slide
        .iter()
        .filter(|m| m.gt_positive)
        .map(|m| m.dice)
        .collect();
    let fp: Vec<f64> = per_slide.iter().filter_map(|m| m.fp_tissue_pct).collect();
    let s_all = spread(&all).expect("nonempty");
    let s_pos = spread(&pos);
    let fp_stats = mean_std(&fp);
    Ok(MetricsSummary {
        n_all: all.len(),
        n_positive: pos.len(),
        n_negative: per_slide.len() - pos.len(),
        median_dice_all: s_all.median,
        iqr_all: s_all.iqr,
        median_dice_pos: s_pos.map(|s| s.median),
        iqr_pos: s_pos.map(|s| s.iqr),
        fp_pct_mean: fp_stats.map(|s| s.0),
        fp_pct_std: fp_stats.map(|s| s.1),
    })
}

/// One row of the per-slide metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub fold: usize,
    pub mode: String,
    pub resolution_um: f64,
    pub metrics: SlideMetrics,
}

pub const CSV_HEADER: &str =
    "slide_id,fold,mode,resolution_um,dice,gt_positive,pred_positive,fp_tissue_pct";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let m = &r.metrics;
        let fp = m.fp_tissue_pct.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            m.slide_id, r.fold, r.mode, r.resolution_um, m.dice, m.gt_positive, m.pred_positive, fp
        )
        .unwrap();
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    fsio::write_bytes(path, metrics_csv(rows).as_bytes())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, what: &str| Error::Schema {
        path: path.to_path_buf(),
        message: format!("line {line}: {what}"),
    };
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(i + 2, "expected 8 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 2, "bad number"));
            let flag = |s: &str| s.parse::<bool>().map_err(|_| bad(i + 2, "bad flag"));
            Ok(MetricsRow {
                fold: f[1].parse().map_err(|_| bad(i + 2, "bad fold"))?,
                mode: f[2].to_string(),
                resolution_um: num(f[3])?,
                metrics: SlideMetrics {
                    slide_id: f[0].to_string(),
                    dice: num(f[4])?,
                    gt_positive: flag(f[5])?,
                    pred_positive: flag(f[6])?,
                    fp_tissue_pct: if f[7].is_empty() {
                        None
                    } else {
                        Some(num(f[7])?)
                    },
                },
            })
        })
        .collect()
}

/// Table-style experiment row: median Dice (IQR) over all slides and over
/// tumour-bearing slides, plus FP tissue statistics on negative slides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub resolution_um: f64,
    pub mode: String,
    pub label_criterion: Option<String>,
    pub median_dice: String,
    pub median_positive_dice: String,
    pub summary: MetricsSummary,
}

fn fmt_median_iqr(median: Option<f64>, iqr: Option<f64>) -> String {
    match (median, iqr) {
        (Some(m), Some(i)) => format!("{m:.3} ({i:.3})"),
        _ => "n/a".into(),
    }
}

impl SummaryRow {
    pub fn new(
        experiment: &str,
        resolution_um: f64,
        mode: &str,
        label_criterion: Option<String>,
        summary: MetricsSummary,
    ) -> Self {
        Self {
            experiment: experiment.to_string(),
            resolution_um,
            mode: mode.to_string(),
            label_criterion,
            median_dice: fmt_median_iqr(Some(summary.median_dice_all), Some(summary.iqr_all)),
            median_positive_dice: fmt_median_iqr(summary.median_dice_pos, summary.iqr_pos),
            summary,
        }
    }
}
