//! Classification metrics and the threshold x variant x seed sweep that
//! produces the accuracy/energy trade-off tables as CSV.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::cascade::{run, CascadeConfig, CascadeError, ClipRefresh, ClipSource, ModelKind};
use crate::energy::{estimate, CostModel, EnergyError};
use crate::frameio::{make_variant, DatasetVariant, FrameSeq};
use crate::trigger::{TriggerConfig, TriggerError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction and label lengths differ: {preds} vs {labels}")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error("labels contain a single class; balanced accuracy is undefined")]
    SingleClass,
    #[error("sweep needs at least one {0}")]
    MissingInput(&'static str),
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Trigger(#[from] TriggerError),
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Binary confusion counts; the positive class is "violation".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub true_pos: usize,
    pub false_pos: usize,
    pub true_neg: usize,
    pub false_neg: usize,
}

impl ConfusionMatrix {
    pub fn from_preds(preds: &[bool], labels: &[bool]) -> Result<Self, EvalError> {
        if preds.len() != labels.len() {
            return Err(EvalError::LengthMismatch {
                preds: preds.len(),
                labels: labels.len(),
            });
        }
        if preds.is_empty() {
            return Err(EvalError::Empty);
        }
        let mut cm = ConfusionMatrix {
            true_pos: 0,
            false_pos: 0,
            true_neg: 0,
            false_neg: 0,
        };
        for (&p, &l) in preds.iter().zip(labels) {
            match (p, l) {
                (true, true) => cm.true_pos += 1,
                (true, false) => cm.false_pos += 1,
                (false, false) => cm.true_neg += 1,
                (false, true) => cm.false_neg += 1,
            }
        }
        Ok(cm)
    }

    pub fn total(&self) -> usize {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    pub fn accuracy(&self) -> f64 {
        (self.true_pos + self.true_neg) as f64 / self.total() as f64
    }

    /// Mean of the per-class recalls; requires both classes present.
    pub fn balanced_accuracy(&self) -> Result<f64, EvalError> {
        let pos = self.true_pos + self.false_neg;
        let neg = self.true_neg + self.false_pos;
        if pos == 0 || neg == 0 {
            return Err(EvalError::SingleClass);
        }
        let recall_pos = self.true_pos as f64 / pos as f64;
        let recall_neg = self.true_neg as f64 / neg as f64;
        Ok((recall_pos + recall_neg) / 2.0)
    }

    /// F1 of the violation class; 0 when no positives exist anywhere.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.true_pos + self.false_pos + self.false_neg;
        if denom == 0 {
            return 0.0;
        }
        2.0 * self.true_pos as f64 / denom as f64
    }
}

/// Sweep-wide settings; the threshold is the swept quantity and lives
/// outside.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub trigger_window: usize,
    pub strict: bool,
    pub clip_source: ClipSource,
    pub refresh: ClipRefresh,
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            trigger_window: 8,
            strict: false,
            clip_source: ClipSource::GroundTruth,
            refresh: ClipRefresh::Online,
            workers: 1,
        }
    }
}

/// One (variant, threshold, seed) evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub variant: DatasetVariant,
    pub threshold: u32,
    pub seed: u64,
    pub bal_acc: f64,
    pub acc: f64,
    pub f1: f64,
    pub invocation_rate: f64,
    pub avg_energy: f64,
    pub savings: f64,
}

impl SweepRow {
    fn metrics(&self) -> [f64; 6] {
        [
            self.bal_acc,
            self.acc,
            self.f1,
            self.invocation_rate,
            self.avg_energy,
            self.savings,
        ]
    }
}

/// Per-(variant, threshold) mean and standard deviation over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAgg {
    pub variant: DatasetVariant,
    pub threshold: u32,
    pub mean: [f64; 6],
    pub std: [f64; 6],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub aggregates: Vec<SweepAgg>,
}

const METRIC_NAMES: [&str; 6] = [
    "bal_acc",
    "acc",
    "f1",
    "invocation_rate",
    "avg_energy_uJ",
    "savings",
];

/// Evaluate every (variant, threshold, seed) cell: build the variant
/// stream, run the cascade from a cold start, and compute classification
/// metrics plus modeled energy. Cells run on `cfg.workers` threads; row
/// order is independent of the worker count.
pub fn sweep(
    models: &[(u64, ModelKind)],
    test: &FrameSeq,
    thresholds: &[u32],
    variants: &[DatasetVariant],
    cost: &CostModel,
    cfg: &SweepConfig,
) -> Result<SweepReport, EvalError> {
    if models.is_empty() {
        return Err(EvalError::MissingInput("model"));
    }
    if test.is_empty() {
        return Err(EvalError::MissingInput("test frame"));
    }
    if thresholds.is_empty() {
        return Err(EvalError::MissingInput("threshold"));
    }
    if variants.is_empty() {
        return Err(EvalError::MissingInput("variant"));
    }
    for &t in thresholds {
        TriggerConfig::new(cfg.trigger_window, t)?;
    }

    // Keep one row per (variant, threshold, seed) even if inputs repeat.
    let variants = dedup_preserving(variants);
    let thresholds = dedup_preserving(thresholds);

    let streams: Vec<FrameSeq> = variants.iter().map(|&v| make_variant(test, v)).collect();

    // Cell list in output order: variant (as given), threshold, seed.
    struct Cell {
        variant_idx: usize,
        threshold: u32,
        model_idx: usize,
    }
    let mut cells = Vec::new();
    for (variant_idx, _) in variants.iter().enumerate() {
        for &threshold in &thresholds {
            for (model_idx, _) in models.iter().enumerate() {
                cells.push(Cell {
                    variant_idx,
                    threshold,
                    model_idx,
                });
            }
        }
    }

    let eval_cell = |cell: &Cell| -> Result<SweepRow, EvalError> {
        let stream = &streams[cell.variant_idx];
        let (seed, model) = &models[cell.model_idx];
        let mut trigger = TriggerConfig::new(cfg.trigger_window, cell.threshold)?;
        trigger.strict = cfg.strict;
        let cascade_cfg = CascadeConfig {
            trigger,
            clip_source: cfg.clip_source,
            refresh: cfg.refresh,
            model: model.clone(),
        };
        let trace = run(stream, &cascade_cfg)?;
        let cm = ConfusionMatrix::from_preds(&trace.predictions(), &trace.labels)?;
        let report = estimate(&trace, cost)?;
        Ok(SweepRow {
            variant: variants[cell.variant_idx],
            threshold: cell.threshold,
            seed: *seed,
            bal_acc: cm.balanced_accuracy()?,
            acc: cm.accuracy(),
            f1: cm.f1(),
            invocation_rate: report.invocation_rate,
            avg_energy: report.avg_energy,
            savings: report.savings_vs_static,
        })
    };

    let workers = cfg.workers.max(1).min(cells.len());
    let mut slots: Vec<Option<Result<SweepRow, EvalError>>> = Vec::new();
    slots.resize_with(cells.len(), || None);
    if workers <= 1 {
        for (slot, cell) in slots.iter_mut().zip(&cells) {
            *slot = Some(eval_cell(cell));
        }
    } else {
        // Contiguous chunks per worker; slot order fixes the row order
        // regardless of scheduling.
        let chunk = cells.len().div_ceil(workers);
        std::thread::scope(|scope| {
            for (cell_chunk, slot_chunk) in cells.chunks(chunk).zip(slots.chunks_mut(chunk)) {
                let eval_cell = &eval_cell;
                scope.spawn(move || {
                    for (cell, slot) in cell_chunk.iter().zip(slot_chunk.iter_mut()) {
                        *slot = Some(eval_cell(cell));
                    }
                });
            }
        });
    }

    let mut rows = Vec::with_capacity(cells.len());
    for slot in slots {
        rows.push(slot.expect("cell evaluated")?);
    }

    let aggregates = aggregate(&rows, &variants, &thresholds);
    Ok(SweepReport { rows, aggregates })
}

fn dedup_preserving<T: Copy + PartialEq>(items: &[T]) -> Vec<T> {
    let mut out: Vec<T> = Vec::with_capacity(items.len());
    for &item in items {
        if !out.contains(&item) {
            out.push(item);
        }
    }
    out
}

fn aggregate(rows: &[SweepRow], variants: &[DatasetVariant], thresholds: &[u32]) -> Vec<SweepAgg> {
    let mut out = Vec::new();
    for &variant in variants {
        for &threshold in thresholds {
            let cell: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.variant == variant && r.threshold == threshold)
                .collect();
            if cell.is_empty() {
                continue;
            }
            let n = cell.len() as f64;
            let mut mean = [0.0; 6];
            for row in &cell {
                for (m, v) in mean.iter_mut().zip(row.metrics()) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut std = [0.0; 6];
            for row in &cell {
                for (s, (v, m)) in std.iter_mut().zip(row.metrics().into_iter().zip(mean)) {
                    *s += (v - m) * (v - m);
                }
            }
            std.iter_mut().for_each(|s| *s = (*s / n).sqrt());
            out.push(SweepAgg {
                variant,
                threshold,
                mean,
                std,
            });
        }
    }
    out
}

/// Format with 6 significant digits, plain decimal notation.
pub fn fmt_sig(x: f64) -> String {
    const SIG: i32 = 6;
    if x == 0.0 {
        return "0.00000".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (SIG - 1 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Rows CSV, schema `variant,threshold,seed,bal_acc,acc,f1,invocation_rate,avg_energy_uJ,savings`.
pub fn rows_csv(report: &SweepReport) -> String {
    let mut out = String::from("variant,threshold,seed,");
    out.push_str(&METRIC_NAMES.join(","));
    out.push('\n');
    for row in &report.rows {
        out.push_str(&format!("{},{},{}", row.variant, row.threshold, row.seed));
        for v in row.metrics() {
            out.push(',');
            out.push_str(&fmt_sig(v));
        }
        out.push('\n');
    }
    out
}

/// Aggregate CSV with `_mean`/`_std` suffixed columns per metric.
pub fn agg_csv(report: &SweepReport) -> String {
    let mut out = String::from("variant,threshold");
    for name in METRIC_NAMES {
        out.push_str(&format!(",{name}_mean,{name}_std"));
    }
    out.push('\n');
    for agg in &report.aggregates {
        out.push_str(&format!("{},{}", agg.variant, agg.threshold));
        for i in 0..6 {
            out.push(',');
            out.push_str(&fmt_sig(agg.mean[i]));
            out.push(',');
            out.push_str(&fmt_sig(agg.std[i]));
        }
        out.push('\n');
    }
    out
}

pub fn write_rows_csv(report: &SweepReport, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let path = path.as_ref();
    fs::write(path, rows_csv(report)).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_agg_csv(report: &SweepReport, path: impl AsRef<Path>) -> Result<(), EvalError> {
    let path = path.as_ref();
    fs::write(path, agg_csv(report)).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}
