//! Experiment grids: the variant × sampler matrix and the retention sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::task::{Split, Subset};
use super::train::{evaluate, train_cb, TrainConfig, Trained, WerReport, Workbench};
use crate::biasing::{LecbModel, Variant};
use crate::error::Result;
use crate::sampling::Method;

/// Trained cells of the matrix: every pair is run with SMa, SMb and SMc.
pub const MATRIX_CELLS: [(Variant, f64); 5] = [
    (Variant::BaselineNam, 1.0),
    (Variant::LecbV1, 1.0),
    (Variant::LecbV2, 1.0),
    (Variant::LecbV1, 0.5),
    (Variant::CbC, 1.0),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub variant: Variant,
    /// Training sampler; `None` for the untrained no-CB row.
    pub sampler: Option<Method>,
    pub lambda: f64,
    pub report: WerReport,
    /// Mean relative WER reduction over subsets against `baseline_nam`
    /// trained with the same sampler.
    pub rwerr: Option<f64>,
}

impl MatrixRow {
    pub const CSV_HEADER: &'static str = "variant,sampler,lambda,clean,rare,ood,overall,rwerr";

    pub fn csv_line(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        format!(
            "{},{},{},{},{},{},{:.6},{}",
            self.variant,
            self.sampler.map_or("-".to_string(), |m| m.to_string()),
            self.lambda,
            f(self.report.subset(Subset::Clean)),
            f(self.report.subset(Subset::Rare)),
            f(self.report.subset(Subset::Ood)),
            self.report.overall,
            f(self.rwerr)
        )
    }
}

/// `(base - wer) / base`, undefined for a zero baseline.
pub fn relative_reduction(base: f64, wer: f64) -> Option<f64> {
    (base > 0.0).then(|| (base - wer) / base)
}

fn mean_reduction(base: &WerReport, row: &WerReport) -> Option<f64> {
    let r: Vec<f64> = Subset::ALL
        .iter()
        .filter_map(|&s| relative_reduction(base.subset(s)?, row.subset(s)?))
        .collect();
    (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
}

fn untrained_none(bench: &Workbench, base: &TrainConfig) -> Result<WerReport> {
    let cfg = TrainConfig {
        variant: Variant::None,
        ..*base
    };
    let model = LecbModel::new(cfg.model_config(bench.d_a), bench.task.vocab.len())?;
    let params = model.init(0)?;
    evaluate(bench, &Trained { model: &model, params: &params }, Split::Test, &cfg)
}

/// Trains every matrix cell and evaluates all of them on the test split.
pub fn run_matrix(bench: &Workbench, base: &TrainConfig) -> Result<Vec<MatrixRow>> {
    let cells: Vec<(Variant, f64, Method)> = MATRIX_CELLS
        .iter()
        .flat_map(|&(v, l)| Method::TRAINING.into_iter().map(move |m| (v, l, m)))
        .collect();
    let trained: Vec<MatrixRow> = cells
        .par_iter()
        .map(|&(variant, lambda, method)| {
            let cfg = TrainConfig {
                variant,
                lambda,
                method,
                ..*base
            };
            let run = train_cb(bench, &cfg)?;
            let report = evaluate(bench, &Trained { model: &run.model, params: &run.params }, Split::Test, &cfg)?;
            Ok(MatrixRow {
                variant,
                sampler: Some(method),
                lambda,
                report,
                rwerr: None,
            })
        })
        .collect::<Result<_>>()?;
    let mut rows = vec![MatrixRow {
        variant: Variant::None,
        sampler: None,
        lambda: 0.0,
        report: untrained_none(bench, base)?,
        rwerr: None,
    }];
    for mut row in trained.iter().cloned() {
        let base_row = trained
            .iter()
            .find(|r| r.variant == Variant::BaselineNam && r.sampler == row.sampler);
        row.rwerr = base_row.and_then(|b| mean_reduction(&b.report, &row.report));
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub retention: f64,
    pub rare_wer: f64,
    pub overall: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "retention,rare_wer,overall_wer";

    pub fn csv_line(&self) -> String {
        format!("{},{:.6},{:.6}", self.retention, self.rare_wer, self.overall)
    }
}

/// Trains `base` once per retention probability and reports test WER.
pub fn retention_sweep(bench: &Workbench, base: &TrainConfig, probs: &[f64]) -> Result<Vec<SweepRow>> {
    probs
        .par_iter()
        .map(|&p| {
            let cfg = TrainConfig { retention: p, ..*base };
            let run = train_cb(bench, &cfg)?;
            let report = evaluate(bench, &Trained { model: &run.model, params: &run.params }, Split::Test, &cfg)?;
            Ok(SweepRow {
                retention: p,
                rare_wer: report.subset(Subset::Rare).unwrap_or(f64::NAN),
                overall: report.overall,
            })
        })
        .collect()
}
