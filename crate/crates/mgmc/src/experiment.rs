//! Repeated-holdout experiment harness: for every fold x availability level x
//! method it re-splits the data, masks feature entries, trains, and scores
//! accuracy, macro ROC-AUC, and held-out imputation RMSE. Cells run in a
//! worker pool; reports are assembled deterministically from the cell
//! coordinates, so a fixed seed yields byte-identical report files.

use crate::baselines::{gcn_classifier, knn_impute, mean_impute, softmax_regression, GcnConfig};
use crate::data::{apply_availability, assign_splits, MaskedDataset, Split};
use crate::error::{MgmcError, Result};
use crate::matrix::Matrix;
use crate::metrics::{accuracy, argmax_classes, masked_rmse, roc_auc};
use crate::train::{train, TrainConfig, TrainData};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

/// Adam settings for the softmax-regression baselines.
const LR_LEARNING_RATE: f64 = 0.05;
const LR_EPOCHS: usize = 300;

// ── Methods ─────────────────────────────────────────────────────────────────

/// An end-to-end pipeline competing in the experiment: either the multigraph
/// model (with variants) or an imputer/classifier pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Multigraph completion over all graphs.
    Mgmc,
    /// Same, recomputing the convolution input each recurrent step.
    MgmcAutoregressive,
    /// Single-graph completion; the graph with the best validation
    /// cross-entropy wins.
    Gmc,
    /// Mean imputation, then a single-graph convolutional classifier.
    GcnMean,
    /// Mean imputation, then softmax regression on features + meta.
    LrMean,
    /// k-nearest-neighbour imputation, then softmax regression.
    LrKnn,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Mgmc,
        Method::MgmcAutoregressive,
        Method::Gmc,
        Method::GcnMean,
        Method::LrMean,
        Method::LrKnn,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Mgmc => "mgmc",
            Method::MgmcAutoregressive => "mgmc-autoregressive",
            Method::Gmc => "gmc",
            Method::GcnMean => "gcn+mean",
            Method::LrMean => "lr+mean",
            Method::LrKnn => "lr+knn",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = MgmcError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| {
                let valid: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                MgmcError::Config(format!("unknown method '{s}'; valid: {}", valid.join(", ")))
            })
    }
}

// ── Configuration and results ───────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    /// Availability fractions in (0, 1].
    pub levels: Vec<f64>,
    /// Number of repeated stratified re-splits.
    pub folds: usize,
    pub seed: u64,
    /// Hyperparameters for the graph models; the convolutional baseline
    /// borrows its layer sizes and optimizer settings.
    pub train: TrainConfig,
    /// Neighbour count for the kNN imputer.
    pub knn_k: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::Mgmc, Method::LrMean],
            levels: vec![1.0, 0.75, 0.5, 0.25],
            folds: 10,
            seed: 0,
            train: TrainConfig::default(),
            knn_k: 5,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(MgmcError::Config("no methods selected".into()));
        }
        if self.levels.is_empty() {
            return Err(MgmcError::Config("no availability levels selected".into()));
        }
        for &level in &self.levels {
            if !(level > 0.0 && level <= 1.0) {
                return Err(MgmcError::Config(format!(
                    "availability level must be in (0, 1], got {level}"
                )));
            }
        }
        if self.folds == 0 {
            return Err(MgmcError::Config("need at least one fold".into()));
        }
        if self.knn_k == 0 {
            return Err(MgmcError::Config("knn_k must be at least 1".into()));
        }
        self.train.validate()
    }
}

/// One fold x level x method evaluation. Metrics are absent when they do
/// not apply (RMSE with nothing held out) or when the cell failed.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub method: Method,
    pub fold: usize,
    pub availability: f64,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub rmse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub cells: Vec<CellResult>,
}

// ── Cell execution ──────────────────────────────────────────────────────────

struct CellMetrics {
    accuracy: f64,
    auc: f64,
    rmse: Option<f64>,
}

fn fold_seeds(seed: u64, fold: usize) -> (u64, u64) {
    let base = seed.wrapping_add(fold as u64).wrapping_mul(2);
    (base, base.wrapping_add(1))
}

/// Accuracy and macro AUC of row probabilities restricted to test rows.
pub fn score_classification(
    probabilities: &Matrix,
    dataset: &MaskedDataset,
) -> Result<(f64, f64)> {
    let test_rows: Vec<usize> =
        (0..dataset.n()).filter(|&r| dataset.split[r] == Split::Test).collect();
    if test_rows.is_empty() {
        return Err(MgmcError::Data("split produced no test rows".into()));
    }
    let mut scores = Matrix::zeros(test_rows.len(), probabilities.cols());
    let mut truth = Vec::with_capacity(test_rows.len());
    for (i, &r) in test_rows.iter().enumerate() {
        for c in 0..probabilities.cols() {
            scores.set(i, c, probabilities.get(r, c));
        }
        truth.push(dataset.labels[r]);
    }
    let acc = accuracy(&argmax_classes(&scores), &truth)?;
    let auc = roc_auc(&scores, &truth)?;
    Ok((acc, auc))
}

fn run_cell(
    dataset: &MaskedDataset,
    method: Method,
    fold: usize,
    level: f64,
    config: &ExperimentConfig,
) -> Result<CellMetrics> {
    let (split_seed, avail_seed) = fold_seeds(config.seed, fold);
    let split_ds = assign_splits(dataset, split_seed)?;
    let masked = apply_availability(&split_ds, level, avail_seed)?;
    let asm = masked.assemble()?;
    let (n, m, c) = (masked.n(), masked.m(), masked.num_classes());
    let train_rows = masked.rows_in(Split::Train);

    // Standardized-scale truth at the held-out coordinates.
    let held_out = masked.held_out_entries();
    let mut truth_std = Matrix::zeros(n, m);
    for &(r, col) in &held_out {
        truth_std.set(r, col, asm.standardize(masked.x.get(r, col), col));
    }
    let imputation_rmse = |x_filled: &Matrix| masked_rmse(x_filled, &truth_std, &held_out);

    let mut train_config = config.train.clone();
    train_config.seed = config.train.seed.wrapping_add(fold as u64);
    train_config.autoregressive = method == Method::MgmcAutoregressive;

    match method {
        Method::Mgmc | Method::MgmcAutoregressive | Method::Gmc => {
            let graphs = masked.build_graphs()?;
            let laplacians: Vec<Matrix> = graphs.iter().map(|g| g.laplacian.clone()).collect();
            let rescaled: Vec<Matrix> = graphs.iter().map(|g| g.rescaled.clone()).collect();

            // Single-graph mode trains one model per graph and keeps the
            // best validation cross-entropy.
            let graph_sets: Vec<(Vec<Matrix>, Vec<Matrix>)> = if method == Method::Gmc {
                (0..graphs.len())
                    .map(|i| (vec![laplacians[i].clone()], vec![rescaled[i].clone()]))
                    .collect()
            } else {
                vec![(laplacians, rescaled)]
            };

            let mut best: Option<(f64, crate::model::MgmcModel, Vec<Matrix>)> = None;
            for (lap_set, resc_set) in graph_sets {
                let data = TrainData {
                    z: &asm.z,
                    masks: &asm.masks,
                    label_cols: asm.label_cols,
                    laplacians: &lap_set,
                    rescaled: &resc_set,
                    val_rows: &asm.val_rows,
                    val_targets: &asm.val_targets,
                };
                let (model, log) = train(&data, &train_config)?;
                if best.as_ref().map_or(true, |(b, _, _)| log.best_val_ce < *b) {
                    best = Some((log.best_val_ce, model, resc_set));
                }
            }
            let (_, model, resc_set) = best.expect("at least one graph set");

            let mut tape = crate::autodiff::Tape::new();
            let fwd = model.forward(&mut tape, &asm.z, &resc_set)?;
            let fused = tape.value(fwd.fused).clone();
            let probabilities = model.class_probabilities(&fused)?;
            let x_hat = fused.slice_cols(0, m)?;
            let (acc, auc) = score_classification(&probabilities, &masked)?;
            Ok(CellMetrics { accuracy: acc, auc, rmse: imputation_rmse(&x_hat)? })
        }
        Method::GcnMean => {
            let x_std = asm.x_std()?;
            let filled = mean_impute(&x_std, &masked.observed, &train_rows)?;
            let train_targets = asm.z.slice_cols(m, m + c)?;
            let gcn_config = GcnConfig {
                hidden_dim: train_config.hidden_dim,
                cheb_order: train_config.cheb_order,
                cheb_bias: train_config.cheb_bias,
                learning_rate: train_config.learning_rate,
                epochs: train_config.epochs,
                patience: train_config.patience,
                seed: train_config.seed,
            };
            // Same graph-selection rule as the single-graph model.
            let graphs = masked.build_graphs()?;
            let mut best: Option<(f64, crate::baselines::GcnFit, usize)> = None;
            for (i, graph) in graphs.iter().enumerate() {
                let fit = gcn_classifier(
                    &filled.x_filled,
                    graph,
                    &train_targets,
                    &train_rows,
                    &asm.val_targets,
                    &asm.val_rows,
                    &gcn_config,
                )?;
                if best.as_ref().map_or(true, |(b, _, _)| fit.best_val_ce < *b) {
                    best = Some((fit.best_val_ce, fit, i));
                }
            }
            let (_, fit, graph_idx) = best.expect("at least one graph");
            let probabilities = fit.classifier.predict(&filled.x_filled, &graphs[graph_idx])?;
            let (acc, auc) = score_classification(&probabilities, &masked)?;
            Ok(CellMetrics { accuracy: acc, auc, rmse: imputation_rmse(&filled.x_filled)? })
        }
        Method::LrMean | Method::LrKnn => {
            let x_std = asm.x_std()?;
            let filled = if method == Method::LrMean {
                mean_impute(&x_std, &masked.observed, &train_rows)?
            } else {
                knn_impute(&x_std, &masked.observed, config.knn_k, &train_rows)?
            };
            let features = filled.x_filled.concat_cols(&asm.meta_std)?;
            let model = softmax_regression(
                &features,
                &masked.labels,
                c,
                &train_rows,
                LR_LEARNING_RATE,
                LR_EPOCHS,
            )?;
            let probabilities = model.predict(&features)?;
            let (acc, auc) = score_classification(&probabilities, &masked)?;
            Ok(CellMetrics { accuracy: acc, auc, rmse: imputation_rmse(&filled.x_filled)? })
        }
    }
}

/// Run every fold x level x method cell in a worker pool. Failures are
/// recorded in their cell and never abort the run.
pub fn run_experiment(
    dataset: &MaskedDataset,
    config: &ExperimentConfig,
) -> Result<ExperimentReport> {
    config.validate()?;
    let mut specs = Vec::new();
    for fold in 0..config.folds {
        for &level in &config.levels {
            for &method in &config.methods {
                specs.push((fold, level, method));
            }
        }
    }
    let cells: Vec<CellResult> = specs
        .par_iter()
        .map(|&(fold, level, method)| match run_cell(dataset, method, fold, level, config) {
            Ok(metrics) => CellResult {
                method,
                fold,
                availability: level,
                accuracy: Some(metrics.accuracy),
                auc: Some(metrics.auc),
                rmse: metrics.rmse,
                error: None,
            },
            Err(e) => {
                log::warn!("cell {method}/fold {fold}/availability {level} failed: {e}");
                CellResult {
                    method,
                    fold,
                    availability: level,
                    accuracy: None,
                    auc: None,
                    rmse: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    Ok(ExperimentReport { cells })
}

// ── Report emission ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricSummary {
    pub median: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct LevelSummary {
    pub cells: usize,
    pub failures: usize,
    pub accuracy: MetricSummary,
    pub auc: MetricSummary,
    pub rmse: MetricSummary,
}

fn summarize(values: &[f64]) -> MetricSummary {
    if values.is_empty() {
        return MetricSummary { median: None, std: None };
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    };
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / sorted.len() as f64;
    MetricSummary { median: Some(median), std: Some(var.sqrt()) }
}

/// Availability level as a percent string: 0.5 -> "50".
pub fn format_level(level: f64) -> String {
    let pct = level * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}", pct.round() as i64)
    } else {
        format!("{pct}")
    }
}

impl ExperimentReport {
    /// Aggregates keyed method -> level -> per-metric {median, std}.
    pub fn summary(&self) -> BTreeMap<String, BTreeMap<String, LevelSummary>> {
        let mut grouped: BTreeMap<(String, String), Vec<&CellResult>> = BTreeMap::new();
        for cell in &self.cells {
            grouped
                .entry((cell.method.name().to_string(), format_level(cell.availability)))
                .or_default()
                .push(cell);
        }
        let mut out: BTreeMap<String, BTreeMap<String, LevelSummary>> = BTreeMap::new();
        for ((method, level), cells) in grouped {
            let pick = |f: fn(&CellResult) -> Option<f64>| -> Vec<f64> {
                cells.iter().filter_map(|c| f(c)).collect()
            };
            let summary = LevelSummary {
                cells: cells.len(),
                failures: cells.iter().filter(|c| c.error.is_some()).count(),
                accuracy: summarize(&pick(|c| c.accuracy)),
                auc: summarize(&pick(|c| c.auc)),
                rmse: summarize(&pick(|c| c.rmse)),
            };
            out.entry(method).or_default().insert(level, summary);
        }
        out
    }

    /// Per-cell CSV: one row per fold x level x method.
    pub fn write_cells_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["method", "fold", "availability", "accuracy", "auc", "rmse", "error"])
            .map_err(|e| MgmcError::Data(format!("CSV write failed: {e}")))?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for cell in &self.cells {
            w.write_record([
                cell.method.name().to_string(),
                cell.fold.to_string(),
                format_level(cell.availability),
                opt(cell.accuracy),
                opt(cell.auc),
                opt(cell.rmse),
                cell.error.clone().unwrap_or_default(),
            ])
            .map_err(|e| MgmcError::Data(format!("CSV write failed: {e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_json(&self, mut writer: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(&mut writer, &self.summary())
            .map_err(|e| MgmcError::Data(format!("JSON write failed: {e}")))?;
        writer.write_all(b"\n")?;
        Ok(())
    }
}
