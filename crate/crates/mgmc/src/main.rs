//! Command-line front end: synthetic data generation, training, imputation,
//! experiment evaluation, hyperparameter search, and report re-aggregation.

use clap::{Args, Parser, Subcommand};
use mgmc::autodiff::Tape;
use mgmc::baselines::{knn_impute, mean_impute, ImputedMatrix};
use mgmc::data::{
    apply_availability, assign_splits, dataset_schema, generate_synthetic, load_csv,
    write_dataset_csv, write_truth_csv, AssembledData, MaskedDataset, Schema, SyntheticSpec,
};
use mgmc::experiment::{
    run_experiment, score_classification, CellResult, ExperimentConfig, ExperimentReport, Method,
};
use mgmc::graph::PopulationGraph;
use mgmc::matrix::Matrix;
use mgmc::train::{hyper_search, train, SearchSpace, TrainConfig, TrainData};
use mgmc::{MgmcError, Result};
use std::fs::File;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "mgmc",
    version,
    about = "Multigraph geometric matrix completion: joint imputation and \
             transductive classification over population graphs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clustered dataset with ground-truth features
    Generate(GenerateArgs),
    /// Train a model on a dataset and save its parameters
    Train(TrainArgs),
    /// Fill the missing entries of a dataset and write the result
    Impute(ImputeArgs),
    /// Run the fold x availability x method experiment grid
    Evaluate(EvaluateArgs),
    /// Random hyperparameter search scored by validation cross-entropy
    Search(SearchArgs),
    /// Re-aggregate a per-cell CSV into a summary
    Report(ReportArgs),
}

// ── Shared argument blocks ──────────────────────────────────────────────────

#[derive(Args)]
struct DatasetArgs {
    /// Dataset CSV with a header row
    #[arg(long)]
    dataset: PathBuf,
    /// JSON sidecar declaring feature / meta / label columns
    #[arg(long)]
    schema: PathBuf,
}

#[derive(Args)]
struct HyperArgs {
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    /// Early-stopping patience in epochs
    #[arg(long, default_value_t = 30)]
    patience: usize,
    /// Recurrent unroll steps
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Chebyshev polynomial order
    #[arg(long, default_value_t = 3)]
    cheb_order: usize,
    #[arg(long, default_value_t = 32)]
    hidden_dim: usize,
    /// Graph-smoothness weight
    #[arg(long, default_value_t = 1.0)]
    gamma_a: f64,
    /// Observed-entry reconstruction weight
    #[arg(long, default_value_t = 1.0)]
    gamma_b: f64,
    /// Classification weight
    #[arg(long, default_value_t = 1.0)]
    gamma_c: f64,
    /// Attention projection width
    #[arg(long, default_value_t = 16)]
    a_dim: usize,
    /// Drop the convolution bias term
    #[arg(long)]
    no_cheb_bias: bool,
    /// Recompute the convolution input from the running output each step
    #[arg(long)]
    autoregressive: bool,
}

impl HyperArgs {
    fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            patience: self.patience,
            steps: self.steps,
            cheb_order: self.cheb_order,
            hidden_dim: self.hidden_dim,
            gamma_a: self.gamma_a,
            gamma_b: self.gamma_b,
            gamma_c: self.gamma_c,
            a_dim: self.a_dim,
            cheb_bias: !self.no_cheb_bias,
            seed,
            autoregressive: self.autoregressive,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Directory for dataset.csv, schema.json, and truth.csv
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 300)]
    rows: usize,
    #[arg(long, default_value_t = 40)]
    features: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Latent rank of the feature matrix
    #[arg(long, default_value_t = 2)]
    rank: usize,
    /// Feature noise level
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    /// Number of meta columns (one population graph each)
    #[arg(long, default_value_t = 3)]
    meta: usize,
    /// Probability that a meta value matches the row's cluster
    #[arg(long, default_value_t = 0.9)]
    rho: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Seed for the split, masking, and parameter init
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Percent of observed feature entries to keep (for stress tests)
    #[arg(long, default_value_t = 100.0)]
    availability: f64,
    /// Where to write the trained parameters
    #[arg(long, default_value = "model.mgmc")]
    model_out: PathBuf,
    /// Optional per-epoch loss CSV
    #[arg(long)]
    log_out: Option<PathBuf>,
}

#[derive(Args)]
struct ImputeArgs {
    #[command(flatten)]
    data: DatasetArgs,
    /// Imputer: mean, knn, or mgmc
    #[arg(long, default_value = "mean")]
    method: String,
    /// Neighbour count for knn
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV with every feature entry filled
    #[arg(long, default_value = "imputed.csv")]
    out: PathBuf,
    /// Output CSV marking which entries were imputed (1) vs original (0)
    #[arg(long, default_value = "imputed_mask.csv")]
    mask_out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Comma-separated methods: mgmc, mgmc-autoregressive, gmc, gcn+mean,
    /// lr+mean, lr+knn
    #[arg(long, alias = "method", value_delimiter = ',', default_value = "mgmc,lr+mean")]
    methods: Vec<String>,
    /// Comma-separated availability percentages
    #[arg(long, value_delimiter = ',', default_value = "100,75,50,25")]
    levels: Vec<f64>,
    /// Repeated stratified re-splits
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Neighbour count for the knn imputer
    #[arg(long, default_value_t = 5)]
    knn_k: usize,
    /// Directory for cells.csv and summary.json
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Number of random configurations to try
    #[arg(long, default_value_t = 120)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Percent of observed feature entries to keep
    #[arg(long, default_value_t = 100.0)]
    availability: f64,
    /// Trial table CSV
    #[arg(long, default_value = "trials.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Per-cell CSV produced by `evaluate`
    #[arg(long)]
    cells: PathBuf,
    /// Optional summary JSON output path (stdout table is always printed)
    #[arg(long)]
    out: Option<PathBuf>,
}

// ── Helpers ─────────────────────────────────────────────────────────────────

fn percent_to_fraction(percent: f64) -> Result<f64> {
    if !(percent > 0.0 && percent <= 100.0) {
        return Err(MgmcError::Config(format!(
            "availability must be in (0, 100] percent, got {percent}"
        )));
    }
    Ok(percent / 100.0)
}

/// A dataset loaded from disk with splits assigned and availability applied,
/// plus everything derived from it that training needs.
struct Prepared {
    dataset: MaskedDataset,
    assembled: AssembledData,
    graphs: Vec<PopulationGraph>,
    laplacians: Vec<Matrix>,
    rescaled: Vec<Matrix>,
}

impl Prepared {
    fn load(data: &DatasetArgs, seed: u64, availability_percent: f64) -> Result<Self> {
        let schema = Schema::load(&data.schema)?;
        let dataset = load_csv(&data.dataset, &schema)?;
        let dataset = assign_splits(&dataset, seed)?;
        let level = percent_to_fraction(availability_percent)?;
        let dataset = apply_availability(&dataset, level, seed.wrapping_add(1))?;
        let assembled = dataset.assemble()?;
        let graphs = dataset.build_graphs()?;
        let laplacians = graphs.iter().map(|g| g.laplacian.clone()).collect();
        let rescaled = graphs.iter().map(|g| g.rescaled.clone()).collect();
        Ok(Self { dataset, assembled, graphs, laplacians, rescaled })
    }

    fn train_data(&self) -> TrainData<'_> {
        TrainData {
            z: &self.assembled.z,
            masks: &self.assembled.masks,
            label_cols: self.assembled.label_cols,
            laplacians: &self.laplacians,
            rescaled: &self.rescaled,
            val_rows: &self.assembled.val_rows,
            val_targets: &self.assembled.val_targets,
        }
    }
}

fn create_parent_dirs(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn print_summary_table(report: &ExperimentReport) {
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    println!(
        "{:<20} {:>6} {:>10} {:>10} {:>10} {:>9}",
        "method", "avail", "accuracy", "auc", "rmse", "failures"
    );
    for (method, levels) in report.summary() {
        for (level, cell) in levels {
            println!(
                "{:<20} {:>6} {:>10} {:>10} {:>10} {:>6}/{:<2}",
                method,
                level,
                fmt(cell.accuracy.median),
                fmt(cell.auc.median),
                fmt(cell.rmse.median),
                cell.failures,
                cell.cells
            );
        }
    }
}

/// Parse a per-cell CSV written by [`ExperimentReport::write_cells_csv`].
fn parse_cells_csv(reader: impl std::io::Read) -> Result<Vec<CellResult>> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut cells = Vec::new();
    for (i, record) in csv.records().enumerate() {
        let record =
            record.map_err(|e| MgmcError::Data(format!("cells row {}: {e}", i + 1)))?;
        let field = |j: usize| record.get(j).unwrap_or("").to_string();
        let opt_f64 = |j: usize| -> Result<Option<f64>> {
            let s = field(j);
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|_| MgmcError::Data(format!("cells row {}: bad number '{s}'", i + 1)))
        };
        let availability = field(2)
            .parse::<f64>()
            .map_err(|_| MgmcError::Data(format!("cells row {}: bad availability", i + 1)))?
            / 100.0;
        let error = field(6);
        cells.push(CellResult {
            method: field(0).parse()?,
            fold: field(1)
                .parse()
                .map_err(|_| MgmcError::Data(format!("cells row {}: bad fold", i + 1)))?,
            availability,
            accuracy: opt_f64(3)?,
            auc: opt_f64(4)?,
            rmse: opt_f64(5)?,
            error: (!error.is_empty()).then_some(error),
        });
    }
    Ok(cells)
}

// ── Subcommands ─────────────────────────────────────────────────────────────

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n: args.rows,
        m: args.features,
        c: args.classes,
        rank: args.rank,
        sigma: args.sigma,
        num_meta: args.meta,
        rho: args.rho,
        seed: args.seed,
    };
    let dataset = generate_synthetic(&spec)?;
    std::fs::create_dir_all(&args.out_dir)?;

    let csv_path = args.out_dir.join("dataset.csv");
    write_dataset_csv(&dataset, File::create(&csv_path)?)?;
    let schema_path = args.out_dir.join("schema.json");
    let schema = dataset_schema(&dataset);
    serde_json::to_writer_pretty(File::create(&schema_path)?, &schema)
        .map_err(|e| MgmcError::Data(format!("schema write failed: {e}")))?;
    let truth_path = args.out_dir.join("truth.csv");
    write_truth_csv(&dataset, File::create(&truth_path)?)?;

    println!(
        "generated {} rows x {} features, {} classes, {} meta columns",
        spec.n, spec.m, spec.c, spec.num_meta
    );
    for path in [&csv_path, &schema_path, &truth_path] {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let prepared = Prepared::load(&args.data, args.seed, args.availability)?;
    let config = args.hyper.to_config(args.seed);
    let (model, log) = train(&prepared.train_data(), &config)?;

    create_parent_dirs(&args.model_out)?;
    model.save_to_path(&args.model_out)?;
    if let Some(log_path) = &args.log_out {
        create_parent_dirs(log_path)?;
        log.write_csv(File::create(log_path)?)?;
        println!("wrote {}", log_path.display());
    }

    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &prepared.assembled.z, &prepared.rescaled)?;
    let fused = tape.value(fwd.fused).clone();
    let probabilities = model.class_probabilities(&fused)?;
    let (acc, auc) = score_classification(&probabilities, &prepared.dataset)?;

    println!(
        "trained on {} graphs for {} epochs{}; best epoch {} (validation CE {:.6})",
        prepared.graphs.len(),
        log.epochs.len(),
        if log.stopped_early { " (stopped early)" } else { "" },
        log.best_epoch,
        log.best_val_ce
    );
    println!("test accuracy {acc:.4}, test AUC {auc:.4}");
    let held_out = prepared.dataset.held_out_entries();
    if !held_out.is_empty() {
        let m = prepared.dataset.m();
        let mut truth = Matrix::zeros(prepared.dataset.n(), m);
        for &(r, c) in &held_out {
            truth.set(r, c, prepared.assembled.standardize(prepared.dataset.x.get(r, c), c));
        }
        let x_hat = fused.slice_cols(0, m)?;
        if let Some(rmse) = mgmc::metrics::masked_rmse(&x_hat, &truth, &held_out)? {
            println!("held-out imputation RMSE {rmse:.4} ({} entries)", held_out.len());
        }
    }
    println!("wrote {}", args.model_out.display());
    Ok(())
}

fn cmd_impute(args: &ImputeArgs) -> Result<()> {
    let prepared = Prepared::load(&args.data, args.seed, 100.0)?;
    let dataset = &prepared.dataset;
    let assembled = &prepared.assembled;
    let train_rows = dataset.rows_in(mgmc::data::Split::Train);
    let x_std = assembled.x_std()?;

    let filled_std: ImputedMatrix = match args.method.as_str() {
        "mean" => mean_impute(&x_std, &dataset.observed, &train_rows)?,
        "knn" => knn_impute(&x_std, &dataset.observed, args.k, &train_rows)?,
        "mgmc" => {
            let config = args.hyper.to_config(args.seed);
            let (model, _) = train(&prepared.train_data(), &config)?;
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &assembled.z, &prepared.rescaled)?;
            let fused = tape.value(fwd.fused).clone();
            let predictions = fused.slice_cols(0, dataset.m())?;
            let mut x_filled = x_std.clone();
            let mut imputed = Matrix::zeros(dataset.n(), dataset.m());
            for r in 0..dataset.n() {
                for c in 0..dataset.m() {
                    if dataset.observed.get(r, c) == 0.0 {
                        x_filled.set(r, c, predictions.get(r, c));
                        imputed.set(r, c, 1.0);
                    }
                }
            }
            ImputedMatrix { x_filled, imputed }
        }
        other => {
            return Err(MgmcError::Config(format!(
                "unknown imputer '{other}'; valid: mean, knn, mgmc"
            )))
        }
    };

    // Back to the raw scale; observed entries keep their original values.
    let mut x_out = dataset.x.clone();
    for r in 0..dataset.n() {
        for c in 0..dataset.m() {
            if dataset.observed.get(r, c) == 0.0 {
                let raw = filled_std.x_filled.get(r, c) * assembled.col_std[c]
                    + assembled.col_mean[c];
                x_out.set(r, c, raw);
            }
        }
    }

    create_parent_dirs(&args.out)?;
    create_parent_dirs(&args.mask_out)?;
    let write_matrix = |path: &Path, matrix: &Matrix| -> Result<()> {
        let mut w = csv::Writer::from_writer(File::create(path)?);
        w.write_record(&dataset.feature_names)
            .map_err(|e| MgmcError::Data(format!("CSV write failed: {e}")))?;
        for r in 0..matrix.rows() {
            let record: Vec<String> =
                (0..matrix.cols()).map(|c| matrix.get(r, c).to_string()).collect();
            w.write_record(&record)
                .map_err(|e| MgmcError::Data(format!("CSV write failed: {e}")))?;
        }
        w.flush()?;
        Ok(())
    };
    write_matrix(&args.out, &x_out)?;
    write_matrix(&args.mask_out, &filled_std.imputed)?;

    let imputed_count = filled_std.imputed.sum() as usize;
    println!("imputed {imputed_count} entries with '{}'", args.method);
    println!("wrote {}", args.out.display());
    println!("wrote {}", args.mask_out.display());
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let schema = Schema::load(&args.data.schema)?;
    let dataset = load_csv(&args.data.dataset, &schema)?;
    let methods = args
        .methods
        .iter()
        .map(|s| s.parse::<Method>())
        .collect::<Result<Vec<_>>>()?;
    let levels = args
        .levels
        .iter()
        .map(|&p| percent_to_fraction(p))
        .collect::<Result<Vec<_>>>()?;
    let config = ExperimentConfig {
        methods,
        levels,
        folds: args.folds,
        seed: args.seed,
        train: args.hyper.to_config(args.seed),
        knn_k: args.knn_k,
    };
    let report = run_experiment(&dataset, &config)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let cells_path = args.out_dir.join("cells.csv");
    report.write_cells_csv(File::create(&cells_path)?)?;
    let summary_path = args.out_dir.join("summary.json");
    report.write_summary_json(File::create(&summary_path)?)?;

    print_summary_table(&report);
    println!("wrote {}", cells_path.display());
    println!("wrote {}", summary_path.display());

    let failures = report.cells.iter().filter(|c| c.error.is_some()).count();
    if failures > 0 {
        log::warn!("{failures} of {} cells failed; see cells.csv", report.cells.len());
    }
    Ok(())
}

fn cmd_search(args: &SearchArgs) -> Result<()> {
    let prepared = Prepared::load(&args.data, args.seed, args.availability)?;
    let space = SearchSpace { base: args.hyper.to_config(args.seed), ..Default::default() };
    let (best, trials) = hyper_search(&prepared.train_data(), &space, args.budget, args.seed)?;

    create_parent_dirs(&args.out)?;
    mgmc::train::write_trial_table(&trials, File::create(&args.out)?)?;

    let succeeded = trials.iter().filter(|t| t.error.is_none()).count();
    println!("{succeeded}/{} trials succeeded", trials.len());
    let best_trial = trials
        .iter()
        .filter(|t| t.error.is_none())
        .min_by(|a, b| a.val_ce.partial_cmp(&b.val_ce).unwrap())
        .expect("hyper_search guarantees a successful trial");
    println!("best validation CE {:.6}", best_trial.val_ce);
    let json = serde_json::to_string_pretty(&best)
        .map_err(|e| MgmcError::Data(format!("config serialization failed: {e}")))?;
    println!("best configuration:\n{json}");
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let cells = parse_cells_csv(File::open(&args.cells)?)?;
    if cells.is_empty() {
        return Err(MgmcError::Data("cells CSV has no rows".into()));
    }
    let report = ExperimentReport { cells };
    print_summary_table(&report);
    if let Some(out) = &args.out {
        create_parent_dirs(out)?;
        report.write_summary_json(File::create(out)?)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Impute(args) => cmd_impute(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Search(args) => cmd_search(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error ({}): {e}", e.category());
        std::process::exit(e.exit_code());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mgmc::experiment::format_level;

    #[test]
    fn percent_parsing() {
        assert_eq!(percent_to_fraction(100.0).unwrap(), 1.0);
        assert_eq!(percent_to_fraction(25.0).unwrap(), 0.25);
        assert!(percent_to_fraction(0.0).is_err());
        assert!(percent_to_fraction(101.0).is_err());
    }

    #[test]
    fn cells_csv_round_trips() {
        let report = ExperimentReport {
            cells: vec![
                CellResult {
                    method: Method::LrMean,
                    fold: 0,
                    availability: 0.5,
                    accuracy: Some(0.875),
                    auc: Some(0.9125),
                    rmse: Some(1.0625),
                    error: None,
                },
                CellResult {
                    method: Method::Gmc,
                    fold: 3,
                    availability: 1.0,
                    accuracy: None,
                    auc: None,
                    rmse: None,
                    error: Some("class 2 has no labeled training rows".into()),
                },
            ],
        };
        let mut bytes = Vec::new();
        report.write_cells_csv(&mut bytes).unwrap();
        let back = parse_cells_csv(bytes.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].method, Method::LrMean);
        assert_eq!(back[0].availability, 0.5);
        assert_eq!(back[0].accuracy, Some(0.875));
        assert_eq!(back[0].rmse, Some(1.0625));
        assert!(back[0].error.is_none());
        assert_eq!(back[1].fold, 3);
        assert_eq!(back[1].accuracy, None);
        assert!(back[1].error.as_deref().unwrap().contains("class 2"));
        assert_eq!(format_level(back[1].availability), "100");
    }

    #[test]
    fn cli_parses_evaluate_flags() {
        let cli = Cli::try_parse_from([
            "mgmc",
            "evaluate",
            "--dataset",
            "d.csv",
            "--schema",
            "s.json",
            "--methods",
            "mgmc,lr+knn",
            "--levels",
            "100,50",
            "--folds",
            "3",
            "--out-dir",
            "out",
        ])
        .unwrap();
        match cli.command {
            Command::Evaluate(args) => {
                assert_eq!(args.methods, vec!["mgmc", "lr+knn"]);
                assert_eq!(args.levels, vec![100.0, 50.0]);
                assert_eq!(args.folds, 3);
            }
            _ => panic!("parsed the wrong subcommand"),
        }
    }
}
