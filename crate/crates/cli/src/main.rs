//! `t2d`: train, cross-validate, evaluate and apply the hybrid diabetes
//! classifier from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric or
//! training failure. Results go to stdout (or `--out`), diagnostics to stderr.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use t2d_core::config::{load_config, schema_help};
use t2d_core::data::{load_csv, load_feature_rows, synth_dataset, write_csv, FeatureMatrix};
use t2d_core::metrics::{render_report, EvaluationReport, ReportFormat, ReportRow, TimingReport};
use t2d_core::pipeline::{combined_score, cross_validate, evaluate, train_holdout, PipelineConfig, PipelineModel};
use t2d_core::{Error, ErrorKind};

#[derive(Parser)]
#[command(
    name = "t2d",
    version,
    about = "Hybrid RBF-SVM / LSTM-MLP classifier for Type 2 diabetes onset"
)]
#[command(after_help = schema_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a stratified split, evaluate on the held-out part, save the model.
    #[command(after_help = schema_help())]
    Train(TrainArgs),
    /// Stratified k-fold cross-validation; one row per fold plus the aggregate.
    #[command(after_help = schema_help())]
    Cv(CvArgs),
    /// Score a labeled CSV with a saved model.
    Evaluate(EvaluateArgs),
    /// Print `index,score,label` for every row of a CSV.
    Predict(PredictArgs),
    /// Write a two-Gaussian synthetic dataset as CSV.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ReportFormat::Json,
            Format::Table => ReportFormat::Table,
        }
    }
}

#[derive(Args)]
struct DataArgs {
    /// Labeled CSV; the last column is the 0/1 label.
    data: PathBuf,
    /// The CSV has no header row; columns are named col_1, col_2, ...
    #[arg(long)]
    no_header: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Key-value configuration file (see CONFIG FILE below).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed; overrides the config file (default 42).
    #[arg(long)]
    seed: Option<u64>,
    /// Report format.
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Include wall-clock milliseconds in JSON reports (makes them run-dependent).
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Where to write the trained model (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Number of folds; overrides the config file (default 5).
    #[arg(long)]
    folds: Option<usize>,
    /// Train folds concurrently; results are identical to a serial run.
    #[arg(long)]
    parallel: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Model file written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Include wall-clock milliseconds in JSON reports.
    #[arg(long)]
    timing: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Model file written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Headed CSV containing the model's feature columns; other columns are ignored.
    data: PathBuf,
    /// Write predictions here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of rows.
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Number of feature columns.
    #[arg(long, default_value_t = 8)]
    features: usize,
    /// Fraction of positive rows.
    #[arg(long, default_value_t = 0.35)]
    fraction: f64,
    /// Distance between the two class means.
    #[arg(long, default_value_t = 2.0)]
    separation: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            })
        }
    }
}

fn run(command: Command) -> t2d_core::Result<()> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Config file, then flag overrides, then validation.
fn resolve_config(run: &RunArgs, folds: Option<usize>) -> t2d_core::Result<PipelineConfig> {
    let mut cfg = match &run.config {
        Some(path) => load_config(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    if let Some(k) = folds {
        cfg.folds = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(d: &DataArgs) -> t2d_core::Result<FeatureMatrix> {
    load_csv(&d.data, !d.no_header)
}

fn emit(text: &str, out: Option<&Path>) -> t2d_core::Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        }),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|()| stdout.flush())
                .map_err(|e| Error::Io {
                    path: "<stdout>".into(),
                    source: e,
                })
        }
    }
}

fn finish_report(report: EvaluationReport, format: Format, timing: bool) -> String {
    let report = if timing || matches!(format, Format::Table) {
        report
    } else {
        report.without_wall_clock()
    };
    render_report(&report, format.into())
}

fn cmd_train(a: TrainArgs) -> t2d_core::Result<()> {
    let cfg = resolve_config(&a.run, None)?;
    let data = load_data(&a.data)?;
    let outcome = train_holdout(&data, &cfg)?;
    let trained = &outcome.train;
    eprintln!(
        "trained on {} rows: smo {} iterations{}, {} epochs, {:.1} ms",
        outcome.train_metrics.n_samples,
        trained.svm_iterations,
        if trained.svm_converged { "" } else { " (cap reached)" },
        trained.epochs,
        trained.timing.millis
    );
    trained.model.save(&a.out)?;

    let mut report = EvaluationReport::new("train", cfg);
    report.literal_fused_objective = Some(trained.model.literal_fused_objective);
    report.rows.push(ReportRow {
        stage: "train".into(),
        metrics: outcome.train_metrics.clone(),
        epochs: Some(trained.epochs),
        elapsed_ms: Some(trained.timing.millis),
    });
    report.rows.push(ReportRow {
        stage: "test".into(),
        metrics: outcome.test_metrics.clone(),
        epochs: None,
        elapsed_ms: Some(outcome.evaluate_timing.millis),
    });
    report.timing = TimingReport {
        epochs_elapsed: trained.epochs,
        phases: vec![trained.timing.clone(), outcome.evaluate_timing.clone()],
    };
    emit(&finish_report(report, a.run.format, a.run.timing), a.report.as_deref())
}

fn cmd_cv(a: CvArgs) -> t2d_core::Result<()> {
    let cfg = resolve_config(&a.run, a.folds)?;
    let data = load_data(&a.data)?;
    let cv = cross_validate(&data, &cfg, a.parallel)?;

    let mut report = EvaluationReport::new("cv", cfg);
    let mut literal_sum = 0.0;
    for f in &cv.folds {
        eprintln!(
            "fold {}/{}: accuracy {:.4}, roc_auc {}, {:.1} ms",
            f.fold + 1,
            cv.folds.len(),
            f.metrics.accuracy,
            f.metrics
                .roc_auc
                .map_or_else(|| "undefined".into(), |v| format!("{v:.4}")),
            f.millis
        );
        literal_sum += f.literal_fused_objective;
        report.rows.push(ReportRow {
            stage: format!("fold{}", f.fold + 1),
            metrics: f.metrics.clone(),
            epochs: Some(f.epochs),
            elapsed_ms: Some(f.millis),
        });
        report.timing.phases.push(t2d_core::metrics::PhaseTiming {
            phase: format!("fold{}", f.fold + 1),
            millis: f.millis,
        });
        report.timing.epochs_elapsed += f.epochs;
    }
    report.rows.push(ReportRow {
        stage: "aggregate".into(),
        metrics: cv.aggregate.clone(),
        epochs: None,
        elapsed_ms: None,
    });
    report.literal_fused_objective = Some(literal_sum / cv.folds.len() as f64);
    emit(&finish_report(report, a.run.format, a.run.timing), a.out.as_deref())
}

fn cmd_evaluate(a: EvaluateArgs) -> t2d_core::Result<()> {
    let model = PipelineModel::load(&a.model)?;
    let data = load_data(&a.data)?;
    let (metrics, timing) = evaluate(&model, &data)?;
    let mut report = EvaluationReport::new("evaluate", model.config.clone());
    report.literal_fused_objective = Some(model.literal_fused_objective);
    report.rows.push(ReportRow {
        stage: "evaluate".into(),
        metrics,
        epochs: None,
        elapsed_ms: Some(timing.millis),
    });
    report.timing.phases.push(timing);
    emit(&finish_report(report, a.format, a.timing), a.out.as_deref())
}

fn cmd_predict(a: PredictArgs) -> t2d_core::Result<()> {
    let model = PipelineModel::load(&a.model)?;
    let rows = load_feature_rows(&a.data, &model.feature_columns)?;
    let mut text = String::new();
    for (i, row) in rows.iter().enumerate() {
        let score = combined_score(&model, row)?;
        let label = u8::from(score >= model.threshold);
        let _ = writeln!(text, "{i},{score},{label}");
    }
    emit(&text, a.out.as_deref())
}

fn cmd_synth(a: SynthArgs) -> t2d_core::Result<()> {
    let data = synth_dataset(a.n, a.features, a.fraction, a.separation, a.seed)?;
    write_csv(&data, &a.out)?;
    let (neg, pos) = data.class_counts();
    eprintln!(
        "wrote {} rows ({pos} positive, {neg} negative) to {}",
        data.n_rows(),
        a.out.display()
    );
    Ok(())
}
