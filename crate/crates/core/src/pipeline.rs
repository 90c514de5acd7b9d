//! End-to-end hybrid classifier: impute, standardize, train the RBF-SVM and
//! the LSTM/MLP ensemble on the same features, fuse their scores.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_folds, split_indices, FeatureMatrix, FoldAssignment, Imputer, SplitSpec, Standardizer};
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::metrics::{capture_timing, Metrics, PhaseTiming};
use crate::neural::{sigmoid_open, NeuralConfig, NeuralEncoder};
use crate::svm::{decision_value, literal_kernel_objective, train_rbf_svm, SvmModel, SvmTrainConfig};

pub const MODEL_FORMAT: &str = "t2d-pipeline";
pub const MODEL_VERSION: u32 = 1;

/// Columns whose zeros mean "not measured" in the Pima layout. Applied only
/// to the ones present in the data.
pub const PIMA_ZERO_AS_MISSING: [&str; 5] = ["Glucose", "BloodPressure", "SkinThickness", "Insulin", "BMI"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub train_fraction: f64,
    pub stratified: bool,
    pub folds: usize,
    pub seed: u64,
    /// Names or zero-based indices; `None` keeps every feature column.
    pub selected_columns: Option<Vec<String>>,
    /// Names or zero-based indices; `None` uses [`PIMA_ZERO_AS_MISSING`].
    pub zero_as_missing: Option<Vec<String>>,
    pub svm: SvmTrainConfig,
    /// RBF width; `None` means `sqrt(d / 2)` for `d` selected features.
    pub sigma: Option<f64>,
    pub neural: NeuralConfig,
    pub fusion_weight: f64,
    pub threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            stratified: true,
            folds: 5,
            seed: 42,
            selected_columns: None,
            zero_as_missing: None,
            svm: SvmTrainConfig::default(),
            sigma: None,
            neural: NeuralConfig::default(),
            fusion_weight: 0.5,
            threshold: 0.5,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.split_spec().validate()?;
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0,1), got {}",
                self.threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.fusion_weight) {
            return Err(Error::Config(format!(
                "fusion_weight must lie in [0,1], got {}",
                self.fusion_weight
            )));
        }
        if let Some(s) = self.sigma {
            KernelSpec::rbf(s)?;
        }
        self.svm.validate()?;
        self.neural.validate()
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train_fraction: self.train_fraction,
            seed: self.seed,
            stratified: self.stratified,
        }
    }

    pub fn kernel(&self, n_features: usize) -> Result<KernelSpec> {
        KernelSpec::rbf(self.sigma.unwrap_or_else(|| KernelSpec::default_sigma(n_features)))
    }

    /// Indices of the selected feature columns of `data`, in config order.
    pub fn resolve_selected(&self, data: &FeatureMatrix) -> Result<Vec<usize>> {
        match &self.selected_columns {
            None => Ok((0..data.n_cols()).collect()),
            Some(names) => names.iter().map(|c| resolve_column(data, c)).collect(),
        }
    }

    /// Indices, within `selected`, of the columns whose zeros are imputed.
    pub fn resolve_zero_as_missing(&self, selected: &FeatureMatrix) -> Result<Vec<usize>> {
        let mut out = match &self.zero_as_missing {
            None => PIMA_ZERO_AS_MISSING
                .iter()
                .filter_map(|name| selected.column_index(name))
                .collect(),
            Some(names) => names
                .iter()
                .map(|c| resolve_column(selected, c))
                .collect::<Result<Vec<_>>>()?,
        };
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }
}

fn resolve_column(data: &FeatureMatrix, key: &str) -> Result<usize> {
    if let Some(i) = data.column_index(key) {
        return Ok(i);
    }
    match key.parse::<usize>() {
        Ok(i) if i < data.n_cols() => Ok(i),
        _ => Err(Error::UnknownColumn(key.to_string())),
    }
}

/// Serialized, self-describing trained pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineModel {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    /// Raw input columns, in the order the model consumes them.
    pub feature_columns: Vec<String>,
    pub imputer: Imputer,
    pub standardizer: Standardizer,
    pub svm: SvmModel,
    pub neural: NeuralEncoder,
    pub fusion_weight: f64,
    pub threshold: f64,
    /// Kernel objective plus mean ensemble output over the training rows.
    pub literal_fused_objective: f64,
    pub config: PipelineConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PipelineModel,
    pub svm_iterations: usize,
    pub svm_converged: bool,
    pub epochs: usize,
    pub loss_history: Vec<f64>,
    pub timing: PhaseTiming,
}

/// Features of `data` in model column order, with labels carried over.
pub fn project(data: &FeatureMatrix, columns: &[String]) -> Result<FeatureMatrix> {
    let missing: Vec<String> = columns
        .iter()
        .filter(|c| data.column_index(c).is_none())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingColumns(missing));
    }
    let idx: Vec<usize> = columns.iter().map(|c| data.column_index(c).unwrap()).collect();
    data.select_columns(&idx)
}

pub fn train_pipeline(data: &FeatureMatrix, cfg: &PipelineConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (result, timing) = capture_timing("train", || train_inner(data, cfg));
    let mut outcome = result?;
    outcome.timing = timing;
    Ok(outcome)
}

fn train_inner(data: &FeatureMatrix, cfg: &PipelineConfig) -> Result<TrainOutcome> {
    let selected = data.select_columns(&cfg.resolve_selected(data)?)?;
    let (neg, pos) = selected.class_counts();
    if neg == 0 || pos == 0 {
        return Err(Error::SingleClass);
    }
    selected.check_finite()?;
    let imputer = Imputer::fit(&selected, &cfg.resolve_zero_as_missing(&selected)?)?;
    let imputed = imputer.transform(&selected);
    let standardizer = Standardizer::fit(&imputed)?;
    let features = standardizer.transform(&imputed);

    let kernel = cfg.kernel(features.n_cols())?;
    let (svm, diag) = train_rbf_svm(&features, &cfg.svm, &kernel)?;
    let (neural, stats) = NeuralEncoder::train(&features, &cfg.neural, cfg.seed)?;

    let mut ensemble_sum = 0.0;
    for row in features.rows() {
        ensemble_sum += neural.score(row)?;
    }
    let literal = literal_kernel_objective(&svm, &features) + ensemble_sum / features.n_rows() as f64;

    let model = PipelineModel {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        tool_version: crate::VERSION.to_string(),
        feature_columns: selected.column_names().to_vec(),
        imputer,
        standardizer,
        svm,
        neural,
        fusion_weight: cfg.fusion_weight,
        threshold: cfg.threshold,
        literal_fused_objective: literal,
        config: cfg.clone(),
    };
    Ok(TrainOutcome {
        model,
        svm_iterations: diag.iterations,
        svm_converged: diag.converged,
        epochs: stats.epochs,
        loss_history: stats.loss_history,
        timing: PhaseTiming {
            phase: "train".into(),
            millis: 0.0,
        },
    })
}

/// Per-branch scores in (0, 1): squashed SVM margin and ensemble output.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchScores {
    pub svm: f64,
    pub neural: f64,
}

impl PipelineModel {
    fn preprocess(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.feature_columns.len() {
            return Err(Error::DimensionMismatch {
                expected: self.feature_columns.len(),
                found: x.len(),
            });
        }
        let mut row = x.to_vec();
        self.imputer.apply_row(&mut row);
        self.standardizer.apply_row(&mut row);
        Ok(row)
    }

    /// `x` is a raw row in `feature_columns` order.
    pub fn branch_scores(&self, x: &[f64]) -> Result<BranchScores> {
        let row = self.preprocess(x)?;
        Ok(BranchScores {
            svm: sigmoid_open(decision_value(&self.svm, &row)?),
            neural: self.neural.score(&row)?,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        if model.format != MODEL_FORMAT || model.version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "expected {MODEL_FORMAT} v{MODEL_VERSION}, found {} v{}",
                model.format, model.version
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn fuse(fusion_weight: f64, b: BranchScores) -> f64 {
    fusion_weight * b.svm + (1.0 - fusion_weight) * b.neural
}

/// Fused score in (0, 1) for a raw row in `feature_columns` order.
pub fn combined_score(model: &PipelineModel, x: &[f64]) -> Result<f64> {
    Ok(fuse(model.fusion_weight, model.branch_scores(x)?))
}

/// 1 iff the fused score reaches the threshold.
pub fn predict(model: &PipelineModel, x: &[f64]) -> Result<u8> {
    Ok(u8::from(combined_score(model, x)? >= model.threshold))
}

/// Scores and labels for every row of `data`, matched to the model by column name.
pub fn score_matrix(model: &PipelineModel, data: &FeatureMatrix) -> Result<(Vec<f64>, Vec<u8>)> {
    let projected = project(data, &model.feature_columns)?;
    let mut scores = Vec::with_capacity(projected.n_rows());
    for row in projected.rows() {
        scores.push(combined_score(model, row)?);
    }
    let preds = scores.iter().map(|&s| u8::from(s >= model.threshold)).collect();
    Ok((scores, preds))
}

pub fn evaluate(model: &PipelineModel, data: &FeatureMatrix) -> Result<(Metrics, PhaseTiming)> {
    let (result, timing) = capture_timing("evaluate", || -> Result<Metrics> {
        let (scores, preds) = score_matrix(model, data)?;
        Metrics::evaluate(&scores, &preds, data.labels())
    });
    Ok((result?, timing))
}

/// Train on the train split, evaluate on both splits.
#[derive(Debug, Clone)]
pub struct HoldoutOutcome {
    pub train: TrainOutcome,
    pub train_metrics: Metrics,
    pub test_metrics: Metrics,
    pub evaluate_timing: PhaseTiming,
}

pub fn train_holdout(data: &FeatureMatrix, cfg: &PipelineConfig) -> Result<HoldoutOutcome> {
    cfg.validate()?;
    let (train_idx, test_idx) = split_indices(data.labels(), &cfg.split_spec())?;
    let train_set = data.select_rows(&train_idx);
    let test_set = data.select_rows(&test_idx);
    let train = train_pipeline(&train_set, cfg)?;
    let (train_metrics, _) = evaluate(&train.model, &train_set)?;
    let (test_metrics, evaluate_timing) = evaluate(&train.model, &test_set)?;
    Ok(HoldoutOutcome {
        train,
        train_metrics,
        test_metrics,
        evaluate_timing,
    })
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub seed: u64,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub imputer: Imputer,
    pub standardizer: Standardizer,
    pub metrics: Metrics,
    pub epochs: usize,
    pub literal_fused_objective: f64,
    /// Train plus evaluate wall-clock time.
    pub millis: f64,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub assignment: FoldAssignment,
    pub folds: Vec<FoldOutcome>,
    pub aggregate: Metrics,
}

/// Stratified k-fold cross-validation. Fold `i` trains with seed `seed + i`;
/// `parallel` only changes scheduling, never results.
pub fn cross_validate(data: &FeatureMatrix, cfg: &PipelineConfig, parallel: bool) -> Result<CvOutcome> {
    cfg.validate()?;
    let assignment = make_folds(data.labels(), cfg.folds, cfg.seed)?;
    let run = |fold: usize| run_fold(data, cfg, &assignment, fold);
    let folds: Vec<FoldOutcome> = if parallel {
        (0..cfg.folds).into_par_iter().map(run).collect::<Result<_>>()?
    } else {
        (0..cfg.folds).map(run).collect::<Result<_>>()?
    };
    let metrics: Vec<Metrics> = folds.iter().map(|f| f.metrics.clone()).collect();
    Ok(CvOutcome {
        aggregate: Metrics::aggregate(&metrics)?,
        assignment,
        folds,
    })
}

fn run_fold(
    data: &FeatureMatrix,
    cfg: &PipelineConfig,
    assignment: &FoldAssignment,
    fold: usize,
) -> Result<FoldOutcome> {
    let train_indices = assignment.train_indices(fold);
    let test_indices = assignment.test_indices(fold);
    let fold_cfg = PipelineConfig {
        seed: cfg.seed.wrapping_add(fold as u64),
        ..cfg.clone()
    };
    let trained = train_pipeline(&data.select_rows(&train_indices), &fold_cfg)?;
    let (metrics, eval_timing) = evaluate(&trained.model, &data.select_rows(&test_indices))?;
    let model = trained.model;
    Ok(FoldOutcome {
        fold,
        seed: fold_cfg.seed,
        train_indices,
        test_indices,
        imputer: model.imputer,
        standardizer: model.standardizer,
        metrics,
        epochs: trained.epochs,
        literal_fused_objective: model.literal_fused_objective,
        millis: trained.timing.millis + eval_timing.millis,
    })
}
