//! Support vector classifiers.
//!
//! Two trainers share one model type:
//!
//! * [`train_sb_svm`] fits the sparse, class-balanced linear baseline in the
//!   primal: squared norm + weighted hinge + L1, by proximal subgradient
//!   descent.
//! * [`train_rbf_svm`] solves the soft-margin dual with sequential minimal
//!   optimization over a cached dense Gram matrix.
//!
//! Labels are {0,1} at the API boundary and {-1,+1} inside the solvers.

use serde::{Deserialize, Serialize};

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::kernel::{self, gram_matrix, Gram, KernelKind, KernelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmTrainConfig {
    /// Box constraint C.
    pub c: f64,
    /// KKT violation bound for SMO.
    pub tolerance: f64,
    /// Iteration cap; `None` means 100 x training rows.
    pub max_passes: Option<usize>,
    /// L1 weight on the primal weights (baseline only).
    pub l1_lambda: f64,
    /// Scale each class's hinge term by n / (2 n_class).
    pub class_balance: bool,
}

impl Default for SvmTrainConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            tolerance: 1e-3,
            max_passes: None,
            l1_lambda: 0.0,
            class_balance: false,
        }
    }
}

impl SvmTrainConfig {
    /// Defaults for the sparse balanced baseline.
    pub fn baseline() -> Self {
        Self {
            class_balance: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("C must be positive, got {}", self.c)));
        }
        if self.tolerance.is_nan() || self.tolerance <= 0.0 {
            return Err(Error::Config(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_passes == Some(0) {
            return Err(Error::Config("max_passes must be at least 1".into()));
        }
        if self.l1_lambda.is_nan() || self.l1_lambda < 0.0 {
            return Err(Error::Config(format!("l1_lambda must be >= 0, got {}", self.l1_lambda)));
        }
        Ok(())
    }

    fn iteration_cap(&self, n: usize) -> usize {
        self.max_passes.unwrap_or(100 * n).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    /// alpha_i * y_i for each retained support row.
    pub support_coefficients: Vec<f64>,
    pub bias: f64,
    pub kernel: KernelSpec,
    pub box_constraint: f64,
    pub support_rows: Vec<Vec<f64>>,
    /// Explicit weight vector for linear models.
    pub primal_weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDiagnostics {
    pub slacks: Vec<f64>,
    /// Dual objective for SMO, primal objective for the baseline.
    pub objective_value: f64,
    /// Best objective after each baseline iteration; empty for SMO.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    /// False when the iteration cap was hit before the stopping rule fired.
    pub converged: bool,
}

impl SvmModel {
    pub fn n_features(&self) -> Option<usize> {
        match &self.primal_weights {
            Some(w) => Some(w.len()),
            None => self.support_rows.first().map(Vec::len),
        }
    }

    /// Decision value without a dimension check.
    pub(crate) fn decision_unchecked(&self, x: &[f64]) -> f64 {
        match &self.primal_weights {
            Some(w) => kernel::dot(w, x) + self.bias,
            None => {
                self.support_coefficients
                    .iter()
                    .zip(&self.support_rows)
                    .map(|(c, sv)| c * self.kernel.eval(sv, x))
                    .sum::<f64>()
                    + self.bias
            }
        }
    }
}

fn check_width(model: &SvmModel, x: &[f64]) -> Result<()> {
    if let Some(d) = model.n_features() {
        if d != x.len() {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: x.len(),
            });
        }
    }
    Ok(())
}

/// `sum_i coef_i K(sv_i, x) + bias`, or `w . x + bias` for primal models.
pub fn decision_value(model: &SvmModel, x: &[f64]) -> Result<f64> {
    check_width(model, x)?;
    Ok(model.decision_unchecked(x))
}

/// 1 when the decision value is strictly positive, else 0.
pub fn predict_label(model: &SvmModel, x: &[f64]) -> Result<u8> {
    Ok(u8::from(decision_value(model, x)? > 0.0))
}

fn check_training_set(train: &FeatureMatrix) -> Result<()> {
    train.check_finite()?;
    let (neg, pos) = train.class_counts();
    if neg == 0 || pos == 0 {
        return Err(Error::SingleClass);
    }
    Ok(())
}

/// Per-sample hinge weights: n / (2 n_class) when balancing, else 1.
fn class_weights(train: &FeatureMatrix, balance: bool) -> Vec<f64> {
    if !balance {
        return vec![1.0; train.n_rows()];
    }
    let (neg, pos) = train.class_counts();
    let n = train.n_rows() as f64;
    let w = [n / (2.0 * neg as f64), n / (2.0 * pos as f64)];
    train.labels().iter().map(|&l| w[l as usize]).collect()
}

fn slacks(model: &SvmModel, train: &FeatureMatrix, y: &[f64]) -> Vec<f64> {
    train
        .rows()
        .zip(y)
        .map(|(x, yi)| (1.0 - yi * model.decision_unchecked(x)).max(0.0))
        .collect()
}

struct Primal<'a> {
    train: &'a FeatureMatrix,
    y: Vec<f64>,
    weights: Vec<f64>,
    c: f64,
    lambda: f64,
}

impl Primal<'_> {
    fn objective(&self, w: &[f64], b: f64) -> f64 {
        let hinge: f64 = self
            .train
            .rows()
            .zip(&self.y)
            .zip(&self.weights)
            .map(|((x, yi), ci)| ci * (1.0 - yi * (kernel::dot(w, x) + b)).max(0.0))
            .sum();
        0.5 * kernel::dot(w, w) + self.c * hinge + self.lambda * w.iter().map(|v| v.abs()).sum::<f64>()
    }

    /// Subgradient of the norm + hinge part (L1 is handled by the prox step).
    fn subgradient(&self, w: &[f64], b: f64) -> (Vec<f64>, f64) {
        let mut gw = w.to_vec();
        let mut gb = 0.0;
        for ((x, yi), ci) in self.train.rows().zip(&self.y).zip(&self.weights) {
            if yi * (kernel::dot(w, x) + b) < 1.0 {
                let s = self.c * ci * yi;
                for (g, xj) in gw.iter_mut().zip(x) {
                    *g -= s * xj;
                }
                gb -= s;
            }
        }
        (gw, gb)
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

const STALL_WINDOW: usize = 20;
const MIN_STEP: f64 = 1e-9;

/// Sparse balanced linear SVM.
///
/// Minimizes `1/2 |w|^2 + C sum_i c_i max(0, 1 - y_i (w.x_i + b)) + lambda |w|_1`
/// with normalized proximal subgradient steps. The step length halves, and
/// the iterate resets to the best point seen, whenever the objective fails
/// to improve for a fixed window of iterations; training stops when the step
/// drops below 1e-9 or the iteration cap is reached. The best iterate is
/// returned and `objective_history` records the running best.
pub fn train_sb_svm(train: &FeatureMatrix, cfg: &SvmTrainConfig) -> Result<(SvmModel, TrainingDiagnostics)> {
    cfg.validate()?;
    check_training_set(train)?;
    let problem = Primal {
        train,
        y: train.signed_labels(),
        weights: class_weights(train, cfg.class_balance),
        c: cfg.c,
        lambda: cfg.l1_lambda,
    };
    let d = train.n_cols();
    let cap = cfg.iteration_cap(train.n_rows());

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut best = (w.clone(), b, problem.objective(&w, b));
    let mut history = Vec::new();
    let mut step = 1.0;
    let mut stalled = 0;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < cap {
        iterations += 1;
        let (gw, gb) = problem.subgradient(&w, b);
        let norm = (kernel::dot(&gw, &gw) + gb * gb).sqrt();
        let t = if norm > 0.0 { step / norm } else { step };
        for (wj, gj) in w.iter_mut().zip(&gw) {
            *wj = soft_threshold(*wj - t * gj, t * cfg.l1_lambda);
        }
        b -= t * gb;

        let obj = problem.objective(&w, b);
        if obj < best.2 {
            best = (w.clone(), b, obj);
            stalled = 0;
        } else {
            stalled += 1;
        }
        history.push(best.2);

        if stalled >= STALL_WINDOW || (norm == 0.0 && obj >= best.2) {
            step /= 2.0;
            stalled = 0;
            w.clone_from(&best.0);
            b = best.1;
            if step < MIN_STEP {
                converged = true;
                break;
            }
        }
    }

    let (w, b, obj) = best;
    let model = SvmModel {
        support_coefficients: Vec::new(),
        bias: b,
        kernel: KernelSpec::linear(),
        box_constraint: cfg.c,
        support_rows: Vec::new(),
        primal_weights: Some(w),
    };
    let diagnostics = TrainingDiagnostics {
        slacks: slacks(&model, train, &problem.y),
        objective_value: obj,
        objective_history: history,
        iterations,
        converged,
    };
    Ok((model, diagnostics))
}

/// Kernel SVM trained by SMO. `kernel` must be RBF.
pub fn train_rbf_svm(
    train: &FeatureMatrix,
    cfg: &SvmTrainConfig,
    kernel: &KernelSpec,
) -> Result<(SvmModel, TrainingDiagnostics)> {
    if kernel.kind != KernelKind::Rbf {
        return Err(Error::Config("train_rbf_svm requires an rbf kernel".into()));
    }
    train_kernel_svm(train, cfg, kernel)
}

/// SMO on the soft-margin dual for any kernel.
pub fn train_kernel_svm(
    train: &FeatureMatrix,
    cfg: &SvmTrainConfig,
    kernel: &KernelSpec,
) -> Result<(SvmModel, TrainingDiagnostics)> {
    cfg.validate()?;
    kernel.validate()?;
    check_training_set(train)?;
    let gram = gram_matrix(train, kernel)?;
    let y = train.signed_labels();
    let bounds: Vec<f64> = class_weights(train, cfg.class_balance)
        .into_iter()
        .map(|w| w * cfg.c)
        .collect();

    let mut smo = Smo::new(&gram, &y, bounds);
    let (iterations, converged) = smo.solve(cfg.tolerance, cfg.iteration_cap(train.n_rows()));
    let bias = -smo.rho();
    let objective_value = smo.dual_objective();

    let mut support_coefficients = Vec::new();
    let mut support_rows = Vec::new();
    for (i, &a) in smo.alpha.iter().enumerate() {
        if a > 0.0 {
            support_coefficients.push(a * y[i]);
            support_rows.push(train.row(i).to_vec());
        }
    }
    let primal_weights = (kernel.kind == KernelKind::Linear).then(|| {
        let mut w = vec![0.0; train.n_cols()];
        for (c, sv) in support_coefficients.iter().zip(&support_rows) {
            for (wj, xj) in w.iter_mut().zip(sv) {
                *wj += c * xj;
            }
        }
        w
    });
    let model = SvmModel {
        support_coefficients,
        bias,
        kernel: *kernel,
        box_constraint: cfg.c,
        support_rows,
        primal_weights,
    };
    let diagnostics = TrainingDiagnostics {
        slacks: slacks(&model, train, &y),
        objective_value,
        objective_history: Vec::new(),
        iterations,
        converged,
    };
    Ok((model, diagnostics))
}

const TAU: f64 = 1e-12;

/// Dual state: minimize `1/2 a'Qa - e'a` s.t. `y'a = 0`, `0 <= a_i <= C_i`,
/// with `Q_ij = y_i y_j K_ij` and gradient `G = Qa - e` kept up to date.
struct Smo<'a> {
    gram: &'a Gram,
    y: &'a [f64],
    bounds: Vec<f64>,
    alpha: Vec<f64>,
    grad: Vec<f64>,
}

impl<'a> Smo<'a> {
    fn new(gram: &'a Gram, y: &'a [f64], bounds: Vec<f64>) -> Self {
        let n = y.len();
        Self {
            gram,
            y,
            bounds,
            alpha: vec![0.0; n],
            grad: vec![-1.0; n],
        }
    }

    fn in_up(&self, t: usize) -> bool {
        if self.y[t] > 0.0 {
            self.alpha[t] < self.bounds[t]
        } else {
            self.alpha[t] > 0.0
        }
    }

    fn in_low(&self, t: usize) -> bool {
        if self.y[t] > 0.0 {
            self.alpha[t] > 0.0
        } else {
            self.alpha[t] < self.bounds[t]
        }
    }

    /// Maximal violating pair: i maximizes -y G over the up set, j minimizes
    /// it over the low set. Ties go to the lowest index.
    fn select_pair(&self) -> Option<(usize, usize, f64)> {
        let mut i = None;
        let mut j = None;
        let mut g_max = f64::NEG_INFINITY;
        let mut g_min = f64::INFINITY;
        for t in 0..self.y.len() {
            let v = -self.y[t] * self.grad[t];
            if self.in_up(t) && v > g_max {
                g_max = v;
                i = Some(t);
            }
            if self.in_low(t) && v < g_min {
                g_min = v;
                j = Some(t);
            }
        }
        Some((i?, j?, g_max - g_min))
    }

    fn solve(&mut self, tolerance: f64, cap: usize) -> (usize, bool) {
        let mut iterations = 0;
        loop {
            let Some((i, j, gap)) = self.select_pair() else {
                return (iterations, true);
            };
            if gap < tolerance {
                return (iterations, true);
            }
            if iterations >= cap {
                return (iterations, false);
            }
            iterations += 1;
            self.update_pair(i, j);
        }
    }

    fn update_pair(&mut self, i: usize, j: usize) {
        let (yi, yj) = (self.y[i], self.y[j]);
        let (ci, cj) = (self.bounds[i], self.bounds[j]);
        let kii = self.gram.get(i, i);
        let kjj = self.gram.get(j, j);
        let kij = self.gram.get(i, j);
        let (old_i, old_j) = (self.alpha[i], self.alpha[j]);
        let (mut ai, mut aj) = (old_i, old_j);

        // curvature K_ii + K_jj - 2 K_ij along the feasible direction
        let mut quad = kii + kjj - 2.0 * kij;
        if quad <= 0.0 {
            quad = TAU;
        }
        if yi != yj {
            let delta = (-self.grad[i] - self.grad[j]) / quad;
            let diff = ai - aj;
            ai += delta;
            aj += delta;
            if diff > 0.0 {
                if aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = -diff;
            }
            if diff > ci - cj {
                if ai > ci {
                    ai = ci;
                    aj = ci - diff;
                }
            } else if aj > cj {
                aj = cj;
                ai = cj + diff;
            }
        } else {
            let delta = (self.grad[i] - self.grad[j]) / quad;
            let sum = ai + aj;
            ai -= delta;
            aj += delta;
            if sum > ci {
                if ai > ci {
                    ai = ci;
                    aj = sum - ci;
                }
            } else if aj < 0.0 {
                aj = 0.0;
                ai = sum;
            }
            if sum > cj {
                if aj > cj {
                    aj = cj;
                    ai = sum - cj;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = sum;
            }
        }
        self.alpha[i] = ai;
        self.alpha[j] = aj;

        let di = (ai - old_i) * yi;
        let dj = (aj - old_j) * yj;
        let (row_i, row_j) = (self.gram.row(i), self.gram.row(j));
        for (k, g) in self.grad.iter_mut().enumerate() {
            *g += self.y[k] * (row_i[k] * di + row_j[k] * dj);
        }
    }

    /// Offset rho with `f(x) = sum a_i y_i K(x_i, x) - rho`: the mean of
    /// `y G` over free variables, else the midpoint of the feasible range.
    fn rho(&self) -> f64 {
        let mut ub = f64::INFINITY;
        let mut lb = f64::NEG_INFINITY;
        let mut free_sum = 0.0;
        let mut n_free = 0usize;
        for t in 0..self.y.len() {
            let yg = self.y[t] * self.grad[t];
            let at_upper = self.alpha[t] >= self.bounds[t];
            let at_lower = self.alpha[t] <= 0.0;
            if at_upper {
                if self.y[t] < 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else if at_lower {
                if self.y[t] > 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else {
                n_free += 1;
                free_sum += yg;
            }
        }
        if n_free > 0 {
            free_sum / n_free as f64
        } else {
            (ub + lb) / 2.0
        }
    }

    /// `sum a - 1/2 a'Qa`.
    fn dual_objective(&self) -> f64 {
        let n = self.y.len();
        let mut quad = 0.0;
        for i in 0..n {
            if self.alpha[i] == 0.0 {
                continue;
            }
            let row = self.gram.row(i);
            let s: f64 = (0..n).map(|j| self.alpha[j] * self.y[j] * row[j]).sum();
            quad += self.alpha[i] * self.y[i] * s;
        }
        self.alpha.iter().sum::<f64>() - 0.5 * quad
    }
}

/// The literal kernelized objective `1/2 |w|^2 + C sum_i K(s, s1)`, with
/// `|w|^2` taken in feature space and `(s, s1)` read as consecutive training
/// rows `(x_i, x_{i+1 mod M})`. Reported only; nothing optimizes it.
pub fn literal_kernel_objective(model: &SvmModel, train: &FeatureMatrix) -> f64 {
    let norm_sq = match &model.primal_weights {
        Some(w) => kernel::dot(w, w),
        None => {
            let mut s = 0.0;
            for (ci, si) in model.support_coefficients.iter().zip(&model.support_rows) {
                for (cj, sj) in model.support_coefficients.iter().zip(&model.support_rows) {
                    s += ci * cj * model.kernel.eval(si, sj);
                }
            }
            s
        }
    };
    let m = train.n_rows();
    let pair_sum: f64 = (0..m)
        .map(|i| model.kernel.eval(train.row(i), train.row((i + 1) % m)))
        .sum();
    0.5 * norm_sq + model.box_constraint * pair_sum
}
