//! Independent reference implementations shared by the integration and
//! acceptance tests.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use t2d_core::data::FeatureMatrix;
use t2d_core::kernel::KernelSpec;
use t2d_core::neural::{backprop, batch_loss, DropoutSpec, LstmLayer, MlpNetwork};
use t2d_core::rng::{self, Rng};

pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng::unit(rng)
}

pub fn random_rows(rng: &mut Rng, n: usize, d: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| uniform(rng, lo, hi)).collect()).collect()
}

pub fn names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("f{j}")).collect()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len();
    let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    SymmetricEigen::new(m).eigenvalues.min()
}

/// Exact solution of the soft-margin dual
/// `max sum(a) - 1/2 sum_ij a_i a_j y_i y_j K_ij`, `0 <= a <= C`, `y'a = 0`,
/// by enumerating every assignment of each variable to {lower, upper, free}
/// and solving the stationarity system on the free set.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub objective: f64,
}

pub fn dual_objective(alpha: &[f64], y: &[f64], k: &[Vec<f64>]) -> f64 {
    let n = alpha.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += alpha[i] * alpha[j] * y[i] * y[j] * k[i][j];
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

pub fn qp_oracle(rows: &[Vec<f64>], y: &[f64], c: f64, kernel: &KernelSpec) -> QpSolution {
    let n = rows.len();
    let k: Vec<Vec<f64>> = rows
        .iter()
        .map(|a| rows.iter().map(|b| kernel.eval(a, b)).collect())
        .collect();
    let q = |i: usize, j: usize| y[i] * y[j] * k[i][j];
    let feas = 1e-10 * c.max(1.0);
    let mut best: Option<QpSolution> = None;

    for code in 0..3usize.pow(n as u32) {
        // state 0: alpha = 0, 1: alpha = C, 2: free
        let mut state = vec![0u8; n];
        let mut rest = code;
        for s in state.iter_mut() {
            *s = (rest % 3) as u8;
            rest /= 3;
        }
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
        let mut alpha: Vec<f64> = state.iter().map(|&s| if s == 1 { c } else { 0.0 }).collect();

        if free.is_empty() {
            let balance: f64 = (0..n).map(|i| y[i] * alpha[i]).sum();
            if balance.abs() > feas {
                continue;
            }
        } else {
            let m = free.len();
            let mut a = DMatrix::zeros(m + 1, m + 1);
            let mut rhs = DVector::zeros(m + 1);
            for (r, &i) in free.iter().enumerate() {
                for (s, &j) in free.iter().enumerate() {
                    a[(r, s)] = q(i, j);
                }
                a[(r, m)] = y[i];
                a[(m, r)] = y[i];
                rhs[r] = 1.0
                    - (0..n)
                        .filter(|&j| state[j] != 2)
                        .map(|j| q(i, j) * alpha[j])
                        .sum::<f64>();
            }
            rhs[m] = -(0..n).filter(|&j| state[j] != 2).map(|j| y[j] * alpha[j]).sum::<f64>();
            let Ok(sol) = a.clone().svd(true, true).solve(&rhs, 1e-12) else {
                continue;
            };
            if (&a * &sol - &rhs).norm() > 1e-9 {
                continue;
            }
            if free
                .iter()
                .enumerate()
                .any(|(r, _)| sol[r] < -feas || sol[r] > c + feas)
            {
                continue;
            }
            for (r, &i) in free.iter().enumerate() {
                alpha[i] = sol[r].clamp(0.0, c);
            }
        }
        let objective = dual_objective(&alpha, y, &k);
        if best.as_ref().is_none_or(|b| objective > b.objective) {
            best = Some(QpSolution {
                alpha,
                bias: 0.0,
                objective,
            });
        }
    }
    let mut best = best.expect("alpha = 0 is always feasible");
    best.bias = canonical_bias(&mut best.alpha, y, &k, c);
    best
}

/// The bias is unique when some variable is strictly inside its box; then
/// every free `i` satisfies `y_i f(x_i) = 1`. Otherwise any value in the KKT
/// interval is optimal and the midpoint is taken.
fn canonical_bias(alpha: &mut [f64], y: &[f64], k: &[Vec<f64>], c: f64) -> f64 {
    let snap = 1e-9 * c;
    for a in alpha.iter_mut() {
        if *a < snap {
            *a = 0.0;
        } else if *a > c - snap {
            *a = c;
        }
    }
    let n = alpha.len();
    let free: Vec<usize> = (0..n).filter(|&i| alpha[i] > 0.0 && alpha[i] < c).collect();
    if free.is_empty() {
        return bias_from_bounds(alpha, y, k, c);
    }
    free.iter()
        .map(|&i| y[i] - (0..n).map(|j| alpha[j] * y[j] * k[i][j]).sum::<f64>())
        .sum::<f64>()
        / free.len() as f64
}

/// Midpoint of the bias interval allowed by the KKT conditions when no
/// variable is free.
fn bias_from_bounds(alpha: &[f64], y: &[f64], k: &[Vec<f64>], c: f64) -> f64 {
    let n = alpha.len();
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for i in 0..n {
        let f: f64 = (0..n).map(|j| alpha[j] * y[j] * k[i][j]).sum();
        // y_i (f + b) >= 1 at alpha = 0, <= 1 at alpha = C
        let bound = y[i] - f;
        let at_lower = alpha[i] <= 0.0;
        let at_upper = alpha[i] >= c;
        if (at_lower && y[i] > 0.0) || (at_upper && y[i] < 0.0) {
            lo = lo.max(bound);
        } else {
            hi = hi.min(bound);
        }
    }
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => 0.5 * (lo + hi),
        (true, false) => lo,
        (false, true) => hi,
        (false, false) => 0.0,
    }
}

pub fn oracle_decision(sol: &QpSolution, rows: &[Vec<f64>], y: &[f64], kernel: &KernelSpec, x: &[f64]) -> f64 {
    rows.iter()
        .zip(y)
        .zip(&sol.alpha)
        .map(|((r, yi), a)| a * yi * kernel.eval(r, x))
        .sum::<f64>()
        + sol.bias
}

/// O(n^2) pairwise ROC AUC with ties counted as one half.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0u64;
    for (sp, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 1) {
        for (sn, _) in scores.iter().zip(labels).filter(|(_, &l)| l == 0) {
            pairs += 1;
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// Largest relative error between analytic and central-difference gradients
/// over every LSTM and MLP parameter, for one seeded small network with
/// dropout active.
///
/// The relative error is `|a - n| / max(|a|, |n|, floor)`; the floor keeps
/// parameters whose gradient is numerically zero from dividing by noise.
pub fn gradient_check(seed: u64, hidden: usize, seq_len: usize, floor: f64) -> f64 {
    let mut rng = rng::seeded(seed);
    let mut lstm = LstmLayer::init(1, hidden, rng::derive_seed(seed, 1));
    let mut net = MlpNetwork::init(hidden, [4, 3], rng::derive_seed(seed, 2)).unwrap();
    // zero biases put ReLU pre-activations exactly on the kink whenever a
    // layer's whole input is zero; finite differences are invalid there
    for b in lstm
        .bias
        .iter_mut()
        .chain(net.layers.iter_mut().flat_map(|l| l.bias.iter_mut()))
    {
        *b = uniform(&mut rng, -0.5, 0.5);
    }
    let n = 6;
    let rows = random_rows(&mut rng, n, seq_len, -2.0, 2.0);
    let labels = (0..n).map(|i| (i % 2) as u8).collect();
    let batch = FeatureMatrix::new(rows, labels, names(seq_len)).unwrap();
    let dropout = DropoutSpec {
        rate: 0.25,
        seed: rng::derive_seed(seed, 3),
        training_mode: true,
    };
    let grads = backprop(&lstm, &net, &batch, &dropout).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;

    let mut check = |analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let e = (analytic - numeric).abs() / denom;
        worst = worst.max(e);
    };

    for t in 0..3 {
        for p in 0..lstm.tensors()[t].len() {
            let mut plus = lstm.clone();
            plus.tensors_mut()[t][p] += h;
            let mut minus = lstm.clone();
            minus.tensors_mut()[t][p] -= h;
            check(
                grads.lstm.tensors()[t][p],
                batch_loss(&plus, &net, &batch, &dropout).unwrap(),
                batch_loss(&minus, &net, &batch, &dropout).unwrap(),
            );
        }
    }
    let n_tensors = net.tensors().len();
    for t in 0..n_tensors {
        for p in 0..net.tensors()[t].len() {
            let mut plus = net.clone();
            *plus.tensors_mut()[t].get_mut(p).unwrap() += h;
            let mut minus = net.clone();
            *minus.tensors_mut()[t].get_mut(p).unwrap() -= h;
            check(
                grads.mlp.tensors()[t][p],
                batch_loss(&lstm, &plus, &batch, &dropout).unwrap(),
                batch_loss(&lstm, &minus, &batch, &dropout).unwrap(),
            );
        }
    }
    worst
}
