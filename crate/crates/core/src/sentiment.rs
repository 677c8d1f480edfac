//! Sentence sentiment scoring: survey label encoding, a ridge regressor over tfidf
//! vectors, and an adapter for scores computed by an external model.

use std::collections::HashMap;
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Condition;
use crate::error::{Error, Result};
use crate::vectorize::SparseVector;

pub const RIDGE_VERSION: u32 = 1;

/// Regression target derived from a five-point condition.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
pub struct SentimentLabel(f64);

impl SentimentLabel {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// ◎ → 2, ○ → 1, □ → 0, △ → −1, × → −2.
pub fn encode_label(condition: Condition) -> SentimentLabel {
    SentimentLabel(match condition {
        Condition::VeryGood => 2.0,
        Condition::Good => 1.0,
        Condition::Neutral => 0.0,
        Condition::Bad => -1.0,
        Condition::VeryBad => -2.0,
    })
}

/// Parse a condition symbol (or ASCII alias) straight to its label.
pub fn encode_symbol(symbol: &str) -> Result<SentimentLabel> {
    symbol.parse::<Condition>().map(encode_label)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RidgeConfig {
    pub lambda: f64,
    /// Fit an unpenalized bias term.
    pub fit_intercept: bool,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            fit_intercept: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeModel {
    weights: Vec<f64>,
    bias: f64,
    lambda: f64,
    iterations: usize,
}

/// Apply the augmented normal-equation operator
/// `[XᵀX + λI, Xᵀ1; 1ᵀX, n] · [w; b]` (the last row/column only with an intercept).
struct NormalOperator<'a> {
    xs: &'a [SparseVector],
    dim: usize,
    lambda: f64,
    intercept: bool,
}

impl NormalOperator<'_> {
    fn size(&self) -> usize {
        self.dim + usize::from(self.intercept)
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let (w, b) = v.split_at(self.dim);
        let b = b.first().copied().unwrap_or(0.0);
        out.fill(0.0);
        let mut total = 0.0;
        for x in self.xs {
            let r = x.dot_dense(w) + b;
            for (k, val) in x.iter() {
                out[k] += val * r;
            }
            total += r;
        }
        for k in 0..self.dim {
            out[k] += self.lambda * w[k];
        }
        if self.intercept {
            out[self.dim] = total;
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![self.lambda; self.size()];
        for x in self.xs {
            for (k, val) in x.iter() {
                d[k] += val * val;
            }
        }
        if self.intercept {
            d[self.dim] = self.xs.len() as f64;
        }
        d
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize `Σ (y_i − w·x_i − b)² + λ‖w‖²` with Jacobi-preconditioned conjugate gradient
/// on the normal equations, until the residual is below `1e-8` relative to the right-hand side.
pub fn train_ridge(xs: &[SparseVector], y: &[f64], config: &RidgeConfig) -> Result<RidgeModel> {
    if xs.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: y.len(),
        });
    }
    if xs.is_empty() {
        return Err(Error::invalid("ridge regression needs at least one example"));
    }
    if !(config.lambda > 0.0 && config.lambda.is_finite()) {
        return Err(Error::invalid(format!("lambda must be positive, got {}", config.lambda)));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("targets must be finite"));
    }
    let dim = xs[0].dim();
    if let Some(x) = xs.iter().find(|x| x.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: x.dim(),
        });
    }

    let op = NormalOperator {
        xs,
        dim,
        lambda: config.lambda,
        intercept: config.fit_intercept,
    };
    let n = op.size();
    let mut rhs = vec![0.0; n];
    for (x, &t) in xs.iter().zip(y) {
        for (k, val) in x.iter() {
            rhs[k] += val * t;
        }
    }
    if config.fit_intercept {
        rhs[dim] = y.iter().sum();
    }

    let inv_diag: Vec<f64> = op.diagonal().iter().map(|d| 1.0 / d).collect();
    let rhs_norm = dot(&rhs, &rhs).sqrt();
    let mut sol = vec![0.0; n];
    let mut iterations = 0;
    if rhs_norm > 0.0 {
        let tol = 1e-8 * rhs_norm;
        let max_iter = 1000.max(20 * n);
        let mut r = rhs.clone();
        let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
        let mut p = z.clone();
        let mut ap = vec![0.0; n];
        let mut rz = dot(&r, &z);
        loop {
            let res = dot(&r, &r).sqrt();
            if res <= tol {
                break;
            }
            if iterations >= max_iter {
                return Err(Error::NonConvergence {
                    solver: "ridge conjugate gradient",
                    iterations,
                    gap: res / rhs_norm,
                });
            }
            op.apply(&p, &mut ap);
            let step = rz / dot(&p, &ap);
            for k in 0..n {
                sol[k] += step * p[k];
                r[k] -= step * ap[k];
            }
            for k in 0..n {
                z[k] = r[k] * inv_diag[k];
            }
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for k in 0..n {
                p[k] = z[k] + beta * p[k];
            }
            iterations += 1;
        }
    }

    let bias = if config.fit_intercept { sol[dim] } else { 0.0 };
    sol.truncate(dim);
    Ok(RidgeModel {
        weights: sol,
        bias,
        lambda: config.lambda,
        iterations,
    })
}

impl RidgeModel {
    pub fn predict(&self, x: &SparseVector) -> Result<f64> {
        if x.dim() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.len(),
                got: x.dim(),
            });
        }
        Ok(x.dot_dense(&self.weights) + self.bias)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn to_json(&self) -> Result<String> {
        let file = RidgeFile {
            version: RIDGE_VERSION,
            lambda: self.lambda,
            bias: self.bias,
            dim: self.weights.len(),
            weights: SparseVector::from_dense(&self.weights).to_pairs(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: RidgeFile = serde_json::from_str(json)?;
        if file.version != RIDGE_VERSION {
            return Err(Error::Version {
                found: file.version,
                expected: RIDGE_VERSION,
            });
        }
        let weights = SparseVector::from_pairs(&file.weights, file.dim)?.to_dense();
        if !(file.lambda > 0.0) || !file.bias.is_finite() {
            return Err(Error::invalid("ridge model needs lambda > 0 and a finite bias"));
        }
        Ok(Self {
            weights,
            bias: file.bias,
            lambda: file.lambda,
            iterations: 0,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct RidgeFile {
    version: u32,
    lambda: f64,
    bias: f64,
    dim: usize,
    /// Nonzero weights as `(index, value)` pairs.
    weights: Vec<(usize, f64)>,
}

pub fn mse(pred: &[f64], gold: &[f64]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::DimensionMismatch {
            expected: gold.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::invalid("mse of empty series"));
    }
    Ok(pred.iter().zip(gold).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Index partition for the 90/10 protocol: 10% held out for test, the remaining 90%
/// split 9:1 into training and validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, seed: u64) -> DataSplit {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (n as f64 * 0.1).round() as usize;
    let test = idx.split_off(n - n_test);
    let n_val = (idx.len() as f64 * 0.1).round() as usize;
    let validation = idx.split_off(idx.len() - n_val);
    DataSplit {
        train: idx,
        validation,
        test,
    }
}

pub const DEFAULT_LAMBDA_GRID: [f64; 4] = [0.1, 1.0, 10.0, 100.0];

#[derive(Debug, Clone, Serialize)]
pub struct LambdaSearch {
    pub lambda: f64,
    /// `(λ, validation MSE)` for every grid point.
    pub validation_mse: Vec<(f64, f64)>,
}

fn subset<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Pick λ from `grid` by validation MSE (ties go to the earlier grid entry).
pub fn select_lambda(
    xs: &[SparseVector],
    y: &[f64],
    split: &DataSplit,
    grid: &[f64],
) -> Result<LambdaSearch> {
    if grid.is_empty() {
        return Err(Error::invalid("lambda grid is empty"));
    }
    if split.validation.is_empty() {
        return Err(Error::invalid("validation split is empty"));
    }
    let (tx, ty) = (subset(xs, &split.train), subset(y, &split.train));
    let (vx, vy) = (subset(xs, &split.validation), subset(y, &split.validation));
    let mut validation_mse = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let model = train_ridge(&tx, &ty, &RidgeConfig { lambda, fit_intercept: true })?;
        let pred = vx.iter().map(|x| model.predict(x)).collect::<Result<Vec<_>>>()?;
        validation_mse.push((lambda, mse(&pred, &vy)?));
    }
    let lambda = validation_mse
        .iter()
        .fold(None::<(f64, f64)>, |best, &(l, m)| match best {
            Some((_, bm)) if bm <= m => best,
            _ => Some((l, m)),
        })
        .map(|(l, _)| l)
        .expect("grid is non-empty");
    Ok(LambdaSearch {
        lambda,
        validation_mse,
    })
}

/// Externally computed sentence scores, keyed by sentence id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    scores: HashMap<String, f64>,
}

impl ScoreTable {
    pub fn get(&self, sentence_id: &str) -> Option<f64> {
        self.scores.get(sentence_id).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn insert(&mut self, sentence_id: impl Into<String>, score: f64) -> Option<f64> {
        self.scores.insert(sentence_id.into(), score)
    }
}

impl FromIterator<(String, f64)> for ScoreTable {
    fn from_iter<I: IntoIterator<Item = (String, f64)>>(iter: I) -> Self {
        Self {
            scores: iter.into_iter().collect(),
        }
    }
}

/// Read `sentence_id<TAB>score` lines. Blank lines are skipped; a repeated id keeps the last value.
pub fn load_scores<R: BufRead>(reader: R) -> Result<ScoreTable> {
    let mut table = ScoreTable::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("scores", e))?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (id, raw) = line.split_once('\t').ok_or_else(|| Error::Record {
            line: lineno,
            message: "expected sentence_id<TAB>score".into(),
        })?;
        let score: f64 = raw.trim().parse().map_err(|_| Error::Record {
            line: lineno,
            message: format!("unparseable score {raw:?}"),
        })?;
        if !score.is_finite() {
            return Err(Error::Record {
                line: lineno,
                message: format!("non-finite score {raw:?}"),
            });
        }
        if table.insert(id.trim(), score).is_some() {
            log::warn!("scores line {lineno}: duplicate id {id:?}, keeping the later value");
        }
    }
    Ok(table)
}
