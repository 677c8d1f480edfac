//! ν-one-class SVM with a linear kernel, used to drop sentences that look nothing
//! like the economic survey texts it was trained on.
//!
//! The dual is
//!
//! ```text
//! min ½ αᵀQα   s.t.  0 ≤ α_i ≤ 1/(νℓ),  Σ α_i = 1,   Q_ij = ⟨x_i, x_j⟩
//! ```
//!
//! and is solved with two-variable (SMO) updates. On L2-normalized tfidf vectors
//! the kernel is cosine similarity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vectorize::SparseVector;

pub const OCSVM_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcsvmConfig {
    pub nu: f64,
    /// Stop once the maximal KKT violation falls below this.
    pub tol: f64,
    /// Cap on pair updates.
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for OcsvmConfig {
    fn default() -> Self {
        Self {
            nu: 0.1,
            tol: 1e-7,
            max_iter: 1_000_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OneClassSvm {
    support_vectors: Vec<SparseVector>,
    alphas: Vec<f64>,
    rho: f64,
    nu: f64,
    n_train: usize,
    // Σ α_i x_i; with a linear kernel the decision function is ⟨w, x⟩ − ρ.
    weights: Vec<f64>,
    objective: f64,
    iterations: usize,
}

struct Gram {
    n: usize,
    data: Vec<f64>,
}

impl Gram {
    fn new(xs: &[SparseVector]) -> Self {
        let n = xs.len();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let k = xs[i].dot(&xs[j]);
                data[i * n + j] = k;
                data[j * n + i] = k;
            }
        }
        Self { n, data }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

/// Train on `vectors`. Fails if ν is outside (0, 1] or the solver hits `max_iter`.
pub fn train_ocsvm(vectors: &[SparseVector], config: &OcsvmConfig) -> Result<OneClassSvm> {
    let nu = config.nu;
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(Error::invalid(format!("nu must lie in (0, 1], got {nu}")));
    }
    let l = vectors.len();
    if l == 0 {
        return Err(Error::invalid("one-class SVM needs at least one training vector"));
    }
    let dim = vectors[0].dim();
    if let Some(v) = vectors.iter().find(|v| v.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: v.dim(),
        });
    }

    let c = 1.0 / (nu * l as f64);
    let gram = Gram::new(vectors);

    let mut alpha = vec![0.0; l];
    let n_full = ((nu * l as f64).floor() as usize).min(l);
    alpha[..n_full].fill(c);
    if n_full < l {
        alpha[n_full] = (1.0 - n_full as f64 * c).max(0.0);
    }
    let mut grad: Vec<f64> = (0..l)
        .map(|i| gram.row(i).iter().zip(&alpha).map(|(q, a)| q * a).sum())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let random_phase = l.min(config.max_iter);
    let mut iterations = 0;
    let mut gap;

    loop {
        let (i_max, j_max, g) = max_violating_pair(&alpha, &grad, c);
        gap = g;
        if gap < config.tol {
            break;
        }
        if iterations >= config.max_iter {
            return Err(Error::NonConvergence {
                solver: "one-class SVM",
                iterations,
                gap,
            });
        }

        let (i, j) = if iterations < random_phase {
            random_pair(&alpha, &grad, c, config.tol, &mut rng).unwrap_or((i_max, j_max))
        } else {
            (i_max, j_max)
        };

        let (qi, qj) = (gram.row(i), gram.row(j));
        let curvature = (qi[i] + qj[j] - 2.0 * qi[j]).max(1e-12);
        let room_i = c - alpha[i];
        let room_j = alpha[j];
        let step = ((grad[j] - grad[i]) / curvature).min(room_i).min(room_j);
        if step <= 0.0 {
            // Cannot happen for a violating pair; guard against a stuck loop.
            return Err(Error::NonConvergence {
                solver: "one-class SVM",
                iterations,
                gap,
            });
        }
        alpha[i] = if step == room_i { c } else { alpha[i] + step };
        alpha[j] = if step == room_j { 0.0 } else { alpha[j] - step };
        for (g, (a, b)) in grad.iter_mut().zip(qi.iter().zip(qj)) {
            *g += step * (a - b);
        }
        iterations += 1;
    }

    let free: Vec<f64> = (0..l)
        .filter(|&t| alpha[t] > 0.0 && alpha[t] < c)
        .map(|t| grad[t])
        .collect();
    let rho = if free.is_empty() {
        (0..l)
            .filter(|&t| alpha[t] >= c)
            .map(|t| grad[t])
            .fold(f64::NEG_INFINITY, f64::max)
    } else {
        free.iter().sum::<f64>() / free.len() as f64
    };
    let objective = 0.5 * alpha.iter().zip(&grad).map(|(a, g)| a * g).sum::<f64>();

    let mut weights = vec![0.0; dim];
    let mut support_vectors = Vec::new();
    let mut alphas = Vec::new();
    for (x, &a) in vectors.iter().zip(&alpha) {
        if a > 0.0 {
            for (k, v) in x.iter() {
                weights[k] += a * v;
            }
            support_vectors.push(x.clone());
            alphas.push(a);
        }
    }

    log::debug!(
        "one-class SVM: l={l} nu={nu} iterations={iterations} gap={gap:e} n_sv={}",
        alphas.len()
    );

    Ok(OneClassSvm {
        support_vectors,
        alphas,
        rho,
        nu,
        n_train: l,
        weights,
        objective,
        iterations,
    })
}

/// Returns `(i, j, gap)` with `i = argmin G` over `α < C`, `j = argmax G` over `α > 0`.
fn max_violating_pair(alpha: &[f64], grad: &[f64], c: f64) -> (usize, usize, f64) {
    let mut i = usize::MAX;
    let mut j = usize::MAX;
    let mut g_up = f64::INFINITY;
    let mut g_low = f64::NEG_INFINITY;
    for t in 0..alpha.len() {
        if alpha[t] < c && grad[t] < g_up {
            g_up = grad[t];
            i = t;
        }
        if alpha[t] > 0.0 && grad[t] > g_low {
            g_low = grad[t];
            j = t;
        }
    }
    if i == usize::MAX || j == usize::MAX {
        return (0, 0, 0.0);
    }
    (i, j, g_low - g_up)
}

fn random_pair(
    alpha: &[f64],
    grad: &[f64],
    c: f64,
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> Option<(usize, usize)> {
    let i = rng.random_range(0..alpha.len());
    if alpha[i] >= c {
        return None;
    }
    let (j, g) = (0..alpha.len())
        .filter(|&t| alpha[t] > 0.0 && t != i)
        .map(|t| (t, grad[t]))
        .max_by(|a, b| a.1.total_cmp(&b.1))?;
    (g - grad[i] >= tol).then_some((i, j))
}

impl OneClassSvm {
    /// `Σ α_i ⟨sv_i, x⟩ − ρ`; the point is an inlier iff this is `≥ 0`.
    pub fn decision(&self, x: &SparseVector) -> f64 {
        x.iter()
            .filter(|(k, _)| *k < self.weights.len())
            .map(|(k, v)| v * self.weights[k])
            .sum::<f64>()
            - self.rho
    }

    pub fn is_inlier(&self, x: &SparseVector) -> bool {
        self.decision(x) >= 0.0
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn support_vectors(&self) -> &[SparseVector] {
        &self.support_vectors
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    /// Upper bound on each dual coefficient, `1/(νℓ)`.
    pub fn upper_bound(&self) -> f64 {
        1.0 / (self.nu * self.n_train as f64)
    }

    /// `½ αᵀQα` at the solution.
    pub fn objective(&self) -> f64 {
        self.objective
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn to_json(&self) -> Result<String> {
        let support_vectors = self
            .support_vectors
            .iter()
            .enumerate()
            .flat_map(|(r, sv)| sv.to_pairs().into_iter().map(move |(c, v)| (r, c, v)))
            .collect();
        let file = OcsvmFile {
            version: OCSVM_VERSION,
            kernel: "linear".into(),
            nu: self.nu,
            rho: self.rho,
            n_train: self.n_train,
            dim: self.weights.len(),
            alphas: self.alphas.clone(),
            support_vectors,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: OcsvmFile = serde_json::from_str(json)?;
        if file.version != OCSVM_VERSION {
            return Err(Error::Version {
                found: file.version,
                expected: OCSVM_VERSION,
            });
        }
        if file.kernel != "linear" {
            return Err(Error::invalid(format!("unsupported kernel {:?}", file.kernel)));
        }
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); file.alphas.len()];
        for &(r, c, v) in &file.support_vectors {
            rows.get_mut(r)
                .ok_or_else(|| Error::invalid("support vector row out of range"))?
                .push((c, v));
        }
        let support_vectors = rows
            .iter()
            .map(|pairs| SparseVector::from_pairs(pairs, file.dim))
            .collect::<Result<Vec<_>>>()?;
        let mut weights = vec![0.0; file.dim];
        for (sv, a) in support_vectors.iter().zip(&file.alphas) {
            for (k, v) in sv.iter() {
                weights[k] += a * v;
            }
        }
        let objective = 0.5 * weights.iter().map(|w| w * w).sum::<f64>();
        Ok(Self {
            support_vectors,
            alphas: file.alphas,
            rho: file.rho,
            nu: file.nu,
            n_train: file.n_train,
            weights,
            objective,
            iterations: 0,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct OcsvmFile {
    version: u32,
    kernel: String,
    nu: f64,
    rho: f64,
    n_train: usize,
    dim: usize,
    alphas: Vec<f64>,
    /// `(support vector row, feature column, value)` triplets.
    support_vectors: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FilterReport {
    pub inlier: ClassMetrics,
    pub outlier: ClassMetrics,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_metrics(tp: usize, fp: usize, fn_: usize) -> ClassMetrics {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    ClassMetrics {
        precision,
        recall,
        f1,
        support: tp + fn_,
    }
}

/// Macro-averaged precision/recall/F1 over the inlier and outlier classes.
/// Undefined ratios (no predictions for a class) count as 0.
pub fn macro_report(actual_inlier: &[bool], predicted_inlier: &[bool]) -> Result<FilterReport> {
    if actual_inlier.len() != predicted_inlier.len() {
        return Err(Error::DimensionMismatch {
            expected: actual_inlier.len(),
            got: predicted_inlier.len(),
        });
    }
    let mut m = [[0usize; 2]; 2];
    for (&a, &p) in actual_inlier.iter().zip(predicted_inlier) {
        m[usize::from(a)][usize::from(p)] += 1;
    }
    if m[1][0] + m[1][1] == 0 || m[0][0] + m[0][1] == 0 {
        return Err(Error::invalid("both inlier and outlier examples are required"));
    }
    let inlier = class_metrics(m[1][1], m[0][1], m[1][0]);
    let outlier = class_metrics(m[0][0], m[1][0], m[0][1]);
    Ok(FilterReport {
        inlier,
        outlier,
        macro_precision: (inlier.precision + outlier.precision) / 2.0,
        macro_recall: (inlier.recall + outlier.recall) / 2.0,
        macro_f1: (inlier.f1 + outlier.f1) / 2.0,
    })
}

pub fn evaluate_filter(
    model: &OneClassSvm,
    inliers: &[SparseVector],
    outliers: &[SparseVector],
) -> Result<FilterReport> {
    if inliers.is_empty() || outliers.is_empty() {
        return Err(Error::invalid("evaluation needs non-empty inlier and outlier sets"));
    }
    let actual: Vec<bool> = std::iter::repeat_n(true, inliers.len())
        .chain(std::iter::repeat_n(false, outliers.len()))
        .collect();
    let predicted: Vec<bool> = inliers
        .iter()
        .chain(outliers)
        .map(|x| model.is_inlier(x))
        .collect();
    macro_report(&actual, &predicted)
}
