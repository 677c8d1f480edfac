//! Bag-of-words vocabulary with smoothed tfidf weighting and sparse vectors.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TFIDF_VERSION: u32 = 1;

/// Sparse real vector with strictly increasing indices and nonzero values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseVector {
    indices: Vec<usize>,
    values: Vec<f64>,
    dim: usize,
}

impl SparseVector {
    pub fn new(indices: Vec<usize>, values: Vec<f64>, dim: usize) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::DimensionMismatch {
                expected: indices.len(),
                got: values.len(),
            });
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("sparse indices must be strictly increasing"));
        }
        if indices.last().is_some_and(|&i| i >= dim) {
            return Err(Error::invalid("sparse index out of range"));
        }
        if values.iter().any(|v| *v == 0.0 || !v.is_finite()) {
            return Err(Error::invalid("sparse values must be finite and nonzero"));
        }
        Ok(Self {
            indices,
            values,
            dim,
        })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            indices: Vec::new(),
            values: Vec::new(),
            dim,
        }
    }

    pub fn from_dense(dense: &[f64]) -> Self {
        let (indices, values) = dense
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .unzip();
        Self {
            indices,
            values,
            dim: dense.len(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut a, mut b) = (0, 0);
        let mut acc = 0.0;
        while a < self.indices.len() && b < other.indices.len() {
            match self.indices[a].cmp(&other.indices[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.values[a] * other.values[b];
                    a += 1;
                    b += 1;
                }
            }
        }
        acc
    }

    pub fn dot_dense(&self, dense: &[f64]) -> f64 {
        self.iter().map(|(i, v)| v * dense[i]).sum()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, factor: f64) -> SparseVector {
        if factor == 0.0 {
            return SparseVector::zeros(self.dim);
        }
        SparseVector {
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| v * factor).collect(),
            dim: self.dim,
        }
    }

    /// `(index, value)` pairs, the sparse triplet form used in model files.
    pub(crate) fn to_pairs(&self) -> Vec<(usize, f64)> {
        self.iter().collect()
    }

    pub(crate) fn from_pairs(pairs: &[(usize, f64)], dim: usize) -> Result<Self> {
        let (indices, values) = pairs.iter().copied().unzip();
        Self::new(indices, values, dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TfidfModel {
    vocabulary: HashMap<String, usize>,
    idf: Vec<f64>,
    n_docs: usize,
}

#[derive(Serialize, Deserialize)]
struct TfidfFile {
    version: u32,
    vocabulary: BTreeMap<String, usize>,
    idf: Vec<f64>,
    n_docs: usize,
}

/// Fit vocabulary and idf weights. Tokens seen in fewer than `min_df` documents are dropped.
///
/// `idf[t] = ln((1 + n_docs) / (1 + df[t])) + 1`. Column indices follow lexicographic token order.
pub fn fit_tfidf<S: AsRef<str>>(docs: &[Vec<S>], min_df: usize) -> Result<TfidfModel> {
    if docs.is_empty() {
        return Err(Error::invalid("cannot fit tfidf on an empty document set"));
    }
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in docs {
        let mut uniq: Vec<&str> = doc.iter().map(AsRef::as_ref).collect();
        uniq.sort_unstable();
        uniq.dedup();
        for t in uniq {
            *df.entry(t).or_default() += 1;
        }
    }
    let n = docs.len() as f64;
    let mut vocabulary = HashMap::new();
    let mut idf = Vec::new();
    for (token, count) in df.into_iter().filter(|(_, c)| *c >= min_df.max(1)) {
        vocabulary.insert(token.to_string(), idf.len());
        idf.push(((1.0 + n) / (1.0 + count as f64)).ln() + 1.0);
    }
    if idf.is_empty() {
        return Err(Error::invalid(format!(
            "vocabulary is empty after pruning with min_df={min_df}"
        )));
    }
    Ok(TfidfModel {
        vocabulary,
        idf,
        n_docs: docs.len(),
    })
}

impl TfidfModel {
    pub fn dim(&self) -> usize {
        self.idf.len()
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.vocabulary.get(token).copied()
    }

    pub fn idf(&self, token: &str) -> Option<f64> {
        self.index_of(token).map(|i| self.idf[i])
    }

    /// Count-times-idf weights, L2-normalized. Out-of-vocabulary tokens are ignored.
    pub fn transform<S: AsRef<str>>(&self, tokens: &[S]) -> SparseVector {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for t in tokens {
            if let Some(&i) = self.vocabulary.get(t.as_ref()) {
                *counts.entry(i).or_default() += 1.0;
            }
        }
        let (indices, mut values): (Vec<usize>, Vec<f64>) = counts
            .into_iter()
            .map(|(i, c)| (i, c * self.idf[i]))
            .unzip();
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        SparseVector {
            indices,
            values,
            dim: self.dim(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = TfidfFile {
            version: TFIDF_VERSION,
            vocabulary: self.vocabulary.iter().map(|(k, v)| (k.clone(), *v)).collect(),
            idf: self.idf.clone(),
            n_docs: self.n_docs,
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: TfidfFile = serde_json::from_str(json)?;
        if file.version != TFIDF_VERSION {
            return Err(Error::Version {
                found: file.version,
                expected: TFIDF_VERSION,
            });
        }
        let v = file.idf.len();
        let mut seen = vec![false; v];
        for &i in file.vocabulary.values() {
            if i >= v || std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid("vocabulary indices must be dense 0..V-1"));
            }
        }
        if file.vocabulary.len() != v || file.idf.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::invalid("idf must be positive for every vocabulary token"));
        }
        Ok(Self {
            vocabulary: file.vocabulary.into_iter().collect(),
            idf: file.idf,
            n_docs: file.n_docs,
        })
    }
}
