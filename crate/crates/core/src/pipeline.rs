//! End-to-end run: train the filter and sentiment models on survey reasons, score the
//! news corpus, aggregate indices, and write every artifact to one directory.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calendar::BucketUnit;
use crate::corpus::{admitted_sentences, BigramTokenizer, Document, SurveyResponse, Tokenizer};
use crate::error::{Error, Result};
use crate::index::{
    aggregate, di_series, pearson_series, score_sentences, DiWeights, IndexSeries, OutlierFilter,
    ReferenceSeries, ScoredSentence, Scorer, Variant,
};
use crate::outlier::{train_ocsvm, OcsvmConfig, OneClassSvm};
use crate::sentiment::{
    encode_label, mse, select_lambda, split_indices, train_ridge, LambdaSearch, RidgeConfig, RidgeModel,
    DEFAULT_LAMBDA_GRID,
};
use crate::vectorize::{fit_tfidf, SparseVector, TfidfModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub bucket: BucketUnit,
    pub nu: f64,
    pub min_df: usize,
    /// Apply the outlier filter to news sentences.
    pub filter: bool,
    pub lambda_grid: Vec<f64>,
    /// Training vectors for the one-class SVM are subsampled to at most this many.
    pub max_outlier_train: usize,
    pub di_weights: DiWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            bucket: BucketUnit::Month,
            nu: 0.1,
            min_df: 2,
            filter: true,
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            max_outlier_train: 2000,
            di_weights: DiWeights::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(Error::invalid(format!("nu must lie in (0, 1], got {}", self.nu)));
        }
        if self.min_df == 0 {
            return Err(Error::invalid("min_df must be at least 1"));
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::invalid("lambda grid must be non-empty and nonnegative"));
        }
        if self.max_outlier_train == 0 {
            return Err(Error::invalid("max_outlier_train must be positive"));
        }
        Ok(())
    }
}

fn reason_tokens(survey: &[SurveyResponse], tokenizer: &dyn Tokenizer) -> Vec<Vec<String>> {
    survey.iter().map(|r| tokenizer.tokenize(&r.reason)).collect()
}

/// Fit the shared tfidf vocabulary on survey reasons.
pub fn fit_vocabulary(survey: &[SurveyResponse], min_df: usize) -> Result<TfidfModel> {
    if survey.is_empty() {
        return Err(Error::invalid("survey is empty"));
    }
    fit_tfidf(&reason_tokens(survey, &BigramTokenizer), min_df)
}

/// Train the one-class SVM on (a seeded subsample of) the vectorized survey reasons.
pub fn train_outlier(survey: &[SurveyResponse], tfidf: &TfidfModel, cfg: &RunConfig) -> Result<OneClassSvm> {
    let mut vectors: Vec<SparseVector> = reason_tokens(survey, &BigramTokenizer)
        .iter()
        .map(|t| tfidf.transform(t))
        .filter(|v| v.nnz() > 0)
        .collect();
    if vectors.len() > cfg.max_outlier_train {
        vectors.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
        vectors.truncate(cfg.max_outlier_train);
    }
    train_ocsvm(
        &vectors,
        &OcsvmConfig {
            nu: cfg.nu,
            seed: cfg.seed,
            ..OcsvmConfig::default()
        },
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct SentimentReport {
    pub search: LambdaSearch,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub test_mse: f64,
    /// Test MSE of always predicting the training mean.
    pub baseline_mse: f64,
}

/// Choose λ on the validation split, then report held-out test error.
pub fn train_sentiment(
    survey: &[SurveyResponse],
    tfidf: &TfidfModel,
    cfg: &RunConfig,
) -> Result<(RidgeModel, SentimentReport)> {
    let xs: Vec<SparseVector> = reason_tokens(survey, &BigramTokenizer).iter().map(|t| tfidf.transform(t)).collect();
    let y: Vec<f64> = survey.iter().map(|r| encode_label(r.condition).value()).collect();
    if xs.len() < 10 {
        return Err(Error::invalid(format!("need at least 10 survey responses, got {}", xs.len())));
    }
    let split = split_indices(xs.len(), cfg.seed);
    let search = select_lambda(&xs, &y, &split, &cfg.lambda_grid)?;
    let pick = |idx: &[usize]| -> (Vec<SparseVector>, Vec<f64>) {
        (idx.iter().map(|&i| xs[i].clone()).collect(), idx.iter().map(|&i| y[i]).collect())
    };
    let (tx, ty) = pick(&split.train);
    let (sx, sy) = pick(&split.test);
    let model = train_ridge(
        &tx,
        &ty,
        &RidgeConfig {
            lambda: search.lambda,
            fit_intercept: true,
        },
    )?;
    let pred = sx.iter().map(|x| model.predict(x)).collect::<Result<Vec<_>>>()?;
    let mean = ty.iter().sum::<f64>() / ty.len() as f64;
    let report = SentimentReport {
        n_train: split.train.len(),
        n_validation: split.validation.len(),
        n_test: split.test.len(),
        test_mse: mse(&pred, &sy)?,
        baseline_mse: mse(&vec![mean; sy.len()], &sy)?,
        search,
    };
    Ok((model, report))
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub n_documents: usize,
    pub n_sentences: usize,
    pub n_inliers: usize,
    pub sentiment: SentimentReport,
    pub outlier_rho: f64,
    pub outlier_support_vectors: usize,
    /// Correlation of each monthly index variant with the survey DI, when computable.
    pub corr_filtered_di: Option<f64>,
    pub corr_unfiltered_di: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: RunConfig,
    pub tfidf: TfidfModel,
    pub svm: OneClassSvm,
    pub ridge: RidgeModel,
    pub scored: Vec<ScoredSentence>,
    pub filtered: IndexSeries,
    pub unfiltered: IndexSeries,
    pub di: ReferenceSeries,
    pub report: RunReport,
}

pub fn run_pipeline(docs: &[Document], survey: &[SurveyResponse], cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let tfidf = fit_vocabulary(survey, cfg.min_df)?;
    log::info!("vocabulary: {} terms from {} reasons", tfidf.dim(), survey.len());
    let svm = train_outlier(survey, &tfidf, cfg)?;
    log::info!("one-class SVM: {} support vectors, rho {:.4}", svm.support_vectors().len(), svm.rho());
    let (ridge, sentiment) = train_sentiment(survey, &tfidf, cfg)?;
    log::info!("ridge: lambda {} test mse {:.4}", ridge.lambda(), sentiment.test_mse);

    let sentences = admitted_sentences(docs, &BigramTokenizer);
    if sentences.is_empty() {
        return Err(Error::invalid("corpus has no sentences"));
    }
    let filter = OutlierFilter { tfidf: &tfidf, svm: &svm };
    let scorer = Scorer::Ridge {
        tfidf: &tfidf,
        model: &ridge,
    };
    let scored = score_sentences(&sentences, cfg.filter.then_some(&filter), &scorer)?;
    let filtered = aggregate(&scored, cfg.bucket, Variant::Filtered)?;
    let unfiltered = aggregate(&scored, cfg.bucket, Variant::Unfiltered)?;
    let di = di_series(survey, &cfg.di_weights)?;

    let monthly_corr = |variant| -> Option<f64> {
        let series = aggregate(&scored, BucketUnit::Month, variant).ok()?;
        pearson_series(&series.pairs(), &di.pairs()).ok()
    };
    let report = RunReport {
        n_documents: docs.len(),
        n_sentences: scored.len(),
        n_inliers: scored.iter().filter(|s| s.inlier).count(),
        sentiment,
        outlier_rho: svm.rho(),
        outlier_support_vectors: svm.support_vectors().len(),
        corr_filtered_di: monthly_corr(Variant::Filtered),
        corr_unfiltered_di: monthly_corr(Variant::Unfiltered),
    };
    Ok(RunOutput {
        config: cfg.clone(),
        tfidf,
        svm,
        ridge,
        scored,
        filtered,
        unfiltered,
        di,
        report,
    })
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(*b)).wrapping_mul(0x0100_0000_01b3))
}

/// Run id: hash of the configuration and the raw input bytes.
pub fn run_id(cfg: &RunConfig, inputs: &[&[u8]]) -> Result<String> {
    let mut buf = serde_json::to_vec(cfg)?;
    for input in inputs {
        buf.extend_from_slice(&(input.len() as u64).to_le_bytes());
        buf.extend_from_slice(input);
    }
    Ok(format!("{:016x}", fnv1a(&buf)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub config: RunConfig,
    pub files: Vec<String>,
    pub n_sentences: usize,
    pub bucket: BucketUnit,
}

pub const SENTENCES_FILE: &str = "sentences.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REFERENCE_FILE: &str = "di.csv";

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    let mut w = create(dir, name)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(dir.join(name).display().to_string(), e))
}

pub fn write_scored<W: Write>(mut writer: W, scored: &[ScoredSentence]) -> Result<()> {
    for s in scored {
        serde_json::to_writer(&mut writer, s)?;
        writer.write_all(b"\n").map_err(|e| Error::io("sentences", e))?;
    }
    writer.flush().map_err(|e| Error::io("sentences", e))
}

pub fn read_scored<R: BufRead>(reader: R) -> Result<Vec<ScoredSentence>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("sentences", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Record {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

impl RunOutput {
    /// Write all artifacts into `dir` (created if needed) and return the manifest.
    pub fn write(&self, dir: &Path, run_id: &str) -> Result<Manifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        write_text(dir, "tfidf.json", &self.tfidf.to_json()?)?;
        write_text(dir, "ocsvm.json", &self.svm.to_json()?)?;
        write_text(dir, "ridge.json", &self.ridge.to_json()?)?;
        write_scored(create(dir, SENTENCES_FILE)?, &self.scored)?;
        self.filtered.write_csv(create(dir, "index_filtered.csv")?)?;
        self.unfiltered.write_csv(create(dir, "index_unfiltered.csv")?)?;
        self.di.write_csv(create(dir, REFERENCE_FILE)?)?;
        write_text(dir, "reports.json", &serde_json::to_string_pretty(&self.report)?)?;
        let manifest = Manifest {
            run_id: run_id.to_string(),
            config: self.config.clone(),
            files: [
                "tfidf.json",
                "ocsvm.json",
                "ridge.json",
                SENTENCES_FILE,
                "index_filtered.csv",
                "index_unfiltered.csv",
                REFERENCE_FILE,
                "reports.json",
            ]
            .map(String::from)
            .to_vec(),
            n_sentences: self.scored.len(),
            bucket: self.config.bucket,
        };
        write_text(dir, MANIFEST_FILE, &serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Artifacts the query server needs, loaded from a run directory.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub scored: Vec<ScoredSentence>,
    pub reference: Option<ReferenceSeries>,
}

impl RunArtifacts {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&read_to_string(&dir.join(MANIFEST_FILE))?)?;
        let scored = read_scored(open(&dir.join(SENTENCES_FILE))?)?;
        let ref_path = dir.join(REFERENCE_FILE);
        let reference = if ref_path.exists() {
            Some(ReferenceSeries::read_csv(open(&ref_path)?)?)
        } else {
            None
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            scored,
            reference,
        })
    }
}
