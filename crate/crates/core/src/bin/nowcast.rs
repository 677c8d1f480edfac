use std::collections::BTreeMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use nowcast::calendar::BucketUnit;
use nowcast::contribution::{contribution_series, load_attention, ContributionOptions, CountMode, Kernel, Term};
use nowcast::corpus::{admitted_sentences, parse_survey, read_corpus, BigramTokenizer, SurveyResponse};
use nowcast::dfm::{fit_dfm, read_panel_csv, write_factor_csv, FitOptions};
use nowcast::index::{aggregate, di_series, pearson_series, score_sentences, IndexSeries, OutlierFilter, ReferenceSeries, Scorer, Variant};
use nowcast::outlier::OneClassSvm;
use nowcast::pipeline::{
    fit_vocabulary, open, read_scored, read_to_string, run_id, run_pipeline, train_outlier, train_sentiment,
    write_scored, RunArtifacts, RunConfig,
};
use nowcast::sentiment::{load_scores, RidgeModel};
use nowcast::server::{serve, ServedState};
use nowcast::synth::{generate, Signal, SynthConfig};
use nowcast::vectorize::TfidfModel;
use nowcast::{Error, Result};

#[derive(Parser)]
#[command(name = "nowcast", version, about = "News-text sentiment index and nowcasting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_bucket)]
    bucket: Option<BucketUnit>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    min_df: Option<usize>,
    /// Skip the outlier filter when scoring.
    #[arg(long)]
    no_filter: bool,
}

fn parse_bucket(s: &str) -> std::result::Result<BucketUnit, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_json(&read_to_string(path)?)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(bucket) = self.bucket {
            cfg.bucket = bucket;
        }
        if let Some(nu) = self.nu {
            cfg.nu = nu;
        }
        if let Some(min_df) = self.min_df {
            cfg.min_df = min_df;
        }
        if self.no_filter {
            cfg.filter = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SignalKind {
    Sine,
    Constant,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Uniform,
    Rollout,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, survey and planted truth series.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 24)]
        months: usize,
        #[arg(long, default_value_t = 40)]
        docs_per_month: usize,
        #[arg(long, default_value_t = 80)]
        responses_per_month: usize,
        #[arg(long, default_value_t = 0.3)]
        outlier_rate: f64,
        #[arg(long, value_enum, default_value_t = SignalKind::Sine)]
        signal: SignalKind,
        /// Sine period in months.
        #[arg(long, default_value_t = 12.0)]
        period: f64,
        /// Level of a constant signal.
        #[arg(long, default_value_t = 0.0)]
        level: f64,
    },
    /// Fit the vocabulary and one-class SVM on survey reasons.
    TrainOutlier {
        #[arg(long)]
        survey: PathBuf,
        /// Directory receiving tfidf.json and ocsvm.json.
        #[arg(long)]
        models: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Select λ and fit the ridge sentiment model (needs tfidf.json from train-outlier).
    TrainSentiment {
        #[arg(long)]
        survey: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Segment, filter and score a corpus into a sentence store.
    Score {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        models: PathBuf,
        /// Precomputed `sentence_id<TAB>score` lines used instead of the ridge model.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Aggregate a sentence store into an index CSV.
    Index {
        #[arg(long)]
        sentences: PathBuf,
        #[arg(long, default_value = "filtered")]
        variant: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Contribution of a term to the index per bucket.
    Contrib {
        #[arg(long)]
        sentences: PathBuf,
        #[arg(long)]
        term: String,
        #[arg(long, value_enum, default_value_t = Method::Uniform)]
        method: Method,
        /// JSONL attention stacks, required for the rollout method.
        #[arg(long)]
        attention: Option<PathBuf>,
        #[arg(long, default_value = "filtered")]
        variant: String,
        /// Count each sentence at most once instead of once per occurrence.
        #[arg(long)]
        per_sentence: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fit the single-factor model to a monthly panel.
    Dfm {
        #[arg(long)]
        panel: PathBuf,
        #[arg(long, default_value_t = 2)]
        p: usize,
        #[arg(long, default_value_t = 2)]
        q: usize,
        /// Directory receiving dfm_spec.json and factor.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Correlate an index with a reference series (or with the survey DI).
    Eval {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, conflicts_with = "survey")]
        reference: Option<PathBuf>,
        #[arg(long)]
        survey: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Full pipeline: train, score, index, reports.
    Run {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        survey: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Serve a run directory over HTTP.
    Serve {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long)]
        attention: Option<PathBuf>,
        /// Extra reference series as `name=path.csv`; repeatable.
        #[arg(long = "reference", value_parser = parse_named)]
        references: Vec<(String, PathBuf)>,
    },
}

fn parse_named(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or("expected name=path")?;
    if name.is_empty() {
        return Err("reference name is empty".into());
    }
    Ok((name.to_string(), PathBuf::from(path)))
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    std::fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_string(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn load_survey(path: &Path) -> Result<Vec<SurveyResponse>> {
    let batch = parse_survey(open(path)?)?;
    if !batch.skipped.is_empty() {
        log::warn!("{}: skipped {} rows with blank reasons", path.display(), batch.skipped.len());
    }
    batch.into_strict()
}

fn parse_variant(s: &str) -> Result<Variant> {
    Variant::parse(s).ok_or_else(|| Error::invalid(format!("unknown variant {s:?} (filtered|unfiltered)")))
}

fn write_index(series: &IndexSeries, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => series.write_csv(create(path)?),
        None => series.write_csv(std::io::stdout().lock()),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            seed,
            months,
            docs_per_month,
            responses_per_month,
            outlier_rate,
            signal,
            period,
            level,
        } => {
            let signal = match signal {
                SignalKind::Sine => Signal::Sine { period },
                SignalKind::Constant => Signal::Constant { value: level },
                SignalKind::Random => Signal::Random,
            };
            let cfg = SynthConfig {
                seed,
                months,
                docs_per_month,
                responses_per_month,
                outlier_rate,
                signal,
                ..SynthConfig::default()
            };
            generate(&cfg)?.write_to(&out)
        }
        Command::TrainOutlier { survey, models, cfg } => {
            let cfg = cfg.resolve()?;
            let survey = load_survey(&survey)?;
            let tfidf = fit_vocabulary(&survey, cfg.min_df)?;
            let svm = train_outlier(&survey, &tfidf, &cfg)?;
            write_string(&models.join("tfidf.json"), &tfidf.to_json()?)?;
            write_string(&models.join("ocsvm.json"), &svm.to_json()?)
        }
        Command::TrainSentiment { survey, models, cfg } => {
            let cfg = cfg.resolve()?;
            let survey = load_survey(&survey)?;
            let tfidf = TfidfModel::from_json(&read_to_string(&models.join("tfidf.json"))?)?;
            let (ridge, report) = train_sentiment(&survey, &tfidf, &cfg)?;
            write_string(&models.join("ridge.json"), &ridge.to_json()?)?;
            write_string(&models.join("sentiment_report.json"), &serde_json::to_string_pretty(&report)?)
        }
        Command::Score {
            corpus,
            models,
            scores,
            out,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let docs = read_corpus(open(&corpus)?)?;
            let tfidf = TfidfModel::from_json(&read_to_string(&models.join("tfidf.json"))?)?;
            let svm = if cfg.filter {
                Some(OneClassSvm::from_json(&read_to_string(&models.join("ocsvm.json"))?)?)
            } else {
                None
            };
            let filter = svm.as_ref().map(|svm| OutlierFilter { tfidf: &tfidf, svm });
            let table = scores.as_deref().map(|p| open(p).and_then(load_scores)).transpose()?;
            let ridge;
            let scorer = match &table {
                Some(table) => Scorer::Table(table),
                None => {
                    ridge = RidgeModel::from_json(&read_to_string(&models.join("ridge.json"))?)?;
                    Scorer::Ridge {
                        tfidf: &tfidf,
                        model: &ridge,
                    }
                }
            };
            let sentences = admitted_sentences(&docs, &BigramTokenizer);
            let scored = score_sentences(&sentences, filter.as_ref(), &scorer)?;
            write_scored(create(&out)?, &scored)
        }
        Command::Index {
            sentences,
            variant,
            out,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let scored = read_scored(open(&sentences)?)?;
            let series = aggregate(&scored, cfg.bucket, parse_variant(&variant)?)?;
            write_index(&series, out.as_deref())
        }
        Command::Contrib {
            sentences,
            term,
            method,
            attention,
            variant,
            per_sentence,
            out,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let scored = read_scored(open(&sentences)?)?;
            let term = Term::new(&term, &BigramTokenizer)?;
            let table = attention.as_deref().map(|p| open(p).and_then(load_attention)).transpose()?;
            let kernel = match (method, &table) {
                (Method::Uniform, _) => Kernel::Uniform,
                (Method::Rollout, Some(t)) => Kernel::Rollout(t),
                (Method::Rollout, None) => return Err(Error::invalid("the rollout method needs --attention")),
            };
            let options = ContributionOptions {
                variant: Some(parse_variant(&variant)?),
                mode: if per_sentence {
                    CountMode::PerSentence
                } else {
                    CountMode::PerOccurrence
                },
            };
            let series = contribution_series(&scored, &term, cfg.bucket, kernel, options)?;
            match out {
                Some(path) => series.write_csv(create(&path)?),
                None => series.write_csv(std::io::stdout().lock()),
            }
        }
        Command::Dfm { panel, p, q, out } => {
            let panel = read_panel_csv(open(&panel)?)?;
            let fit = fit_dfm(&panel.y, p, q, &FitOptions::default())?;
            log::info!("factor model: loglik {:.4} after {} iterations", fit.loglik, fit.iterations);
            let spec = serde_json::json!({
                "series": panel.names,
                "spec": fit.spec,
                "loglik": fit.loglik,
                "iterations": fit.iterations,
            });
            write_string(&out.join("dfm_spec.json"), &serde_json::to_string_pretty(&spec)?)?;
            write_factor_csv(create(&out.join("factor.csv"))?, &panel.months, &fit)
        }
        Command::Eval {
            index,
            reference,
            survey,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let series = IndexSeries::read_csv(open(&index)?, BucketUnit::Month)?;
            let reference = match (reference, survey) {
                (Some(path), _) => ReferenceSeries::read_csv(open(&path)?)?,
                (None, Some(path)) => di_series(&load_survey(&path)?, &cfg.di_weights)?,
                (None, None) => return Err(Error::invalid("eval needs --reference or --survey")),
            };
            let r = pearson_series(&series.pairs(), &reference.pairs())?;
            println!("{}", serde_json::json!({ "pearson": r }));
            Ok(())
        }
        Command::Run {
            corpus,
            survey,
            out,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let corpus_bytes = std::fs::read(&corpus).map_err(|e| Error::io(corpus.display().to_string(), e))?;
            let survey_bytes = std::fs::read(&survey).map_err(|e| Error::io(survey.display().to_string(), e))?;
            let docs = read_corpus(&corpus_bytes[..])?;
            let responses = parse_survey(&survey_bytes[..])?.into_strict()?;
            let id = run_id(&cfg, &[&corpus_bytes, &survey_bytes])?;
            let output = run_pipeline(&docs, &responses, &cfg)?;
            let manifest = output.write(&out, &id)?;
            println!("{}", serde_json::to_string_pretty(&output.report)?);
            log::info!("run {} written to {}", manifest.run_id, out.display());
            Ok(())
        }
        Command::Serve {
            run,
            addr,
            attention,
            references,
        } => {
            let mut state = ServedState::from_artifacts(RunArtifacts::load(&run)?);
            if let Some(path) = attention {
                state.attention = Some(load_attention(open(&path)?)?);
            }
            let extra: BTreeMap<String, ReferenceSeries> = references
                .into_iter()
                .map(|(name, path)| Ok((name, ReferenceSeries::read_csv(open(&path)?)?)))
                .collect::<Result<_>>()?;
            state.references.extend(extra);
            let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
            runtime.block_on(serve(addr, state))
        }
    }
}

fn stage_name(command: &Command) -> &'static str {
    match command {
        Command::Synth { .. } => "synth",
        Command::TrainOutlier { .. } => "train-outlier",
        Command::TrainSentiment { .. } => "train-sentiment",
        Command::Score { .. } => "score",
        Command::Index { .. } => "index",
        Command::Contrib { .. } => "contrib",
        Command::Dfm { .. } => "dfm",
        Command::Eval { .. } => "eval",
        Command::Run { .. } => "run",
        Command::Serve { .. } => "serve",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let stage = stage_name(&cli.command);
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {stage}: {e}");
            ExitCode::FAILURE
        }
    }
}
