//! Seeded synthetic corpus and survey with a known latent sentiment path.
//!
//! Words are drawn from disjoint pseudo-word lexicons: economic terms, positive and
//! negative sentiment words, and off-topic vocabulary. Economic news sentences and
//! survey reasons mix economic terms with sentiment words whose polarity tracks the
//! latent monthly level. Off-topic documents use their own vocabulary and a sentiment
//! level unrelated to the economy.

use std::collections::HashSet;
use std::path::Path;

use chrono::Days;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};
use serde::{Deserialize, Serialize};

use crate::calendar::Month;
use crate::corpus::{write_corpus, write_survey, Condition, Document, SurveyResponse};
use crate::error::{Error, Result};
use crate::index::ReferenceSeries;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub start: Month,
    pub months: usize,
    pub docs_per_month: usize,
    pub responses_per_month: usize,
    /// Average share of off-topic documents; the monthly share varies around it.
    pub outlier_rate: f64,
    pub signal: Signal,
    /// Words per sentiment polarity; the economic and off-topic lexicons scale with it.
    pub lexicon_size: usize,
}

/// Shape of the planted monthly sentiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signal {
    /// `sin(2π k / period)` for month k.
    Sine { period: f64 },
    Constant { value: f64 },
    /// tanh of a persistent AR(1).
    Random,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            start: Month::new(2019, 1).expect("valid month"),
            months: 24,
            docs_per_month: 40,
            responses_per_month: 80,
            outlier_rate: 0.3,
            signal: Signal::Sine { period: 12.0 },
            lexicon_size: 60,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub documents: Vec<Document>,
    pub survey: Vec<SurveyResponse>,
    /// Latent economic sentiment per month, in [−1, 1].
    pub truth: Vec<(Month, f64)>,
    /// Ids of off-topic documents.
    pub off_topic: HashSet<String>,
}

impl SyntheticData {
    pub fn is_economic(&self, doc_id: &str) -> bool {
        !self.off_topic.contains(doc_id)
    }

    /// Writes `corpus.jsonl`, `survey.csv` and `truth.csv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let create = |name: &str| {
            let path = dir.join(name);
            std::fs::File::create(&path)
                .map(std::io::BufWriter::new)
                .map_err(|e| Error::io(path.display().to_string(), e))
        };
        write_corpus(create("corpus.jsonl")?, &self.documents)?;
        write_survey(create("survey.csv")?, &self.survey)?;
        ReferenceSeries::new(self.truth.clone())?.write_csv(create("truth.csv")?)?;
        Ok(())
    }
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "h", "j", "k", "l", "m", "r", "s", "t", "v", "w"];
const ZIPF_EXPONENT: f64 = 1.3;
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// `size` distinct pseudo-words sharing `prefix`, built from consonant–vowel syllables.
fn lexicon(prefix: &str, size: usize) -> Vec<String> {
    let syllables: Vec<String> = ONSETS.iter().flat_map(|c| VOWELS.iter().map(move |v| format!("{c}{v}"))).collect();
    let n = syllables.len();
    // 23 is coprime to 70, so the first syllable cycles through all of them.
    (0..size)
        .map(|k| {
            let mut word = format!("{prefix}{}", syllables[(k * 23) % n]);
            let mut rest = k / n;
            loop {
                word.push_str(&syllables[(rest + k) % n]);
                rest /= n;
                if rest == 0 {
                    break;
                }
            }
            word
        })
        .collect()
}

struct Lexicons {
    economic: Vec<String>,
    positive: Vec<String>,
    negative: Vec<String>,
    off_topic: Vec<String>,
}

impl Lexicons {
    fn new(size: usize) -> Self {
        Self {
            economic: lexicon("q", 2 * size),
            positive: lexicon("p", size),
            negative: lexicon("n", size),
            off_topic: lexicon("z", 5 * size / 2),
        }
    }
}

struct Writer<'a> {
    lex: &'a Lexicons,
    rng: ChaCha8Rng,
    zipf: Zipf<f64>,
}

impl Writer<'_> {
    fn economic_word(&mut self) -> &str {
        let rank = self.zipf.sample(&mut self.rng) as usize;
        &self.lex.economic[(rank - 1).min(self.lex.economic.len() - 1)]
    }

    fn sentiment_word(&mut self, p_positive: f64) -> &str {
        let pool = if self.rng.random_bool(p_positive.clamp(0.0, 1.0)) {
            &self.lex.positive
        } else {
            &self.lex.negative
        };
        pool.choose(&mut self.rng).expect("non-empty lexicon")
    }

    fn economic_sentence(&mut self, p_positive: f64) -> String {
        let n_econ = self.rng.random_range(2..=4);
        let n_sent = self.rng.random_range(3..=5);
        let mut words: Vec<String> = (0..n_econ).map(|_| self.economic_word().to_string()).collect();
        words.extend((0..n_sent).map(|_| self.sentiment_word(p_positive).to_string()));
        self.shuffle_join(words)
    }

    fn off_topic_sentence(&mut self, p_positive: f64) -> String {
        let n = self.rng.random_range(4..=7);
        let mut words: Vec<String> = (0..n)
            .map(|_| self.lex.off_topic.choose(&mut self.rng).expect("non-empty").clone())
            .collect();
        if self.rng.random_bool(0.5) {
            words.push(self.sentiment_word(p_positive).to_string());
        }
        self.shuffle_join(words)
    }

    fn shuffle_join(&mut self, mut words: Vec<String>) -> String {
        use rand::seq::SliceRandom;
        words.shuffle(&mut self.rng);
        words.join(" ")
    }
}

fn condition_from(z: f64) -> Condition {
    match z {
        z if z > 1.0 => Condition::VeryGood,
        z if z > 0.35 => Condition::Good,
        z if z > -0.35 => Condition::Neutral,
        z if z > -1.0 => Condition::Bad,
        _ => Condition::VeryBad,
    }
}

/// Smooth path in (−1, 1): tanh of a persistent AR(1).
fn latent_path(rng: &mut ChaCha8Rng, months: usize, persistence: f64) -> Vec<f64> {
    let noise = Normal::new(0.0, 0.45).expect("valid normal");
    let mut level = noise.sample(rng);
    (0..months)
        .map(|_| {
            level = persistence * level + noise.sample(rng);
            level.tanh()
        })
        .collect()
}

pub fn generate(config: &SynthConfig) -> Result<SyntheticData> {
    if config.months < 2 {
        return Err(Error::invalid("synthetic data needs at least two months"));
    }
    if config.docs_per_month == 0 || config.responses_per_month == 0 {
        return Err(Error::invalid("synthetic data needs documents and survey responses every month"));
    }
    if config.lexicon_size < 4 {
        return Err(Error::invalid(format!("lexicon size {} is too small (minimum 4)", config.lexicon_size)));
    }
    if !(0.0..1.0).contains(&config.outlier_rate) {
        return Err(Error::invalid("outlier rate must lie in [0, 1)"));
    }
    let lex = Lexicons::new(config.lexicon_size);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let latent = match config.signal {
        Signal::Sine { period } if period > 0.0 => (0..config.months)
            .map(|k| (std::f64::consts::TAU * k as f64 / period).sin())
            .collect(),
        Signal::Sine { .. } => return Err(Error::invalid("sine period must be positive")),
        Signal::Constant { value } if (-1.0..=1.0).contains(&value) => vec![value; config.months],
        Signal::Constant { .. } => return Err(Error::invalid("constant signal must lie in [-1, 1]")),
        Signal::Random => latent_path(&mut rng, config.months, 0.8),
    };
    let distractor = latent_path(&mut rng, config.months, 0.8);
    let mut writer = Writer {
        lex: &lex,
        rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed),
        zipf: Zipf::new(lex.economic.len() as f64, ZIPF_EXPONENT).expect("valid zipf"),
    };
    let respondent = Normal::new(0.0, 0.6).expect("valid normal");

    let mut documents = Vec::new();
    let mut survey = Vec::new();
    let mut off_topic = HashSet::new();
    let mut truth = Vec::with_capacity(config.months);
    for (k, (&level, &other)) in latent.iter().zip(&distractor).enumerate() {
        let month = config.start.plus(k as u32);
        truth.push((month, level));
        let rate = (config.outlier_rate + 0.15 * (2.0 * rng.random::<f64>() - 1.0)).clamp(0.0, 0.95);
        let days = month.succ().first_day().signed_duration_since(month.first_day()).num_days() as u64;

        for j in 0..config.docs_per_month {
            let id = format!("d{:04}-{j:03}", k);
            let date = month.first_day() + Days::new(rng.random_range(0..days));
            let economic = !rng.random_bool(rate);
            let n_sent = rng.random_range(2..=5);
            let (title, body) = if economic {
                let p = 0.5 + 0.4 * level;
                let title = writer.economic_sentence(p);
                let body: Vec<String> = (0..n_sent).map(|_| writer.economic_sentence(p) + ".").collect();
                (title, body)
            } else {
                off_topic.insert(id.clone());
                let p = 0.5 + 0.4 * other;
                let title = writer.off_topic_sentence(p);
                let body: Vec<String> = (0..n_sent).map(|_| writer.off_topic_sentence(p) + ".").collect();
                (title, body)
            };
            documents.push(Document {
                id,
                date,
                title,
                body: body.join(" "),
            });
        }

        for r in 0..config.responses_per_month {
            let condition = condition_from(1.2 * level + respondent.sample(&mut rng));
            let label = crate::sentiment::encode_label(condition).value();
            let reason = writer.economic_sentence(0.5 + 0.22 * label);
            survey.push(SurveyResponse {
                region: format!("region{}", r % 6),
                occupation: format!("sector{}", r % 4),
                condition,
                reason,
                month,
            });
        }
    }
    Ok(SyntheticData {
        documents,
        survey,
        truth,
        off_topic,
    })
}

/// Two disjoint-topic text sets: `n_economic` economic sentences of neutral tone and
/// `n_off_topic` off-topic sentences.
pub fn topic_corpora(n_economic: usize, n_off_topic: usize, seed: u64) -> (Vec<String>, Vec<String>) {
    let lex = Lexicons::new(SynthConfig::default().lexicon_size);
    let mut writer = Writer {
        lex: &lex,
        rng: ChaCha8Rng::seed_from_u64(seed),
        zipf: Zipf::new(lex.economic.len() as f64, ZIPF_EXPONENT).expect("valid zipf"),
    };
    let economic = (0..n_economic).map(|_| writer.economic_sentence(0.5)).collect();
    let off_topic = (0..n_off_topic).map(|_| writer.off_topic_sentence(0.5)).collect();
    (economic, off_topic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{segment_sentences, BigramTokenizer};

    #[test]
    fn lexicons_are_disjoint() {
        let lex = Lexicons::new(60);
        let all: Vec<&String> = lex.economic.iter().chain(&lex.positive).chain(&lex.negative).chain(&lex.off_topic).collect();
        let unique: HashSet<&String> = all.iter().copied().collect();
        assert_eq!(unique.len(), all.len());
    }

    #[test]
    fn seeded_and_shaped() {
        let cfg = SynthConfig {
            months: 3,
            docs_per_month: 10,
            responses_per_month: 5,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.documents, b.documents);
        assert_eq!(a.survey, b.survey);
        assert_eq!(a.documents.len(), 30);
        assert_eq!(a.survey.len(), 15);
        assert_eq!(a.truth.len(), 3);
        for doc in &a.documents {
            assert_eq!(Month::of(doc.date), a.truth[doc.id[1..5].parse::<usize>().unwrap()].0);
            assert!(segment_sentences(doc, &BigramTokenizer).len() >= 3);
        }
        let c = generate(&SynthConfig { seed: 9, ..cfg }).unwrap();
        assert_ne!(a.documents, c.documents);
    }

    #[test]
    fn constant_signal_and_degenerate_configs() {
        let cfg = SynthConfig {
            months: 4,
            docs_per_month: 2,
            responses_per_month: 2,
            signal: Signal::Constant { value: 0.0 },
            ..Default::default()
        };
        assert!(generate(&cfg).unwrap().truth.iter().all(|(_, v)| *v == 0.0));
        assert!(generate(&SynthConfig { months: 1, ..cfg }).is_err());
        assert!(generate(&SynthConfig { lexicon_size: 1, ..cfg }).is_err());
        assert!(generate(&SynthConfig { signal: Signal::Sine { period: 0.0 }, ..cfg }).is_err());
    }

    #[test]
    fn files_round_trip() {
        let data = generate(&SynthConfig {
            months: 2,
            docs_per_month: 4,
            responses_per_month: 4,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.write_to(dir.path()).unwrap();
        let corpus = std::fs::read(dir.path().join("corpus.jsonl")).unwrap();
        assert_eq!(crate::corpus::read_corpus(&corpus[..]).unwrap(), data.documents);
        let survey = std::fs::read(dir.path().join("survey.csv")).unwrap();
        assert_eq!(crate::corpus::parse_survey(&survey[..]).unwrap().into_strict().unwrap(), data.survey);
    }
}
