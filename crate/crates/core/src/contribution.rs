//! Word-level decomposition of the index.
//!
//! A sentence score `p_s` is split over its `N_s` tokens, either evenly or in
//! proportion to attention-rollout weights. For a term `w` the contribution in
//! bucket `t` is the mean over every surviving sentence of `t` of the share
//! attributed to `w` (zero where `w` does not occur), so summing over all
//! single-token terms gives back the index value.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::calendar::{Bucket, BucketUnit};
use crate::corpus::Tokenizer;
use crate::error::{Error, Result};
use crate::index::{aggregate, ScoredSentence, Variant};

/// How repeated occurrences of a term within one sentence are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountMode {
    #[default]
    PerOccurrence,
    /// At most one occurrence per sentence.
    PerSentence,
}

/// A query term and its constituent tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Term {
    pub text: String,
    pub tokens: Vec<String>,
}

impl Term {
    pub fn new(text: &str, tokenizer: &dyn Tokenizer) -> Result<Self> {
        let tokens = tokenizer.tokenize(text);
        if tokens.is_empty() {
            return Err(Error::invalid(format!("term {text:?} has no tokens")));
        }
        Ok(Self {
            text: text.to_string(),
            tokens,
        })
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty term"));
        }
        Ok(Self {
            text: tokens.join(" "),
            tokens,
        })
    }

    /// Number of constituents, `k`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Start positions of non-overlapping matches of `term` in `tokens`, scanning left to right.
pub fn occurrences(tokens: &[String], term: &[String], mode: CountMode) -> Vec<usize> {
    let k = term.len();
    let mut hits = Vec::new();
    if k == 0 || k > tokens.len() {
        return hits;
    }
    let mut i = 0;
    while i + k <= tokens.len() {
        if tokens[i..i + k] == *term {
            hits.push(i);
            if mode == CountMode::PerSentence {
                break;
            }
            i += k;
        } else {
            i += 1;
        }
    }
    hits
}

/// `c × k × p_s / N_s`, with `c` the occurrence count and `k` the term length.
pub fn sentence_contribution_uniform(tokens: &[String], score: f64, term: &Term, mode: CountMode) -> Result<f64> {
    if term.is_empty() {
        return Err(Error::invalid("empty term"));
    }
    if tokens.is_empty() {
        return Err(Error::invalid("sentence has no tokens"));
    }
    let c = occurrences(tokens, &term.tokens, mode).len();
    Ok(c as f64 * term.len() as f64 * score / tokens.len() as f64)
}

/// Rollout weights over a sentence's content tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutWeights {
    pub tokens: Vec<String>,
    pub weights: Vec<f64>,
}

/// `p_s × (Σ r over the term's positions) / (Σ r over all content tokens)`.
pub fn sentence_contribution_rollout(
    tokens: &[String],
    score: f64,
    term: &Term,
    rollout: &RolloutWeights,
    mode: CountMode,
) -> Result<f64> {
    if term.is_empty() {
        return Err(Error::invalid("empty term"));
    }
    if rollout.tokens.len() != rollout.weights.len() || rollout.tokens != tokens {
        return Err(Error::invalid(
            "rollout weights do not cover the sentence's tokens",
        ));
    }
    let total: f64 = rollout.weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numerical("rollout weights sum to zero".into()));
    }
    let k = term.len();
    let mass: f64 = occurrences(tokens, &term.tokens, mode)
        .into_iter()
        .map(|start| rollout.weights[start..start + k].iter().sum::<f64>())
        .sum();
    Ok(score * mass / total)
}

/// Per-layer, per-head attention matrices for one sentence. Position 0 is the summary token.
#[derive(Debug, Clone)]
pub struct AttentionStack {
    pub tokens: Vec<String>,
    /// `layers[l][h]` is an `n × n` row-stochastic matrix.
    pub layers: Vec<Vec<DMatrix<f64>>>,
}

impl AttentionStack {
    /// Build from `L × H × n × n` nested arrays, checking shape and row sums.
    pub fn from_nested(tokens: Vec<String>, attn: &[Vec<Vec<Vec<f64>>>]) -> Result<Self> {
        let n = tokens.len();
        if n == 0 || attn.is_empty() {
            return Err(Error::invalid("attention stack needs at least one token and one layer"));
        }
        let heads = attn[0].len();
        let mut layers = Vec::with_capacity(attn.len());
        for (l, layer) in attn.iter().enumerate() {
            if layer.len() != heads || heads == 0 {
                return Err(Error::invalid(format!("layer {l}: expected {heads} heads")));
            }
            let mut mats = Vec::with_capacity(heads);
            for (h, rows) in layer.iter().enumerate() {
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::invalid(format!("layer {l} head {h}: expected {n}x{n} matrix")));
                }
                mats.push(DMatrix::from_fn(n, n, |i, j| rows[i][j]));
            }
            layers.push(mats);
        }
        let stack = Self { tokens, layers };
        stack.validate()?;
        Ok(stack)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, a) in layer.iter().enumerate() {
                if a.nrows() != n || a.ncols() != n {
                    return Err(Error::invalid(format!("layer {l} head {h}: wrong shape")));
                }
                if a.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::invalid(format!(
                        "layer {l} head {h}: attention entries must be finite and nonnegative"
                    )));
                }
                for (i, row) in a.row_iter().enumerate() {
                    let s = row.sum();
                    if (s - 1.0).abs() > 1e-6 {
                        return Err(Error::invalid(format!(
                            "layer {l} head {h} row {i} sums to {s}, not 1"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Row 0 of `Ã_L ⋯ Ã_1`, where `Ã_l` is the row-normalized `½ mean_h(A_lh) + ½ I`.
pub fn attention_rollout(stack: &AttentionStack) -> Result<Vec<f64>> {
    stack.validate()?;
    let n = stack.tokens.len();
    let mut rollout = DMatrix::<f64>::identity(n, n);
    for layer in &stack.layers {
        let mean = layer.iter().fold(DMatrix::zeros(n, n), |acc, a| acc + a) / layer.len() as f64;
        let mut residual = mean * 0.5 + DMatrix::identity(n, n) * 0.5;
        for mut row in residual.row_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        rollout = residual * rollout;
    }
    Ok(rollout.row(0).iter().copied().collect())
}

/// `[CLS]`-style or `<s>`-style markers.
pub fn is_special_token(token: &str) -> bool {
    let t = token.trim();
    t.len() > 2 && ((t.starts_with('[') && t.ends_with(']')) || (t.starts_with('<') && t.ends_with('>')))
}

/// Rollout weights restricted to content tokens (position 0 and special tokens dropped).
pub fn content_rollout(stack: &AttentionStack) -> Result<RolloutWeights> {
    let row = attention_rollout(stack)?;
    let (tokens, weights) = stack
        .tokens
        .iter()
        .zip(row)
        .skip(1)
        .filter(|(t, _)| !is_special_token(t))
        .map(|(t, w)| (t.clone(), w))
        .unzip();
    Ok(RolloutWeights { tokens, weights })
}

/// One line of an attention file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub sentence_id: String,
    pub tokens: Vec<String>,
    pub attn: Vec<Vec<Vec<Vec<f64>>>>,
}

pub type RolloutTable = HashMap<String, RolloutWeights>;

/// Read JSONL attention records and roll each one out.
pub fn load_attention<R: BufRead>(reader: R) -> Result<RolloutTable> {
    let mut table = RolloutTable::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("attention", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record_err = |e: Error| Error::Record {
            line: i + 1,
            message: e.to_string(),
        };
        let rec: AttentionRecord = serde_json::from_str(&line).map_err(|e| record_err(e.into()))?;
        let stack = AttentionStack::from_nested(rec.tokens, &rec.attn).map_err(record_err)?;
        table.insert(rec.sentence_id, content_rollout(&stack).map_err(record_err)?);
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy)]
pub enum Kernel<'a> {
    Uniform,
    Rollout(&'a RolloutTable),
}

impl Kernel<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Uniform => "uniform",
            Kernel::Rollout(_) => "rollout",
        }
    }

    fn sentence(&self, s: &ScoredSentence, score: f64, term: &Term, mode: CountMode) -> Result<f64> {
        match self {
            Kernel::Uniform => sentence_contribution_uniform(&s.tokens, score, term, mode),
            Kernel::Rollout(table) => {
                let r = table
                    .get(&s.id)
                    .ok_or_else(|| Error::invalid(format!("no rollout weights for sentence {}", s.id)))?;
                sentence_contribution_rollout(&s.tokens, score, term, r, mode)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContributionPoint {
    pub bucket: Bucket,
    pub contribution: f64,
    pub n_hits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContributionSeries {
    pub term: String,
    pub unit: BucketUnit,
    pub points: Vec<ContributionPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ContributionOptions {
    pub variant: Option<Variant>,
    pub mode: CountMode,
}

/// Contribution of `term` per bucket: the mean of per-sentence contributions over every
/// sentence admitted to the bucket, including sentences without the term.
pub fn contribution_series(
    scored: &[ScoredSentence],
    term: &Term,
    unit: BucketUnit,
    kernel: Kernel<'_>,
    options: ContributionOptions,
) -> Result<ContributionSeries> {
    let variant = options.variant.unwrap_or(Variant::Filtered);
    let mut acc: BTreeMap<Bucket, (f64, usize, usize)> = BTreeMap::new();
    for s in scored.iter().filter(|s| variant.includes(s)) {
        let score = s
            .score
            .ok_or_else(|| Error::MissingScores(vec![s.id.clone()]))?;
        let e = acc.entry(unit.bucket_of(s.date)).or_default();
        let hits = occurrences(&s.tokens, &term.tokens, options.mode).len();
        if hits > 0 {
            e.0 += kernel.sentence(s, score, term, options.mode)?;
            e.2 += hits;
        }
        e.1 += 1;
    }
    let points = acc
        .into_iter()
        .map(|(bucket, (sum, n, hits))| ContributionPoint {
            bucket,
            contribution: sum / n as f64,
            n_hits: hits,
        })
        .collect();
    Ok(ContributionSeries {
        term: term.text.clone(),
        unit,
        points,
    })
}

impl ContributionSeries {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["bucket", "term", "contribution", "n_hits"])?;
        for p in &self.points {
            wtr.write_record([
                p.bucket.to_string(),
                self.term.clone(),
                format!("{}", p.contribution),
                p.n_hits.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("contribution csv", e))?;
        Ok(())
    }
}

/// Per bucket: the index value and the brute-force sum of uniform contributions over
/// every distinct token in the admitted sentences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecompositionRow {
    pub bucket: Bucket,
    pub index: f64,
    pub vocabulary_sum: f64,
    pub n_terms: usize,
}

pub fn vocabulary_decomposition(
    scored: &[ScoredSentence],
    unit: BucketUnit,
    variant: Variant,
) -> Result<Vec<DecompositionRow>> {
    let index = aggregate(scored, unit, variant)?;
    let vocabulary: BTreeSet<&String> = scored
        .iter()
        .filter(|s| variant.includes(s))
        .flat_map(|s| &s.tokens)
        .collect();
    let mut sums: BTreeMap<Bucket, f64> = BTreeMap::new();
    let options = ContributionOptions {
        variant: Some(variant),
        mode: CountMode::PerOccurrence,
    };
    for token in &vocabulary {
        let term = Term::from_tokens(vec![(*token).clone()])?;
        let series = contribution_series(scored, &term, unit, Kernel::Uniform, options)?;
        for p in series.points {
            *sums.entry(p.bucket).or_default() += p.contribution;
        }
    }
    Ok(index
        .points
        .iter()
        .map(|p| DecompositionRow {
            bucket: p.bucket,
            index: p.value,
            vocabulary_sum: sums.get(&p.bucket).copied().unwrap_or(0.0),
            n_terms: vocabulary.len(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::BigramTokenizer;
    use approx::assert_abs_diff_eq;
    use chrono::NaiveDate;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn term(s: &str) -> Term {
        Term::from_tokens(toks(s)).unwrap()
    }

    fn sentence(id: &str, day: u32, text: &str, score: f64) -> ScoredSentence {
        ScoredSentence {
            id: id.into(),
            date: NaiveDate::from_ymd_opt(2020, 1, day).unwrap(),
            tokens: toks(text),
            score: Some(score),
            decision: None,
            inlier: true,
        }
    }

    fn random_stack(rng: &mut ChaCha8Rng, layers: usize, heads: usize, n: usize) -> AttentionStack {
        let attn: Vec<Vec<Vec<Vec<f64>>>> = (0..layers)
            .map(|_| {
                (0..heads)
                    .map(|_| {
                        (0..n)
                            .map(|_| {
                                let row: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
                                let s: f64 = row.iter().sum();
                                row.into_iter().map(|v| v / s).collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let tokens = (0..n).map(|i| if i == 0 { "[CLS]".into() } else { format!("t{i}") }).collect();
        AttentionStack::from_nested(tokens, &attn).unwrap()
    }

    #[test]
    fn uniform_kernel_examples() {
        let pm = CountMode::PerOccurrence;
        assert_eq!(sentence_contribution_uniform(&toks("a b"), 1.0, &term("a"), pm).unwrap(), 0.5);
        assert_eq!(sentence_contribution_uniform(&toks("a b"), 1.0, &term("z"), pm).unwrap(), 0.0);
        assert_eq!(sentence_contribution_uniform(&toks("x tax up y"), 1.0, &term("tax up"), pm).unwrap(), 0.5);
        assert!(Term::from_tokens(vec![]).is_err());
        assert!(Term::new("。", &BigramTokenizer).is_err());
    }

    #[test]
    fn repeated_occurrences_follow_count_mode() {
        let s = toks("a b a a");
        assert_eq!(occurrences(&s, &toks("a"), CountMode::PerOccurrence), [0, 2, 3]);
        assert_eq!(occurrences(&s, &toks("a"), CountMode::PerSentence), [0]);
        assert_eq!(occurrences(&toks("a a a"), &toks("a a"), CountMode::PerOccurrence), [0]);
        let one = sentence_contribution_uniform(&s, 1.0, &term("a"), CountMode::PerSentence).unwrap();
        assert_eq!(one, 0.25);
    }

    #[test]
    fn cjk_compound_term() {
        let t = Term::new("東京五輪", &BigramTokenizer).unwrap();
        assert_eq!(t.len(), 3);
        let s = BigramTokenizer.tokenize("東京五輪の開催");
        let c = sentence_contribution_uniform(&s, 1.0, &t, CountMode::PerOccurrence).unwrap();
        assert_abs_diff_eq!(c, 3.0 / s.len() as f64, epsilon = 1e-15);
    }

    #[test]
    fn series_averages_over_all_sentences() {
        let scored = vec![sentence("s1", 1, "a b", 1.0), sentence("s2", 2, "c d", 1.0)];
        let series = contribution_series(&scored, &term("a"), BucketUnit::Month, Kernel::Uniform, Default::default())
            .unwrap();
        assert_eq!(series.points.len(), 1);
        assert_eq!(series.points[0].contribution, 0.25);
        assert_eq!(series.points[0].n_hits, 1);

        let none = contribution_series(&scored, &term("zz"), BucketUnit::Month, Kernel::Uniform, Default::default())
            .unwrap();
        assert!(none.points.iter().all(|p| p.contribution == 0.0 && p.n_hits == 0));
    }

    #[test]
    fn rollout_examples() {
        let identity = AttentionStack::from_nested(
            toks("[CLS] a b"),
            &[vec![(0..3).map(|i| (0..3).map(|j| f64::from(i == j)).collect()).collect()]],
        )
        .unwrap();
        assert_eq!(attention_rollout(&identity).unwrap(), [1.0, 0.0, 0.0]);

        let uniform = AttentionStack::from_nested(toks("[CLS] a"), &[vec![vec![vec![0.5, 0.5]; 2]]]).unwrap();
        let r = attention_rollout(&uniform).unwrap();
        assert_abs_diff_eq!(r[0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(r[1], 0.25, epsilon = 1e-15);

        let bad = AttentionStack::from_nested(toks("[CLS] a"), &[vec![vec![vec![0.5, 0.6], vec![0.5, 0.5]]]]);
        assert!(bad.is_err());
    }

    #[test]
    fn content_rollout_drops_specials() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut stack = random_stack(&mut rng, 2, 2, 5);
        stack.tokens = toks("[CLS] a b c [SEP]");
        let w = content_rollout(&stack).unwrap();
        assert_eq!(w.tokens, toks("a b c"));
        assert_eq!(w.weights.len(), 3);
    }

    #[test]
    fn rollout_kernel_examples() {
        let s = toks("a b c");
        let uniform = RolloutWeights {
            tokens: s.clone(),
            weights: vec![0.2; 3],
        };
        let pm = CountMode::PerOccurrence;
        let u = sentence_contribution_uniform(&s, 0.9, &term("b"), pm).unwrap();
        let r = sentence_contribution_rollout(&s, 0.9, &term("b"), &uniform, pm).unwrap();
        assert!((u - r).abs() <= 1e-12);

        let peaked = RolloutWeights {
            tokens: s.clone(),
            weights: vec![0.0, 0.7, 0.0],
        };
        assert_abs_diff_eq!(
            sentence_contribution_rollout(&s, 0.9, &term("b"), &peaked, pm).unwrap(),
            0.9,
            epsilon = 1e-15
        );
        assert_eq!(sentence_contribution_rollout(&s, 0.9, &term("z"), &peaked, pm).unwrap(), 0.0);

        let short = RolloutWeights {
            tokens: toks("a b"),
            weights: vec![0.5, 0.5],
        };
        assert!(sentence_contribution_rollout(&s, 0.9, &term("a"), &short, pm).is_err());
    }

    #[test]
    fn attention_file_loading() {
        let line = r#"{"sentence_id":"d:0","tokens":["[CLS]","a","b","[SEP]"],"attn":[[[[0.25,0.25,0.25,0.25],[0.25,0.25,0.25,0.25],[0.25,0.25,0.25,0.25],[0.25,0.25,0.25,0.25]]]]}"#;
        let table = load_attention(format!("{line}\n\n").as_bytes()).unwrap();
        let w = &table["d:0"];
        assert_eq!(w.tokens, toks("a b"));
        assert_abs_diff_eq!(w.weights[0], 0.125, epsilon = 1e-15);
        assert!(load_attention("{\"sentence_id\":1}\n".as_bytes()).is_err());
    }

    #[test]
    fn decomposition_identity_small() {
        let scored = vec![
            sentence("s1", 1, "a b a", 1.5),
            sentence("s2", 2, "b c", -0.5),
            sentence("s3", 3, "d", 2.0),
        ];
        for row in vocabulary_decomposition(&scored, BucketUnit::Month, Variant::Filtered).unwrap() {
            assert!((row.index - row.vocabulary_sum).abs() <= 1e-12 * row.index.abs().max(1.0));
        }
    }

    proptest! {
        #[test]
        fn rollout_rows_are_probability_vectors(seed in any::<u64>(), l in 1usize..5, h in 1usize..4, n in 2usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stack = random_stack(&mut rng, l, h, n);
            let r = attention_rollout(&stack).unwrap();
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(r.iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn rollout_kernel_sums_to_score(seed in any::<u64>(), score in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stack = random_stack(&mut rng, 2, 3, 6);
            let w = content_rollout(&stack).unwrap();
            let total: f64 = w
                .tokens
                .iter()
                .map(|t| sentence_contribution_rollout(&w.tokens, score, &term(t), &w, CountMode::PerOccurrence).unwrap())
                .sum();
            prop_assert!((total - score).abs() <= 1e-9 * score.abs().max(1.0));
        }

        #[test]
        fn kernels_are_linear_in_score(score in -3.0f64..3.0, text in "[abc]( [abc]){0,6}") {
            let s = toks(&text);
            let w = RolloutWeights { tokens: s.clone(), weights: (1..=s.len()).map(|i| i as f64).collect() };
            let pm = CountMode::PerOccurrence;
            for t in ["a", "b c"] {
                let t = term(t);
                let u1 = sentence_contribution_uniform(&s, score, &t, pm).unwrap();
                let u2 = sentence_contribution_uniform(&s, 2.0 * score, &t, pm).unwrap();
                prop_assert!((u2 - 2.0 * u1).abs() < 1e-12);
                let r1 = sentence_contribution_rollout(&s, score, &t, &w, pm).unwrap();
                let r2 = sentence_contribution_rollout(&s, 2.0 * score, &t, &w, pm).unwrap();
                prop_assert!((r2 - 2.0 * r1).abs() < 1e-12);
            }
        }
    }
}
