//! Sentence scoring, time-bucketed index aggregation, survey diffusion indices and
//! correlation against reference series.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::calendar::{Bucket, BucketUnit, Month};
use crate::corpus::{Condition, Sentence, SurveyResponse};
use crate::error::{Error, Result};
use crate::outlier::OneClassSvm;
use crate::sentiment::{RidgeModel, ScoreTable};
use crate::vectorize::TfidfModel;

/// Economic-relevance filter: tfidf vectorizer plus the one-class SVM trained on it.
#[derive(Debug, Clone, Copy)]
pub struct OutlierFilter<'a> {
    pub tfidf: &'a TfidfModel,
    pub svm: &'a OneClassSvm,
}

impl OutlierFilter<'_> {
    pub fn decision(&self, tokens: &[String]) -> f64 {
        self.svm.decision(&self.tfidf.transform(tokens))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Scorer<'a> {
    Ridge {
        tfidf: &'a TfidfModel,
        model: &'a RidgeModel,
    },
    Table(&'a ScoreTable),
}

impl Scorer<'_> {
    pub fn score(&self, sentence: &Sentence) -> Result<Option<f64>> {
        match self {
            Scorer::Ridge { tfidf, model } => model.predict(&tfidf.transform(&sentence.tokens)).map(Some),
            Scorer::Table(table) => Ok(table.get(&sentence.id)),
        }
    }
}

/// A sentence after filtering and scoring; the unit stored for index and contribution queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSentence {
    pub id: String,
    pub date: NaiveDate,
    pub tokens: Vec<String>,
    /// p_s. May be absent for a filtered-out sentence when scores come from a table.
    pub score: Option<f64>,
    /// One-class SVM decision value; absent when no filter was applied.
    pub decision: Option<f64>,
    pub inlier: bool,
}

/// Filter and score sentences. Every sentence that survives the filter must receive a score.
pub fn score_sentences(
    sentences: &[Sentence],
    filter: Option<&OutlierFilter<'_>>,
    scorer: &Scorer<'_>,
) -> Result<Vec<ScoredSentence>> {
    let mut out = Vec::with_capacity(sentences.len());
    let mut missing = Vec::new();
    for s in sentences {
        if s.is_empty() {
            return Err(Error::invalid(format!("sentence {} has no tokens", s.id)));
        }
        let decision = filter.map(|f| f.decision(&s.tokens));
        let inlier = decision.is_none_or(|d| d >= 0.0);
        let score = scorer.score(s)?;
        if inlier && score.is_none() {
            missing.push(s.id.clone());
        }
        out.push(ScoredSentence {
            id: s.id.clone(),
            date: s.date,
            tokens: s.tokens.clone(),
            score,
            decision,
            inlier,
        });
    }
    if !missing.is_empty() {
        return Err(Error::MissingScores(missing));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IndexPoint {
    pub bucket: Bucket,
    pub value: f64,
    pub n_sentences: usize,
}

/// Mean sentence score per bucket. Buckets without sentences are absent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexSeries {
    pub unit: BucketUnit,
    pub points: Vec<IndexPoint>,
}

/// Which sentences feed an index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Only sentences the outlier filter accepted.
    Filtered,
    /// Every sentence.
    Unfiltered,
}

impl Variant {
    pub fn includes(self, s: &ScoredSentence) -> bool {
        match self {
            Variant::Filtered => s.inlier,
            Variant::Unfiltered => true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Filtered => "filtered",
            Variant::Unfiltered => "unfiltered",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "filtered" => Some(Variant::Filtered),
            "unfiltered" => Some(Variant::Unfiltered),
            _ => None,
        }
    }
}

/// Average the scores of the sentences `variant` admits, per bucket.
pub fn aggregate(scored: &[ScoredSentence], unit: BucketUnit, variant: Variant) -> Result<IndexSeries> {
    let mut sums: BTreeMap<Bucket, (f64, usize)> = BTreeMap::new();
    let mut missing = Vec::new();
    for s in scored.iter().filter(|s| variant.includes(s)) {
        match s.score {
            Some(p) => {
                let e = sums.entry(unit.bucket_of(s.date)).or_default();
                e.0 += p;
                e.1 += 1;
            }
            None => missing.push(s.id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingScores(missing));
    }
    let points = sums
        .into_iter()
        .map(|(bucket, (sum, n))| IndexPoint {
            bucket,
            value: sum / n as f64,
            n_sentences: n,
        })
        .collect();
    Ok(IndexSeries { unit, points })
}

/// Filter, score and average in one step.
pub fn compute_index(
    sentences: &[Sentence],
    filter: Option<&OutlierFilter<'_>>,
    scorer: &Scorer<'_>,
    unit: BucketUnit,
) -> Result<IndexSeries> {
    if sentences.is_empty() {
        return Err(Error::invalid("cannot build an index from an empty corpus"));
    }
    let scored = score_sentences(sentences, filter, scorer)?;
    aggregate(&scored, unit, Variant::Filtered)
}

impl IndexSeries {
    pub fn get(&self, bucket: Bucket) -> Option<&IndexPoint> {
        self.points
            .binary_search_by(|p| p.bucket.cmp(&bucket))
            .ok()
            .map(|i| &self.points[i])
    }

    pub fn pairs(&self) -> Vec<(Bucket, f64)> {
        self.points.iter().map(|p| (p.bucket, p.value)).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["bucket", "value", "n_sentences"])?;
        for p in &self.points {
            wtr.write_record([p.bucket.to_string(), format!("{}", p.value), p.n_sentences.to_string()])?;
        }
        wtr.flush().map_err(|e| Error::io("index csv", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, unit: BucketUnit) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut points = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let record_err = |message: String| Error::Record { line, message };
            if rec.len() != 3 {
                return Err(record_err("expected bucket,value,n_sentences".into()));
            }
            let bucket = Bucket::parse(unit, &rec[0]).map_err(|e| record_err(e.to_string()))?;
            let value = rec[1].parse().map_err(|_| record_err(format!("bad value {:?}", &rec[1])))?;
            let n_sentences = rec[2].parse().map_err(|_| record_err(format!("bad count {:?}", &rec[2])))?;
            points.push(IndexPoint {
                bucket,
                value,
                n_sentences,
            });
        }
        if points.windows(2).any(|w| w[0].bucket >= w[1].bucket) {
            return Err(Error::invalid("index buckets must be strictly increasing"));
        }
        Ok(Self { unit, points })
    }
}

/// Monthly series from an outside source (official indicators, survey DI, planted truth).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceSeries {
    pub points: Vec<(Month, f64)>,
}

impl ReferenceSeries {
    pub fn new(mut points: Vec<(Month, f64)>) -> Result<Self> {
        points.sort_by_key(|p| p.0);
        if points.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::invalid("reference series has duplicate months"));
        }
        Ok(Self { points })
    }

    pub fn pairs(&self) -> Vec<(Bucket, f64)> {
        self.points.iter().map(|(m, v)| (Bucket::month(*m), *v)).collect()
    }

    /// Read `month,value`; a blank value marks a missing month.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
        if header != ["month", "value"] {
            return Err(Error::Record {
                line: 1,
                message: format!("expected header month,value, got {}", header.join(",")),
            });
        }
        let mut points = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let month: Month = rec[0].parse().map_err(|e: Error| Error::Record {
                line,
                message: e.to_string(),
            })?;
            let raw = rec.get(1).unwrap_or("").trim();
            if raw.is_empty() {
                continue;
            }
            let value: f64 = raw.parse().map_err(|_| Error::Record {
                line,
                message: format!("bad value {raw:?}"),
            })?;
            points.push((month, value));
        }
        if points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::invalid("reference months must be strictly increasing"));
        }
        Ok(Self { points })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["month", "value"])?;
        for (m, v) in &self.points {
            wtr.write_record([m.to_string(), format!("{v}")])?;
        }
        wtr.flush().map_err(|e| Error::io("reference csv", e))?;
        Ok(())
    }
}

/// Diffusion-index weights per condition, in ◎ ○ □ △ × order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiWeights(pub [f64; 5]);

impl Default for DiWeights {
    fn default() -> Self {
        DiWeights([1.0, 0.75, 0.5, 0.25, 0.0])
    }
}

/// `100 × Σ_k share_k × w_k` from per-condition counts in ◎ ○ □ △ × order.
pub fn di_from_counts(counts: &[usize; 5], weights: &DiWeights) -> Result<f64> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("no survey responses"));
    }
    let weighted: f64 = counts.iter().zip(weights.0).map(|(n, w)| *n as f64 * w).sum();
    Ok(100.0 * weighted / total as f64)
}

/// DI over the responses dated `month`.
pub fn compute_di(responses: &[SurveyResponse], month: Month, weights: &DiWeights) -> Result<f64> {
    let mut counts = [0usize; 5];
    for r in responses.iter().filter(|r| r.month == month) {
        counts[Condition::ALL.iter().position(|&c| c == r.condition).expect("all conditions listed")] += 1;
    }
    di_from_counts(&counts, weights).map_err(|_| Error::invalid(format!("no survey responses for {month}")))
}

/// DI for every month that has responses.
pub fn di_series(responses: &[SurveyResponse], weights: &DiWeights) -> Result<ReferenceSeries> {
    let mut months: Vec<Month> = responses.iter().map(|r| r.month).collect();
    months.sort_unstable();
    months.dedup();
    let points = months
        .into_iter()
        .map(|m| compute_di(responses, m, weights).map(|v| (m, v)))
        .collect::<Result<Vec<_>>>()?;
    ReferenceSeries::new(points)
}

/// Sample Pearson correlation of two aligned series.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::invalid("correlation needs at least two aligned points"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::invalid("correlation is undefined for a constant series"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation over the buckets present in both series.
pub fn pearson_series(a: &[(Bucket, f64)], b: &[(Bucket, f64)]) -> Result<f64> {
    let lookup: HashMap<Bucket, f64> = b.iter().copied().collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = a
        .iter()
        .filter_map(|(k, v)| lookup.get(k).map(|w| (*v, *w)))
        .unzip();
    pearson(&xs, &ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn scored(id: &str, date: (i32, u32, u32), score: f64, inlier: bool) -> ScoredSentence {
        ScoredSentence {
            id: id.into(),
            date: NaiveDate::from_ymd_opt(date.0, date.1, date.2).unwrap(),
            tokens: vec!["x".into()],
            score: Some(score),
            decision: None,
            inlier,
        }
    }

    fn response(c: Condition, month: &str) -> SurveyResponse {
        SurveyResponse {
            region: "r".into(),
            occupation: "o".into(),
            condition: c,
            reason: "why".into(),
            month: month.parse().unwrap(),
        }
    }

    #[test]
    fn monthly_mean() {
        let s = vec![
            scored("a", (2020, 1, 3), 1.0, true),
            scored("b", (2020, 1, 9), -1.0, true),
            scored("c", (2020, 1, 31), 2.0, true),
        ];
        let idx = aggregate(&s, BucketUnit::Month, Variant::Filtered).unwrap();
        assert_eq!(idx.points.len(), 1);
        assert_abs_diff_eq!(idx.points[0].value, 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(idx.points[0].n_sentences, 3);
    }

    #[test]
    fn fully_filtered_bucket_is_a_gap() {
        let s = vec![
            scored("a", (2020, 1, 3), 1.0, true),
            scored("b", (2020, 2, 3), 5.0, false),
            scored("c", (2020, 3, 3), 2.0, true),
        ];
        let f = aggregate(&s, BucketUnit::Month, Variant::Filtered).unwrap();
        let months: Vec<String> = f.points.iter().map(|p| p.bucket.to_string()).collect();
        assert_eq!(months, ["2020-01", "2020-03"]);
        let u = aggregate(&s, BucketUnit::Month, Variant::Unfiltered).unwrap();
        assert_eq!(u.points.len(), 3);
    }

    #[test]
    fn missing_table_scores_are_listed() {
        let sentences: Vec<Sentence> = ["d:0", "d:1"]
            .iter()
            .map(|id| Sentence {
                id: id.to_string(),
                doc_id: "d".into(),
                date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
                text: "x".into(),
                tokens: vec!["x".into()],
            })
            .collect();
        let table: ScoreTable = [("d:0".to_string(), 1.0)].into_iter().collect();
        match compute_index(&sentences, None, &Scorer::Table(&table), BucketUnit::Month) {
            Err(Error::MissingScores(ids)) => assert_eq!(ids, ["d:1"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn di_endpoints() {
        let w = DiWeights::default();
        let all = |c| vec![response(c, "2020-01"); 4];
        assert_eq!(compute_di(&all(Condition::Neutral), "2020-01".parse().unwrap(), &w).unwrap(), 50.0);
        assert_eq!(compute_di(&all(Condition::VeryGood), "2020-01".parse().unwrap(), &w).unwrap(), 100.0);
        assert_eq!(compute_di(&all(Condition::VeryBad), "2020-01".parse().unwrap(), &w).unwrap(), 0.0);
        let half = vec![response(Condition::VeryGood, "2020-01"), response(Condition::VeryBad, "2020-01")];
        assert_eq!(compute_di(&half, "2020-01".parse().unwrap(), &w).unwrap(), 50.0);
        assert!(compute_di(&half, "2020-02".parse().unwrap(), &w).is_err());
    }

    #[test]
    fn di_series_per_month() {
        let rs = vec![
            response(Condition::Good, "2020-02"),
            response(Condition::VeryGood, "2020-01"),
            response(Condition::Bad, "2020-02"),
        ];
        let s = di_series(&rs, &DiWeights::default()).unwrap();
        assert_eq!(s.points.len(), 2);
        assert_eq!(s.points[0].1, 100.0);
        assert_eq!(s.points[1].1, 50.0);
    }

    #[test]
    fn pearson_examples() {
        assert_abs_diff_eq!(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0, epsilon = 1e-15);
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn pearson_uses_bucket_intersection() {
        let m = |s: &str| Bucket::month(s.parse().unwrap());
        let a = [(m("2020-01"), 1.0), (m("2020-02"), 2.0), (m("2020-03"), 3.0), (m("2020-05"), 9.0)];
        let b = [(m("2020-01"), 10.0), (m("2020-02"), 20.0), (m("2020-03"), 30.0), (m("2020-04"), -5.0)];
        assert_abs_diff_eq!(pearson_series(&a, &b).unwrap(), 1.0, epsilon = 1e-15);
        assert!(pearson_series(&a[..1], &b).is_err());
    }

    #[test]
    fn csv_round_trips() {
        let s = vec![scored("a", (2020, 1, 3), 0.25, true), scored("b", (2020, 3, 3), -0.5, true)];
        let idx = aggregate(&s, BucketUnit::Month, Variant::Filtered).unwrap();
        let mut buf = Vec::new();
        idx.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "bucket,value,n_sentences\n2020-01,0.25,1\n2020-03,-0.5,1\n");
        assert_eq!(IndexSeries::read_csv(&buf[..], BucketUnit::Month).unwrap(), idx);

        let r = ReferenceSeries::read_csv("month,value\n2020-01,1.5\n2020-02,\n2020-03,2\n".as_bytes()).unwrap();
        assert_eq!(r.points.len(), 2);
        assert!(ReferenceSeries::read_csv("month,v\n".as_bytes()).is_err());
        assert!(ReferenceSeries::read_csv("month,value\n2020-02,1\n2020-01,2\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn pearson_affine_invariance(
            a in proptest::collection::vec(-10.0f64..10.0, 3..30),
            scale in 0.01f64..100.0,
            shift in -50.0f64..50.0,
        ) {
            let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x * x - i as f64).collect();
            if let Ok(r) = pearson(&a, &b) {
                let a2: Vec<f64> = a.iter().map(|x| scale * x + shift).collect();
                prop_assert!((pearson(&a2, &b).unwrap() - r).abs() < 1e-12);
            }
        }

        #[test]
        fn index_matches_direct_mean_and_is_permutation_invariant(
            scores in proptest::collection::vec((-3.0f64..3.0, 1u32..=28, 1u32..=3, any::<bool>()), 1..40),
            rot in 0usize..40,
        ) {
            let s: Vec<ScoredSentence> = scores
                .iter()
                .enumerate()
                .map(|(i, &(p, d, m, keep))| scored(&i.to_string(), (2021, m, d), p, keep))
                .collect();
            let unfiltered = aggregate(&s, BucketUnit::Month, Variant::Unfiltered).unwrap();
            for p in &unfiltered.points {
                let members: Vec<f64> = s.iter().filter(|x| BucketUnit::Month.bucket_of(x.date) == p.bucket)
                    .map(|x| x.score.unwrap()).collect();
                let direct = members.iter().sum::<f64>() / members.len() as f64;
                prop_assert!((p.value - direct).abs() < 1e-12);
            }
            let filtered = aggregate(&s, BucketUnit::Month, Variant::Filtered).unwrap();
            for p in &filtered.points {
                prop_assert!(p.n_sentences <= unfiltered.get(p.bucket).unwrap().n_sentences);
            }
            let mut shuffled = s.clone();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let again = aggregate(&shuffled, BucketUnit::Month, Variant::Unfiltered).unwrap();
            for (x, y) in again.points.iter().zip(&unfiltered.points) {
                prop_assert!((x.value - y.value).abs() < 1e-12);
            }
        }
    }
}
