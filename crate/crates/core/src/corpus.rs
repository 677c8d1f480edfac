//! Survey responses, news documents, sentence segmentation and tokenization.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::calendar::Month;
use crate::error::{Error, Result};

/// Five-point economic condition, from best (◎) to worst (×).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    VeryGood,
    Good,
    Neutral,
    Bad,
    VeryBad,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::VeryGood,
        Condition::Good,
        Condition::Neutral,
        Condition::Bad,
        Condition::VeryBad,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            Condition::VeryGood => "◎",
            Condition::Good => "○",
            Condition::Neutral => "□",
            Condition::Bad => "△",
            Condition::VeryBad => "×",
        }
    }

    pub fn alias(self) -> &'static str {
        match self {
            Condition::VeryGood => "vg",
            Condition::Good => "g",
            Condition::Neutral => "n",
            Condition::Bad => "b",
            Condition::VeryBad => "vb",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Condition::ALL
            .into_iter()
            .find(|c| c.symbol() == s || c.alias().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown condition symbol {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyResponse {
    pub region: String,
    pub occupation: String,
    pub condition: Condition,
    pub reason: String,
    pub month: Month,
}

/// Result of reading a survey file: accepted rows plus per-record problems.
#[derive(Debug, Default)]
pub struct SurveyBatch {
    pub responses: Vec<SurveyResponse>,
    /// Rows that could not be parsed; each is an [`Error::Record`].
    pub errors: Vec<Error>,
    /// Line numbers of rows dropped because their reason was blank.
    pub skipped: Vec<usize>,
}

impl SurveyBatch {
    /// Fail on the first malformed record.
    pub fn into_strict(self) -> Result<Vec<SurveyResponse>> {
        match self.errors.into_iter().next() {
            Some(e) => Err(e),
            None => Ok(self.responses),
        }
    }
}

const SURVEY_HEADER: [&str; 5] = ["region", "occupation", "condition", "reason", "month"];

pub fn parse_survey<R: Read>(reader: R) -> Result<SurveyBatch> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let mut batch = SurveyBatch::default();
    if header.is_empty() {
        return Ok(batch);
    }
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != SURVEY_HEADER {
        return Err(Error::Record {
            line: 1,
            message: format!("expected header {}, got {}", SURVEY_HEADER.join(","), names.join(",")),
        });
    }

    for record in rdr.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                batch.errors.push(Error::Record {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != SURVEY_HEADER.len() {
            batch.errors.push(Error::Record {
                line,
                message: format!("expected 5 fields, found {}", record.len()),
            });
            continue;
        }
        let condition = match record[2].parse::<Condition>() {
            Ok(c) => c,
            Err(e) => {
                batch.errors.push(Error::Record {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let month = match record[4].parse::<Month>() {
            Ok(m) => m,
            Err(e) => {
                batch.errors.push(Error::Record {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let reason = record[3].trim();
        if reason.is_empty() {
            log::warn!("survey line {line}: empty reason, record skipped");
            batch.skipped.push(line);
            continue;
        }
        batch.responses.push(SurveyResponse {
            region: record[0].trim().to_string(),
            occupation: record[1].trim().to_string(),
            condition,
            reason: reason.to_string(),
            month,
        });
    }
    Ok(batch)
}

pub fn write_survey<W: Write>(writer: W, responses: &[SurveyResponse]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(SURVEY_HEADER)?;
    for r in responses {
        wtr.write_record([
            r.region.as_str(),
            r.occupation.as_str(),
            r.condition.symbol(),
            r.reason.as_str(),
            &r.month.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("survey", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(with = "day_format")]
    pub date: NaiveDate,
    #[serde(default)]
    pub title: String,
    pub body: String,
}

mod day_format {
    use chrono::NaiveDate;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &NaiveDate, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(&d.format("%Y-%m-%d"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveDate, D::Error> {
        let raw = String::deserialize(d)?;
        crate::calendar::parse_day(&raw).map_err(serde::de::Error::custom)
    }
}

/// Read a JSONL corpus. Blank lines are ignored; ids must be unique.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("corpus", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| Error::Record {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(doc.id.clone()) {
            return Err(Error::Record {
                line: idx + 1,
                message: format!("duplicate document id {:?}", doc.id),
            });
        }
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_corpus<W: Write>(mut writer: W, docs: &[Document]) -> Result<()> {
    for doc in docs {
        serde_json::to_writer(&mut writer, doc)?;
        writer.write_all(b"\n").map_err(|e| Error::io("corpus", e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    /// `<doc_id>:<segment index>`; the title, when present, is segment 0.
    pub id: String,
    pub doc_id: String,
    #[serde(with = "day_format")]
    pub date: NaiveDate,
    pub text: String,
    pub tokens: Vec<String>,
}

impl Sentence {
    /// N_s: the number of tokens.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

fn is_sentence_end(text: &str, i: usize, c: char) -> bool {
    match c {
        '。' => true,
        '.' => text[i + 1..].chars().next().is_some_and(char::is_whitespace),
        _ => false,
    }
}

/// Split text after every `。` and after every `.` that is followed by whitespace.
///
/// The delimiter and any whitespace that follows it stay with the segment they end,
/// so concatenating the segments gives back `text`.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if !is_sentence_end(text, i, c) {
            continue;
        }
        let mut end = i + c.len_utf8();
        while let Some(&(j, w)) = chars.peek() {
            if !w.is_whitespace() {
                break;
            }
            end = j + w.len_utf8();
            chars.next();
        }
        out.push(&text[start..end]);
        start = end;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

/// Segment a document into sentences. The title (if any) is its own leading segment.
pub fn segment_sentences(doc: &Document, tokenizer: &dyn Tokenizer) -> Vec<Sentence> {
    let title = (!doc.title.trim().is_empty()).then_some(doc.title.as_str());
    title
        .into_iter()
        .chain(split_sentences(&doc.body))
        .enumerate()
        .map(|(i, text)| Sentence {
            id: format!("{}:{}", doc.id, i),
            doc_id: doc.id.clone(),
            date: doc.date,
            text: text.to_string(),
            tokens: tokenizer.tokenize(text),
        })
        .collect()
}

/// Segment every document and keep only sentences with at least one token.
pub fn admitted_sentences(docs: &[Document], tokenizer: &dyn Tokenizer) -> Vec<Sentence> {
    docs.iter()
        .flat_map(|d| segment_sentences(d, tokenizer))
        .filter(|s| !s.is_empty())
        .collect()
}

pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<String>;
}

/// Latin/digit words as whole tokens, CJK runs as overlapping character bigrams.
#[derive(Debug, Clone, Copy, Default)]
pub struct BigramTokenizer;

pub(crate) fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3005..=0x3007
        | 0x3041..=0x309F
        | 0x30A0..=0x30FA
        | 0x30FC..=0x30FF
        | 0x31F0..=0x31FF
        | 0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xAC00..=0xD7AF
        | 0xF900..=0xFAFF
        | 0xFF66..=0xFF9F
        | 0x20000..=0x2FFFF)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Word,
    Cjk,
    Other,
}

fn classify(c: char) -> CharClass {
    if is_cjk(c) {
        CharClass::Cjk
    } else if c.is_alphanumeric() {
        CharClass::Word
    } else {
        CharClass::Other
    }
}

impl Tokenizer for BigramTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        let mut tokens = Vec::new();
        let mut run: Vec<char> = Vec::new();
        let mut class = CharClass::Other;

        let flush = |run: &mut Vec<char>, class: CharClass, tokens: &mut Vec<String>| {
            match class {
                CharClass::Word => tokens.push(run.iter().flat_map(|c| c.to_lowercase()).collect()),
                CharClass::Cjk if run.len() == 1 => tokens.push(run[0].to_string()),
                CharClass::Cjk => tokens.extend(run.windows(2).map(|w| w.iter().collect())),
                CharClass::Other => {}
            }
            run.clear();
        };

        for c in text.chars() {
            let cc = classify(c);
            if cc != class {
                flush(&mut run, class, &mut tokens);
                class = cc;
            }
            if cc != CharClass::Other {
                run.push(c);
            }
        }
        flush(&mut run, class, &mut tokens);
        tokens
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    BigramTokenizer.tokenize(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(title: &str, body: &str) -> Document {
        Document {
            id: "d1".into(),
            date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
            title: title.into(),
            body: body.into(),
        }
    }

    fn texts(doc: &Document) -> Vec<String> {
        segment_sentences(doc, &BigramTokenizer)
            .into_iter()
            .map(|s| s.text)
            .collect()
    }

    #[test]
    fn survey_row_from_table() {
        let csv = "region,occupation,condition,reason,month\n\
                   Hokkaido,taxi driver,×,\"sales are declining\",2008-01\n";
        let batch = parse_survey(csv.as_bytes()).unwrap();
        assert!(batch.errors.is_empty());
        let r = &batch.responses[0];
        assert_eq!(r.condition, Condition::VeryBad);
        assert_eq!(r.occupation, "taxi driver");
        assert_eq!(r.month.to_string(), "2008-01");
    }

    #[test]
    fn survey_unknown_symbol_is_record_error() {
        let csv = "region,occupation,condition,reason,month\n\
                   Tokyo,clerk,○,fine,2008-01\n\
                   Osaka,clerk,?,unclear,2008-01\n";
        let batch = parse_survey(csv.as_bytes()).unwrap();
        assert_eq!(batch.responses.len(), 1);
        assert_eq!(batch.errors.len(), 1);
        assert!(matches!(batch.errors[0], Error::Record { line: 3, .. }));
        assert!(batch.into_strict().is_err());
    }

    #[test]
    fn survey_blank_reason_skipped() {
        let csv = "region,occupation,condition,reason,month\nTokyo,clerk,vg,  ,2008-01\n";
        let batch = parse_survey(csv.as_bytes()).unwrap();
        assert!(batch.responses.is_empty());
        assert!(batch.errors.is_empty());
        assert_eq!(batch.skipped, vec![2]);
    }

    #[test]
    fn survey_empty_stream() {
        let batch = parse_survey(&b""[..]).unwrap();
        assert!(batch.responses.is_empty() && batch.errors.is_empty());
    }

    #[test]
    fn survey_aliases_and_round_trip() {
        let rows: Vec<SurveyResponse> = Condition::ALL
            .iter()
            .map(|&c| SurveyResponse {
                region: "r".into(),
                occupation: "o".into(),
                condition: c,
                reason: "x, with comma".into(),
                month: "2010-05".parse().unwrap(),
            })
            .collect();
        let mut buf = Vec::new();
        write_survey(&mut buf, &rows).unwrap();
        assert_eq!(parse_survey(&buf[..]).unwrap().into_strict().unwrap(), rows);
        assert_eq!("VB".parse::<Condition>().unwrap(), Condition::VeryBad);
    }

    #[test]
    fn segmentation_examples() {
        assert_eq!(texts(&doc("", "A。B。")), ["A。", "B。"]);
        assert_eq!(texts(&doc("T", "A。")), ["T", "A。"]);
        assert!(texts(&doc("", "")).is_empty());
        assert_eq!(texts(&doc("", "Sales fell. Prices rose.")), ["Sales fell. ", "Prices rose."]);
        assert_eq!(texts(&doc("", "v1.5 is out。")), ["v1.5 is out。"]);
    }

    #[test]
    fn sentence_ids_count_title_first() {
        let s = segment_sentences(&doc("T", "A。B"), &BigramTokenizer);
        let ids: Vec<_> = s.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["d1:0", "d1:1", "d1:2"]);
    }

    #[test]
    fn admitted_sentences_have_tokens() {
        let d = doc("", "景気。 。。");
        let all = segment_sentences(&d, &BigramTokenizer);
        assert_eq!(all.len(), 3);
        let kept = admitted_sentences(&[d], &BigramTokenizer);
        assert_eq!(kept.len(), 1);
        assert!(kept.iter().all(|s| !s.is_empty()));
    }

    #[test]
    fn tokenizer_examples() {
        assert_eq!(tokenize("increase tax"), ["increase", "tax"]);
        assert_eq!(tokenize("東京五輪"), ["東京", "京五", "五輪"]);
        assert!(tokenize("。").is_empty());
        assert_eq!(tokenize("円"), ["円"]);
        assert_eq!(tokenize("GDP成長、2%増"), ["gdp", "成長", "2", "増"]);
    }

    #[test]
    fn corpus_jsonl_reading() {
        let data = "{\"id\":\"a\",\"date\":\"2020-01-02T09:00:00Z\",\"title\":\"t\",\"body\":\"b\"}\n\n\
                    {\"id\":\"b\",\"date\":\"2020-01-03\",\"body\":\"c\"}\n";
        let docs = read_corpus(data.as_bytes()).unwrap();
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].date, NaiveDate::from_ymd_opt(2020, 1, 2).unwrap());
        assert_eq!(docs[1].title, "");

        let dup = "{\"id\":\"a\",\"date\":\"2020-01-02\",\"body\":\"b\"}\n{\"id\":\"a\",\"date\":\"2020-01-02\",\"body\":\"b\"}\n";
        assert!(matches!(read_corpus(dup.as_bytes()), Err(Error::Record { line: 2, .. })));
        let bad_date = "{\"id\":\"a\",\"date\":\"2020-13-02\",\"body\":\"b\"}\n";
        assert!(read_corpus(bad_date.as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn segments_rejoin_to_body(body in "[a-z 。.\\n東京]{0,40}") {
            let d = doc("title", &body);
            let segs = texts(&d);
            prop_assert_eq!(segs[1..].concat(), body);
            prop_assert!(segs.iter().all(|s| !s.is_empty()));
        }

        #[test]
        fn tokenize_is_deterministic(text in "\\PC{0,30}") {
            prop_assert_eq!(tokenize(&text), tokenize(&text));
        }
    }
}
