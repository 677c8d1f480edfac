//! Calendar months and the time buckets the index is aggregated over.

use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A calendar month, `YYYY-MM` on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Month {
    year: i32,
    month: u32,
}

impl Month {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::invalid(format!("month {month} out of range")));
        }
        Ok(Self { year, month })
    }

    pub fn of(date: NaiveDate) -> Self {
        Self {
            year: date.year(),
            month: date.month(),
        }
    }

    pub fn year(self) -> i32 {
        self.year
    }

    pub fn month(self) -> u32 {
        self.month
    }

    pub fn first_day(self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.year, self.month, 1).expect("validated month")
    }

    pub fn succ(self) -> Self {
        if self.month == 12 {
            Self {
                year: self.year + 1,
                month: 1,
            }
        } else {
            Self {
                year: self.year,
                month: self.month + 1,
            }
        }
    }

    /// Months elapsed from `self` to `other` (negative when `other` is earlier).
    pub fn offset_to(self, other: Month) -> i64 {
        (other.year as i64 - self.year as i64) * 12 + other.month as i64 - self.month as i64
    }

    pub fn plus(self, months: u32) -> Self {
        let total = self.year as i64 * 12 + (self.month as i64 - 1) + months as i64;
        Self {
            year: (total.div_euclid(12)) as i32,
            month: (total.rem_euclid(12) + 1) as u32,
        }
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for Month {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (y, m) = s
            .split_once('-')
            .ok_or_else(|| Error::invalid(format!("expected YYYY-MM, got {s:?}")))?;
        if y.len() != 4 || m.len() != 2 {
            return Err(Error::invalid(format!("expected YYYY-MM, got {s:?}")));
        }
        let year = y
            .parse()
            .map_err(|_| Error::invalid(format!("bad year in {s:?}")))?;
        let month = m
            .parse()
            .map_err(|_| Error::invalid(format!("bad month in {s:?}")))?;
        Month::new(year, month)
    }
}

impl Serialize for Month {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Month {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parse an ISO-8601 day. Anything finer than a day (`2020-01-02T10:00:00Z`) is truncated.
pub fn parse_day(s: &str) -> Result<NaiveDate> {
    let s = s.trim();
    let head = s.get(..10).unwrap_or(s);
    if s.len() > 10 && !matches!(s.as_bytes()[10], b'T' | b't' | b' ') {
        return Err(Error::invalid(format!("bad date {s:?}")));
    }
    NaiveDate::parse_from_str(head, "%Y-%m-%d").map_err(|e| Error::invalid(format!("bad date {s:?}: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BucketUnit {
    Day,
    Week,
    #[default]
    Month,
}

impl BucketUnit {
    pub fn bucket_of(self, date: NaiveDate) -> Bucket {
        let start = match self {
            BucketUnit::Day => date,
            BucketUnit::Week => {
                date - Duration::days(date.weekday().num_days_from_monday() as i64)
            }
            BucketUnit::Month => Month::of(date).first_day(),
        };
        Bucket { unit: self, start }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BucketUnit::Day => "day",
            BucketUnit::Week => "week",
            BucketUnit::Month => "month",
        }
    }
}

impl fmt::Display for BucketUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BucketUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "day" => Ok(BucketUnit::Day),
            "week" => Ok(BucketUnit::Week),
            "month" => Ok(BucketUnit::Month),
            other => Err(Error::invalid(format!("unknown bucket unit {other:?}"))),
        }
    }
}

/// A time bucket, identified by its unit and first day.
///
/// Formatted as `YYYY-MM-DD` (day), ISO `YYYY-Www` (week) or `YYYY-MM` (month).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Bucket {
    unit: BucketUnit,
    start: NaiveDate,
}

impl Bucket {
    pub fn unit(&self) -> BucketUnit {
        self.unit
    }

    pub fn start(&self) -> NaiveDate {
        self.start
    }

    /// Last day covered by the bucket.
    pub fn end(&self) -> NaiveDate {
        self.succ().start - Duration::days(1)
    }

    pub fn succ(&self) -> Bucket {
        let start = match self.unit {
            BucketUnit::Day => self.start + Duration::days(1),
            BucketUnit::Week => self.start + Duration::days(7),
            BucketUnit::Month => Month::of(self.start).succ().first_day(),
        };
        Bucket {
            unit: self.unit,
            start,
        }
    }

    pub fn month(month: Month) -> Bucket {
        Bucket {
            unit: BucketUnit::Month,
            start: month.first_day(),
        }
    }

    pub fn parse(unit: BucketUnit, s: &str) -> Result<Bucket> {
        let s = s.trim();
        match unit {
            BucketUnit::Day => Ok(unit.bucket_of(parse_day(s)?)),
            BucketUnit::Month => Ok(Bucket::month(s.parse()?)),
            BucketUnit::Week => {
                let (y, w) = s
                    .split_once("-W")
                    .ok_or_else(|| Error::invalid(format!("expected YYYY-Www, got {s:?}")))?;
                let year: i32 = y
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad ISO year in {s:?}")))?;
                let week: u32 = w
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad ISO week in {s:?}")))?;
                let start = NaiveDate::from_isoywd_opt(year, week, Weekday::Mon)
                    .ok_or_else(|| Error::invalid(format!("no such ISO week {s:?}")))?;
                Ok(Bucket { unit, start })
            }
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.unit {
            BucketUnit::Day => write!(f, "{}", self.start.format("%Y-%m-%d")),
            BucketUnit::Week => {
                let iso = self.start.iso_week();
                write!(f, "{:04}-W{:02}", iso.year(), iso.week())
            }
            BucketUnit::Month => write!(f, "{}", Month::of(self.start)),
        }
    }
}

impl Serialize for Bucket {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

/// Every bucket from `first` to `last` inclusive.
pub fn bucket_range(first: Bucket, last: Bucket) -> impl Iterator<Item = Bucket> {
    std::iter::successors(Some(first), |b| Some(b.succ())).take_while(move |b| *b <= last)
}
