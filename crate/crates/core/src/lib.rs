//! Business-sentiment nowcasting from news text.
//!
//! Pipeline: corpus → tf-idf → one-class SVM outlier filter → ridge sentiment
//! regression → bucketed sentiment index, plus word-level contribution analysis
//! and a single-factor dynamic factor model for combining the index with other
//! monthly indicators.

pub mod calendar;
pub mod contribution;
pub mod corpus;
pub mod dfm;
pub mod error;
pub mod index;
pub mod outlier;
pub mod pipeline;
pub mod sentiment;
pub mod server;
pub mod synth;
pub mod vectorize;

pub use error::{Error, Result};
