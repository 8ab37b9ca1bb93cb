//! Memorization auditing for generative code models.
//!
//! The crate extracts outputs from a model under several sampling strategies,
//! detects verbatim (Type-1) reuse of training code, ranks outputs with
//! perplexity-family inference metrics, scans outputs for leaked secrets and
//! runs factor sweeps. A built-in n-gram reference model that memorizes its
//! training data by construction makes every stage testable end to end.
//!
//! Numeric code is generic over [`num::Real`]; the aliases below fix the
//! scalar to `f64`, which is what the pipeline uses.

pub mod audit;
pub mod clonedetect;
pub mod corpus;
pub mod experiments;
pub mod generate;
pub mod metrics;
pub mod num;
pub mod provider;
pub mod refmodel;
pub mod scanners;
pub mod testbed;

pub use num::Real;

/// Token identifier within a model vocabulary.
pub type TokenId = u32;

pub type TokenDistribution = provider::TokenDistribution<f64>;
pub type MetricScores = metrics::MetricScores<f64>;
pub type RankedList = metrics::RankedList<f64>;
pub type CorrelationResult = experiments::CorrelationResult<f64>;
