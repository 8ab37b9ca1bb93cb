use std::cmp::Ordering;
use std::collections::HashSet;

use thiserror::Error;

use crate::generate::softmax_with_temperature;
use crate::{Real, TokenId};

#[derive(Debug, Error, PartialEq)]
pub enum DistributionError {
    #[error("token ids and values differ in length ({ids} vs {values})")]
    LengthMismatch { ids: usize, values: usize },
    #[error("duplicate token id {0}")]
    DuplicateToken(TokenId),
    #[error("non-finite logit for token {0}")]
    NonFinite(TokenId),
    #[error("empty distribution")]
    Empty,
}

/// Next-token distribution over a set of distinct tokens.
///
/// Entries are kept in canonical order: probability descending, ties by
/// ascending token id. `logits` are the unnormalized scores the
/// probabilities came from (for the builtin model, log-probabilities).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution<T> {
    token_ids: Vec<TokenId>,
    logits: Vec<T>,
    probs: Vec<T>,
}

fn canonical<T: Real>(a: (TokenId, T), b: (TokenId, T)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

impl<T: Real> TokenDistribution<T> {
    /// From `(token, probability)` pairs that already sum to one; logits
    /// are set to `ln p`.
    pub fn from_probs(mut pairs: Vec<(TokenId, T)>) -> Self {
        pairs.sort_by(|&a, &b| canonical(a, b));
        let token_ids = pairs.iter().map(|&(t, _)| t).collect();
        let logits = pairs.iter().map(|&(_, p)| p.ln()).collect();
        let probs = pairs.into_iter().map(|(_, p)| p).collect();
        Self { token_ids, logits, probs }
    }

    /// Applies a unit-temperature softmax to `logits`.
    pub fn from_logits(token_ids: Vec<TokenId>, logits: Vec<T>) -> Result<Self, DistributionError> {
        if token_ids.len() != logits.len() {
            return Err(DistributionError::LengthMismatch { ids: token_ids.len(), values: logits.len() });
        }
        if token_ids.is_empty() {
            return Err(DistributionError::Empty);
        }
        let mut seen = HashSet::with_capacity(token_ids.len());
        for (&t, z) in token_ids.iter().zip(&logits) {
            if !seen.insert(t) {
                return Err(DistributionError::DuplicateToken(t));
            }
            if !z.is_finite() {
                return Err(DistributionError::NonFinite(t));
            }
        }
        let probs = softmax_with_temperature(&logits, T::one()).expect("unit temperature is valid");
        let mut rows: Vec<(TokenId, T, T)> =
            token_ids.into_iter().zip(logits).zip(probs).map(|((t, z), p)| (t, z, p)).collect();
        rows.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        Ok(Self {
            token_ids: rows.iter().map(|r| r.0).collect(),
            logits: rows.iter().map(|r| r.1).collect(),
            probs: rows.iter().map(|r| r.2).collect(),
        })
    }

    pub fn token_ids(&self) -> &[TokenId] {
        &self.token_ids
    }

    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn prob_of(&self, token: TokenId) -> Option<T> {
        self.token_ids.iter().position(|&t| t == token).map(|i| self.probs[i])
    }

    /// Most probable token (lowest id among ties).
    pub fn argmax(&self) -> Option<TokenId> {
        self.token_ids.first().copied()
    }

    /// Rescales probabilities to sum to one. Logits are unchanged.
    pub(crate) fn renormalized(mut self) -> Self {
        let sum = self.probs.iter().fold(T::zero(), |a, &p| a + p);
        if sum > T::zero() {
            self.probs.iter_mut().for_each(|p| *p = *p / sum);
        }
        self
    }

    /// Keeps the `k` most probable tokens and renormalizes their
    /// probabilities. Logits are carried over unchanged.
    pub fn truncate_top_k(&self, k: usize) -> Self {
        if k >= self.len() {
            return self.clone();
        }
        let kept = &self.probs[..k];
        let sum = kept.iter().fold(T::zero(), |a, &p| a + p);
        Self {
            token_ids: self.token_ids[..k].to_vec(),
            logits: self.logits[..k].to_vec(),
            probs: kept.iter().map(|&p| p / sum).collect(),
        }
    }
}
