//! Uniform access to a language model, whether the built-in n-gram model or
//! a remote server speaking the JSON wire protocol.

mod distribution;
pub mod remote;
pub mod wire;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

pub use distribution::{DistributionError, TokenDistribution};
pub use remote::{RemoteClient, RemoteOptions};

use crate::generate::{sample_index, softmax_with_temperature};
use crate::refmodel::{split_tokens, NGramModel, RefModelError};
use crate::TokenId;

/// Context limit advertised by the built-in provider. Only the last
/// `order - 1` tokens influence an n-gram model anyway.
pub const BUILTIN_MAX_CONTEXT: usize = 4096;

#[derive(Debug, Error)]
pub enum ProviderError {
    /// Network failure or server-side error that survived every retry.
    #[error("provider unavailable after {attempts} attempt(s): {message}")]
    Unavailable { attempts: u32, message: String },
    /// The server answered with a payload that violates the protocol.
    #[error("protocol error: {0}")]
    Protocol(String),
    /// The server rejected the request (HTTP 4xx).
    #[error("request rejected by provider: {0}")]
    Rejected(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] RefModelError),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Unavailable { .. })
    }
}

/// Model description, identical to the `/v1/meta` response body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model_label: String,
    pub vocab_size: usize,
    pub bos_id: TokenId,
    pub eos_id: TokenId,
    pub max_context: usize,
}

/// Operations the audit pipeline needs from a model.
pub trait LanguageModel: Send + Sync {
    fn meta(&self) -> &ModelMeta;

    /// The `top_k` most probable next tokens, renormalized over that set.
    fn next_distribution(&self, context: &[TokenId], top_k: usize) -> Result<TokenDistribution<f64>, ProviderError>;

    /// Per-token log-probabilities of `text` under the model's own tokenizer.
    fn logprobs(&self, text: &str) -> Result<Vec<(String, f64)>, ProviderError>;

    fn encode(&self, text: &str) -> Result<Vec<TokenId>, ProviderError>;

    fn decode(&self, tokens: &[TokenId]) -> Result<String, ProviderError>;

    /// Draws one token from the temperature-scaled top-k distribution using
    /// a generator seeded with `seed`.
    fn sample(&self, context: &[TokenId], top_k: usize, temperature: f64, seed: u64) -> Result<TokenId, ProviderError> {
        sample_seeded(&self.next_distribution(context, top_k)?, temperature, seed)
    }

    /// Whether generation should draw tokens through [`LanguageModel::sample`]
    /// instead of sampling from [`LanguageModel::next_distribution`] locally.
    fn samples_remotely(&self) -> bool {
        false
    }
}

fn sample_seeded(dist: &TokenDistribution<f64>, temperature: f64, seed: u64) -> Result<TokenId, ProviderError> {
    let probs =
        softmax_with_temperature(dist.logits(), temperature).map_err(|e| ProviderError::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(dist.token_ids()[sample_index(&probs, &mut rng)])
}

fn check_top_k(meta: &ModelMeta, top_k: usize) -> Result<(), ProviderError> {
    if top_k == 0 || top_k > meta.vocab_size {
        return Err(ProviderError::InvalidArgument(format!("top_k {top_k} outside 1..={}", meta.vocab_size)));
    }
    Ok(())
}

fn truncate_left(context: &[TokenId], max: usize) -> &[TokenId] {
    &context[context.len().saturating_sub(max)..]
}

/// The built-in reference model behind the provider contract.
#[derive(Debug, Clone)]
pub struct BuiltinProvider {
    model: Arc<NGramModel>,
    meta: ModelMeta,
}

impl BuiltinProvider {
    pub fn new(model: Arc<NGramModel>, label: impl Into<String>) -> Self {
        let v = model.vocabulary();
        let meta = ModelMeta {
            model_label: label.into(),
            vocab_size: v.len(),
            bos_id: v.bos_id(),
            eos_id: v.eos_id(),
            max_context: BUILTIN_MAX_CONTEXT,
        };
        Self { model, meta }
    }

    pub fn model(&self) -> &NGramModel {
        &self.model
    }
}

impl LanguageModel for BuiltinProvider {
    fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    fn next_distribution(&self, context: &[TokenId], top_k: usize) -> Result<TokenDistribution<f64>, ProviderError> {
        check_top_k(&self.meta, top_k)?;
        let context = truncate_left(context, self.meta.max_context);
        if top_k >= self.meta.vocab_size {
            return Ok(self.model.next_token_dist(context));
        }
        Ok(TokenDistribution::from_probs(self.model.top_k(context, top_k)).renormalized())
    }

    fn logprobs(&self, text: &str) -> Result<Vec<(String, f64)>, ProviderError> {
        let text = crate::corpus::normalize_text(text);
        let pieces = split_tokens(&text);
        if pieces.is_empty() {
            return Err(ProviderError::InvalidArgument("text has no tokens".into()));
        }
        let ids = self.model.vocabulary().encode(&text);
        let lps = self.model.score_logprobs(&ids);
        Ok(pieces.into_iter().map(str::to_owned).zip(lps).collect())
    }

    fn encode(&self, text: &str) -> Result<Vec<TokenId>, ProviderError> {
        Ok(self.model.vocabulary().encode(text))
    }

    fn decode(&self, tokens: &[TokenId]) -> Result<String, ProviderError> {
        Ok(self.model.vocabulary().decode(tokens)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    BuiltinNgram,
    Remote,
}

#[derive(Debug, Clone)]
enum Backend {
    Builtin(BuiltinProvider),
    Remote(RemoteClient),
}

/// A configured model: builtin n-gram or remote endpoint.
#[derive(Debug, Clone)]
pub struct ProviderHandle {
    pub kind: ProviderKind,
    pub model_label: String,
    pub endpoint: Option<Url>,
    pub timeout_ms: u64,
    pub max_context: usize,
    backend: Backend,
}

impl ProviderHandle {
    pub fn builtin(model: Arc<NGramModel>, label: impl Into<String>) -> Self {
        let p = BuiltinProvider::new(model, label);
        Self {
            kind: ProviderKind::BuiltinNgram,
            model_label: p.meta.model_label.clone(),
            endpoint: None,
            timeout_ms: 0,
            max_context: p.meta.max_context,
            backend: Backend::Builtin(p),
        }
    }

    /// Connects to a server and fetches its `/v1/meta`.
    pub fn remote(endpoint: &str, opts: RemoteOptions) -> Result<Self, ProviderError> {
        let client = RemoteClient::connect(endpoint, opts)?;
        Ok(Self {
            kind: ProviderKind::Remote,
            model_label: client.meta().model_label.clone(),
            endpoint: Some(client.base().clone()),
            timeout_ms: client.options().timeout_ms,
            max_context: client.meta().max_context,
            backend: Backend::Remote(client),
        })
    }

    pub fn as_builtin(&self) -> Option<&BuiltinProvider> {
        match &self.backend {
            Backend::Builtin(b) => Some(b),
            Backend::Remote(_) => None,
        }
    }

    fn inner(&self) -> &dyn LanguageModel {
        match &self.backend {
            Backend::Builtin(b) => b,
            Backend::Remote(r) => r,
        }
    }
}

impl LanguageModel for ProviderHandle {
    fn meta(&self) -> &ModelMeta {
        self.inner().meta()
    }

    fn next_distribution(&self, context: &[TokenId], top_k: usize) -> Result<TokenDistribution<f64>, ProviderError> {
        self.inner().next_distribution(context, top_k)
    }

    fn logprobs(&self, text: &str) -> Result<Vec<(String, f64)>, ProviderError> {
        self.inner().logprobs(text)
    }

    fn encode(&self, text: &str) -> Result<Vec<TokenId>, ProviderError> {
        self.inner().encode(text)
    }

    fn decode(&self, tokens: &[TokenId]) -> Result<String, ProviderError> {
        self.inner().decode(tokens)
    }

    fn sample(&self, context: &[TokenId], top_k: usize, temperature: f64, seed: u64) -> Result<TokenId, ProviderError> {
        self.inner().sample(context, top_k, temperature, seed)
    }

    fn samples_remotely(&self) -> bool {
        self.inner().samples_remotely()
    }
}
