//! HTTP client for the wire protocol.

use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use url::Url;

use super::wire::{self, *};
use super::{check_top_k, sample_seeded, truncate_left, LanguageModel, ModelMeta, ProviderError, TokenDistribution};
use crate::refmodel::LOGPROB_FLOOR;
use crate::TokenId;

pub const TOKEN_ENV: &str = "MEMAUDIT_PROVIDER_TOKEN";

#[derive(Debug, Clone)]
pub struct RemoteOptions {
    pub timeout_ms: u64,
    pub bearer_token: Option<String>,
    pub attempts: u32,
    /// Delay before the first retry; doubled for each further retry.
    pub initial_backoff: Duration,
    /// Use the server's `/v1/sample` instead of sampling locally from `/v1/distribution`.
    pub server_sampling: bool,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        Self {
            timeout_ms: 30_000,
            bearer_token: None,
            attempts: 3,
            initial_backoff: Duration::from_millis(200),
            server_sampling: false,
        }
    }
}

impl RemoteOptions {
    /// Defaults with the bearer token taken from `MEMAUDIT_PROVIDER_TOKEN`.
    pub fn from_env() -> Self {
        Self { bearer_token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()), ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct RemoteClient {
    base: Url,
    agent: ureq::Agent,
    opts: RemoteOptions,
    meta: ModelMeta,
}

enum Failure {
    Retry(String),
    Fatal(ProviderError),
}

impl RemoteClient {
    /// Validates the endpoint and fetches `/v1/meta`.
    pub fn connect(endpoint: &str, opts: RemoteOptions) -> Result<Self, ProviderError> {
        let base = Url::parse(endpoint).map_err(|e| ProviderError::InvalidArgument(format!("endpoint {endpoint:?}: {e}")))?;
        if !matches!(base.scheme(), "http" | "https") || base.host_str().is_none() {
            return Err(ProviderError::InvalidArgument(format!("endpoint {endpoint:?} is not an http(s) URL")));
        }
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_millis(opts.timeout_ms.max(1))).build();
        let placeholder = ModelMeta { model_label: String::new(), vocab_size: 0, bos_id: 0, eos_id: 0, max_context: 0 };
        let mut client = Self { base, agent, opts, meta: placeholder };
        let meta: ModelMeta = client.call("GET", META_PATH, None::<&()>)?;
        if meta.vocab_size == 0
            || meta.bos_id as usize >= meta.vocab_size
            || meta.eos_id as usize >= meta.vocab_size
            || meta.bos_id == meta.eos_id
            || meta.max_context == 0
        {
            return Err(ProviderError::Protocol(format!("inconsistent model metadata {meta:?}")));
        }
        client.meta = meta;
        Ok(client)
    }

    pub fn base(&self) -> &Url {
        &self.base
    }

    pub fn options(&self) -> &RemoteOptions {
        &self.opts
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base.as_str().trim_end_matches('/'), path)
    }

    fn attempt(&self, method: &str, path: &str, body: Option<&str>) -> Result<String, Failure> {
        let mut req = self
            .agent
            .request(method, &self.url(path))
            .set(PROTO_HEADER, PROTO_VERSION)
            .set("Accept", "application/json");
        if let Some(tok) = &self.opts.bearer_token {
            req = req.set("Authorization", &format!("Bearer {tok}"));
        }
        let resp = match body {
            Some(b) => req.set("Content-Type", "application/json").send_string(b),
            None => req.call(),
        };
        match resp {
            Ok(r) => r.into_string().map_err(|e| Failure::Retry(format!("reading response body: {e}"))),
            Err(ureq::Error::Status(code, r)) => {
                let text = r.into_string().unwrap_or_default();
                let msg = serde_json::from_str::<ErrorBody>(&text).map(|e| e.error).unwrap_or(text);
                match code {
                    408 | 429 | 500..=599 => Err(Failure::Retry(format!("HTTP {code}: {msg}"))),
                    _ => Err(Failure::Fatal(ProviderError::Rejected(format!("{path}: HTTP {code}: {msg}")))),
                }
            }
            Err(ureq::Error::Transport(t)) => Err(Failure::Retry(t.to_string())),
        }
    }

    fn call<B: Serialize, R: DeserializeOwned>(&self, method: &str, path: &str, body: Option<&B>) -> Result<R, ProviderError> {
        let body = body.map(|b| serde_json::to_string(b).expect("request serializes"));
        let attempts = self.opts.attempts.max(1);
        let mut delay = self.opts.initial_backoff;
        let mut last = String::new();
        for i in 0..attempts {
            if i > 0 {
                log::warn!("retrying {path} after {delay:?}: {last}");
                thread::sleep(delay);
                delay *= 2;
            }
            match self.attempt(method, path, body.as_deref()) {
                Ok(text) => {
                    return serde_json::from_str(&text)
                        .map_err(|e| ProviderError::Protocol(format!("{path}: malformed payload: {e}")));
                }
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retry(m)) => last = m,
            }
        }
        Err(ProviderError::Unavailable { attempts, message: format!("{path}: {last}") })
    }

    fn check_ids(&self, ids: &[TokenId], what: &str) -> Result<(), ProviderError> {
        match ids.iter().find(|&&t| t as usize >= self.meta.vocab_size) {
            Some(t) => Err(ProviderError::Protocol(format!("{what}: token id {t} outside vocabulary"))),
            None => Ok(()),
        }
    }
}

impl LanguageModel for RemoteClient {
    fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    fn next_distribution(&self, context: &[TokenId], top_k: usize) -> Result<TokenDistribution<f64>, ProviderError> {
        check_top_k(&self.meta, top_k)?;
        let req = DistributionRequest { context_tokens: truncate_left(context, self.meta.max_context).to_vec(), top_k };
        let resp: DistributionResponse = self.call("POST", wire::DISTRIBUTION_PATH, Some(&req))?;
        let values = match (resp.logits, resp.logprobs) {
            (Some(v), None) | (None, Some(v)) => v,
            _ => return Err(ProviderError::Protocol("distribution must carry exactly one of logits, logprobs".into())),
        };
        self.check_ids(&resp.token_ids, "distribution")?;
        let dist = TokenDistribution::from_logits(resp.token_ids, values)
            .map_err(|e| ProviderError::Protocol(format!("distribution: {e}")))?;
        Ok(dist.truncate_top_k(top_k))
    }

    fn logprobs(&self, text: &str) -> Result<Vec<(String, f64)>, ProviderError> {
        let text = crate::corpus::normalize_text(text);
        if text.is_empty() {
            return Err(ProviderError::InvalidArgument("text is empty".into()));
        }
        let resp: LogprobsResponse = self.call("POST", LOGPROBS_PATH, Some(&LogprobsRequest { text }))?;
        if resp.tokens.len() != resp.logprobs.len() || resp.tokens.is_empty() {
            return Err(ProviderError::Protocol(format!(
                "logprobs: {} tokens but {} values",
                resp.tokens.len(),
                resp.logprobs.len()
            )));
        }
        if let Some(bad) = resp.logprobs.iter().find(|v| v.is_nan() || **v > 1e-6) {
            return Err(ProviderError::Protocol(format!("logprobs: invalid value {bad}")));
        }
        let floored = resp.logprobs.into_iter().map(|v| v.min(0.0).max(LOGPROB_FLOOR));
        Ok(resp.tokens.into_iter().zip(floored).collect())
    }

    fn encode(&self, text: &str) -> Result<Vec<TokenId>, ProviderError> {
        let resp: TokenizeResponse = self.call("POST", TOKENIZE_PATH, Some(&TokenizeRequest { text: text.to_owned() }))?;
        self.check_ids(&resp.token_ids, "tokenize")?;
        Ok(resp.token_ids)
    }

    fn decode(&self, tokens: &[TokenId]) -> Result<String, ProviderError> {
        let resp: DetokenizeResponse =
            self.call("POST", DETOKENIZE_PATH, Some(&DetokenizeRequest { token_ids: tokens.to_vec() }))?;
        Ok(resp.text)
    }

    fn sample(&self, context: &[TokenId], top_k: usize, temperature: f64, seed: u64) -> Result<TokenId, ProviderError> {
        if !self.opts.server_sampling {
            return sample_seeded(&self.next_distribution(context, top_k)?, temperature, seed);
        }
        check_top_k(&self.meta, top_k)?;
        let req = SampleRequest {
            context_tokens: truncate_left(context, self.meta.max_context).to_vec(),
            top_k,
            temperature,
            seed,
        };
        let resp: SampleResponse = self.call("POST", SAMPLE_PATH, Some(&req))?;
        self.check_ids(&[resp.token_id], "sample")?;
        Ok(resp.token_id)
    }

    fn samples_remotely(&self) -> bool {
        self.opts.server_sampling
    }
}
