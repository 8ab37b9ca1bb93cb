//! JSON wire protocol shared by the remote client and any server.
//!
//! [`dispatch`] maps a request onto a [`LanguageModel`] so that a server
//! (or a test stub) needs only an HTTP front end.

use serde::{Deserialize, Serialize};

use super::{LanguageModel, ProviderError};
use crate::TokenId;

pub const PROTO_HEADER: &str = "X-MemAudit-Proto";
pub const PROTO_VERSION: &str = "1";

pub const META_PATH: &str = "/v1/meta";
pub const DISTRIBUTION_PATH: &str = "/v1/distribution";
pub const LOGPROBS_PATH: &str = "/v1/logprobs";
pub const SAMPLE_PATH: &str = "/v1/sample";
pub const TOKENIZE_PATH: &str = "/v1/tokenize";
pub const DETOKENIZE_PATH: &str = "/v1/detokenize";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionRequest {
    pub context_tokens: Vec<TokenId>,
    pub top_k: usize,
}

/// Servers send either `logits` or `logprobs`; the client accepts both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionResponse {
    pub token_ids: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogprobsRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobsResponse {
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRequest {
    pub context_tokens: Vec<TokenId>,
    pub top_k: usize,
    pub temperature: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResponse {
    pub token_id: TokenId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizeRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizeResponse {
    pub token_ids: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetokenizeRequest {
    pub token_ids: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetokenizeResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

/// Status code and JSON body produced by [`dispatch`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireResponse {
    pub status: u16,
    pub body: String,
}

impl WireResponse {
    fn ok<T: Serialize>(value: &T) -> Self {
        Self { status: 200, body: serde_json::to_string(value).expect("wire types serialize") }
    }

    pub fn error(status: u16, message: impl Into<String>) -> Self {
        Self { status, body: serde_json::to_string(&ErrorBody { error: message.into() }).expect("serialize") }
    }
}

fn parse<'a, T: Deserialize<'a>>(body: &'a [u8]) -> Result<T, WireResponse> {
    serde_json::from_slice(body).map_err(|e| WireResponse::error(400, format!("malformed request: {e}")))
}

fn fail(e: ProviderError) -> WireResponse {
    match e {
        ProviderError::InvalidArgument(m) | ProviderError::Rejected(m) => WireResponse::error(400, m),
        ProviderError::Model(m) => WireResponse::error(400, m.to_string()),
        other => WireResponse::error(500, other.to_string()),
    }
}

/// Serves one protocol request against `model`.
///
/// `proto` is the value of the version header, if the client sent one; a
/// mismatching version is rejected with 400.
pub fn dispatch(model: &dyn LanguageModel, method: &str, path: &str, proto: Option<&str>, body: &[u8]) -> WireResponse {
    if let Some(v) = proto {
        if v.trim() != PROTO_VERSION {
            return WireResponse::error(400, format!("unsupported protocol version {v:?}"));
        }
    }
    let path = path.split('?').next().unwrap_or(path);
    let result = match (method, path) {
        ("GET", META_PATH) => Ok(WireResponse::ok(model.meta())),
        ("POST", DISTRIBUTION_PATH) => parse::<DistributionRequest>(body).map(|r| {
            match model.next_distribution(&r.context_tokens, r.top_k) {
                Ok(d) => WireResponse::ok(&DistributionResponse {
                    token_ids: d.token_ids().to_vec(),
                    logits: Some(d.logits().to_vec()),
                    logprobs: None,
                }),
                Err(e) => fail(e),
            }
        }),
        ("POST", LOGPROBS_PATH) => parse::<LogprobsRequest>(body).map(|r| match model.logprobs(&r.text) {
            Ok(pairs) => {
                let (tokens, logprobs) = pairs.into_iter().unzip();
                WireResponse::ok(&LogprobsResponse { tokens, logprobs })
            }
            Err(e) => fail(e),
        }),
        ("POST", SAMPLE_PATH) => parse::<SampleRequest>(body).map(|r| {
            match model.sample(&r.context_tokens, r.top_k, r.temperature, r.seed) {
                Ok(token_id) => WireResponse::ok(&SampleResponse { token_id }),
                Err(e) => fail(e),
            }
        }),
        ("POST", TOKENIZE_PATH) => parse::<TokenizeRequest>(body).map(|r| match model.encode(&r.text) {
            Ok(token_ids) => WireResponse::ok(&TokenizeResponse { token_ids }),
            Err(e) => fail(e),
        }),
        ("POST", DETOKENIZE_PATH) => parse::<DetokenizeRequest>(body).map(|r| match model.decode(&r.token_ids) {
            Ok(text) => WireResponse::ok(&DetokenizeResponse { text }),
            Err(e) => fail(e),
        }),
        (_, META_PATH | DISTRIBUTION_PATH | LOGPROBS_PATH | SAMPLE_PATH | TOKENIZE_PATH | DETOKENIZE_PATH) => {
            Ok(WireResponse::error(405, format!("method {method} not allowed on {path}")))
        }
        _ => Ok(WireResponse::error(404, format!("no such endpoint {path}"))),
    };
    result.unwrap_or_else(|e| e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, CorpusRole, Document};
    use crate::provider::ProviderHandle;
    use crate::refmodel::NGramModel;
    use std::sync::Arc;

    fn model() -> ProviderHandle {
        let docs = vec![Document::new("a", "x = 1\ny = 2\n", "t")];
        let c = Corpus::from_documents(docs, CorpusRole::Training).unwrap();
        ProviderHandle::builtin(Arc::new(NGramModel::train(&c, 3, 0.4).unwrap()), "stub")
    }

    #[test]
    fn meta_endpoint() {
        let m = model();
        let r = dispatch(&m, "GET", META_PATH, Some("1"), b"");
        assert_eq!(r.status, 200);
        let meta: crate::provider::ModelMeta = serde_json::from_str(&r.body).unwrap();
        assert_eq!(&meta, m.meta());
    }

    #[test]
    fn distribution_endpoint_reports_descending_logits() {
        let m = model();
        let r = dispatch(&m, "POST", DISTRIBUTION_PATH, None, br#"{"context_tokens":[0],"top_k":2}"#);
        assert_eq!(r.status, 200, "{}", r.body);
        let d: DistributionResponse = serde_json::from_str(&r.body).unwrap();
        let logits = d.logits.unwrap();
        assert!(d.token_ids.len() <= 2 && d.token_ids.len() == logits.len());
        assert!(logits.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn malformed_input_is_400_with_error_body() {
        let m = model();
        for (path, body) in [
            (DISTRIBUTION_PATH, &b"{"[..]),
            (DISTRIBUTION_PATH, br#"{"context_tokens":[0],"top_k":0}"#),
            (LOGPROBS_PATH, br#"{"txt":"a"}"#),
            (LOGPROBS_PATH, br#"{"text":""}"#),
            (SAMPLE_PATH, br#"{"context_tokens":[],"top_k":1,"temperature":0.0,"seed":1}"#),
            (DETOKENIZE_PATH, br#"{"token_ids":[999999]}"#),
        ] {
            let r = dispatch(&m, "POST", path, Some("1"), body);
            assert_eq!(r.status, 400, "{path} {}", r.body);
            let e: ErrorBody = serde_json::from_str(&r.body).unwrap();
            assert!(!e.error.is_empty());
        }
        assert_eq!(dispatch(&m, "GET", META_PATH, Some("2"), b"").status, 400);
        assert_eq!(dispatch(&m, "GET", "/v2/meta", None, b"").status, 404);
        assert_eq!(dispatch(&m, "GET", LOGPROBS_PATH, None, b"").status, 405);
    }

    #[test]
    fn tokenize_round_trip() {
        let m = model();
        let r = dispatch(&m, "POST", TOKENIZE_PATH, None, br#"{"text":"x = 2\n"}"#);
        let t: TokenizeResponse = serde_json::from_str(&r.body).unwrap();
        let body = serde_json::to_vec(&DetokenizeRequest { token_ids: t.token_ids }).unwrap();
        let r = dispatch(&m, "POST", DETOKENIZE_PATH, None, &body);
        let d: DetokenizeResponse = serde_json::from_str(&r.body).unwrap();
        assert_eq!(d.text, "x = 2\n");
    }
}
