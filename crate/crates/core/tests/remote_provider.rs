use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use memaudit::corpus::{Corpus, CorpusRole, Document};
use memaudit::generate::{generate_batch, start_prompt, GenerationConfig, Strategy};
use memaudit::provider::wire::{dispatch, PROTO_HEADER};
use memaudit::provider::{LanguageModel, ProviderError, ProviderHandle, RemoteOptions};
use memaudit::refmodel::NGramModel;

#[derive(Default)]
struct Faults {
    /// Answer this many requests with 503 before serving.
    unavailable: AtomicUsize,
    /// Replace every distribution body with this text.
    garbage: Mutex<Option<String>>,
    required_token: Option<String>,
}

struct Stub {
    url: String,
    server: Arc<tiny_http::Server>,
    seen: Arc<Mutex<Vec<(String, Option<String>)>>>,
    faults: Arc<Faults>,
    worker: Option<JoinHandle<()>>,
}

impl Stub {
    fn start(model: ProviderHandle, faults: Faults) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
        let url = format!("http://{}", server.server_addr().to_ip().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let faults = Arc::new(faults);
        let worker = {
            let (server, seen, faults) = (Arc::clone(&server), Arc::clone(&seen), Arc::clone(&faults));
            thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    let header = |name: &str| {
                        req.headers().iter().find(|h| h.field.as_str().as_str().eq_ignore_ascii_case(name)).map(|h| h.value.as_str().to_owned())
                    };
                    let proto = header(PROTO_HEADER);
                    let auth = header("Authorization");
                    let path = req.url().to_owned();
                    seen.lock().unwrap().push((path.clone(), proto.clone()));
                    let mut body = Vec::new();
                    req.as_reader().read_to_end(&mut body).unwrap();
                    let (status, text) = if let Some(tok) = &faults.required_token {
                        if auth.as_deref() != Some(&format!("Bearer {tok}")) {
                            (401, r#"{"error":"missing or wrong token"}"#.to_owned())
                        } else {
                            let r = dispatch(&model, req.method().as_str(), &path, proto.as_deref(), &body);
                            (r.status, r.body)
                        }
                    } else if faults
                        .unavailable
                        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                        .is_ok()
                    {
                        (503, r#"{"error":"warming up"}"#.to_owned())
                    } else if let (Some(g), true) = (faults.garbage.lock().unwrap().clone(), path.ends_with("distribution")) {
                        (200, g)
                    } else {
                        let r = dispatch(&model, req.method().as_str(), &path, proto.as_deref(), &body);
                        (r.status, r.body)
                    };
                    let resp = tiny_http::Response::from_string(text).with_status_code(status);
                    let _ = req.respond(resp);
                }
            })
        };
        Self { url, server, seen, faults, worker: Some(worker) }
    }
}

impl Drop for Stub {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

fn builtin() -> ProviderHandle {
    let texts = [
        "def add(a, b):\n    return a + b\n",
        "def sub(a, b):\n    return a - b\n",
        "import os\nprint(os.getcwd())\n",
        "x = add(1, 2)\ny = sub(x, 1)\n",
    ];
    let docs = texts.iter().enumerate().map(|(i, t)| Document::new(format!("d{i}"), t, "t")).collect();
    let c = Corpus::from_documents(docs, CorpusRole::Training).unwrap();
    ProviderHandle::builtin(Arc::new(NGramModel::train(&c, 4, 0.4).unwrap()), "stub-4")
}

fn fast() -> RemoteOptions {
    RemoteOptions { timeout_ms: 2000, attempts: 3, initial_backoff: Duration::from_millis(5), ..RemoteOptions::default() }
}

#[test]
fn remote_model_matches_the_served_model() {
    let local = builtin();
    let stub = Stub::start(builtin(), Faults::default());
    let remote = ProviderHandle::remote(&stub.url, fast()).unwrap();
    assert_eq!(remote.meta(), local.meta());
    let text = "def add(a, b):\n";
    assert_eq!(remote.encode(text).unwrap(), local.encode(text).unwrap());
    let toks = local.encode(text).unwrap();
    assert_eq!(remote.decode(&toks).unwrap(), text);
    assert_eq!(remote.logprobs(text).unwrap(), local.logprobs(text).unwrap());
    let (a, b) = (remote.next_distribution(&toks, 3).unwrap(), local.next_distribution(&toks, 3).unwrap());
    assert_eq!(a.token_ids(), b.token_ids());
    for (x, y) in a.probs().iter().zip(b.probs()) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(stub.seen.lock().unwrap().iter().all(|(_, proto)| proto.as_deref() == Some("1")));
}

#[test]
fn client_side_sampling_reproduces_local_generation() {
    let local = builtin();
    let stub = Stub::start(builtin(), Faults::default());
    let remote = ProviderHandle::remote(&stub.url, fast()).unwrap();
    let mut cfg = GenerationConfig::new(Strategy::Npg);
    cfg.num_outputs = 6;
    cfg.max_tokens = 24;
    cfg.top_k = 3;
    let a = generate_batch(&remote, &start_prompt(&remote), &cfg).unwrap();
    let b = generate_batch(&local, &start_prompt(&local), &cfg).unwrap();
    let texts = |v: &[memaudit::generate::OutputRecord]| v.iter().map(|o| o.text.clone()).collect::<Vec<_>>();
    assert_eq!(texts(&a), texts(&b));
}

#[test]
fn server_side_sampling_is_deterministic() {
    let stub = Stub::start(builtin(), Faults::default());
    let remote = ProviderHandle::remote(&stub.url, RemoteOptions { server_sampling: true, ..fast() }).unwrap();
    let mut cfg = GenerationConfig::new(Strategy::Npg);
    cfg.num_outputs = 3;
    cfg.max_tokens = 16;
    let a = generate_batch(&remote, &start_prompt(&remote), &cfg).unwrap();
    let b = generate_batch(&remote, &start_prompt(&remote), &cfg).unwrap();
    assert_eq!(a, b);
    assert!(stub.seen.lock().unwrap().iter().any(|(p, _)| p.ends_with("/v1/sample")));
}

#[test]
fn transient_failures_are_retried() {
    let stub = Stub::start(builtin(), Faults { unavailable: AtomicUsize::new(2), ..Faults::default() });
    let remote = ProviderHandle::remote(&stub.url, fast()).unwrap();
    assert_eq!(remote.meta().model_label, "stub-4");
    assert_eq!(stub.seen.lock().unwrap().len(), 3);
}

#[test]
fn persistent_failures_exhaust_attempts() {
    let stub = Stub::start(builtin(), Faults { unavailable: AtomicUsize::new(100), ..Faults::default() });
    match ProviderHandle::remote(&stub.url, fast()) {
        Err(ProviderError::Unavailable { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("expected Unavailable, got {:?}", other.map(|_| ())),
    }
    assert_eq!(stub.faults.unavailable.load(Ordering::SeqCst), 97);
}

#[test]
fn bearer_token_is_sent() {
    let faults = Faults { required_token: Some("s3cret".into()), ..Faults::default() };
    let stub = Stub::start(builtin(), faults);
    let denied = ProviderHandle::remote(&stub.url, fast());
    assert!(matches!(denied, Err(ProviderError::Rejected(_))));
    let ok = ProviderHandle::remote(&stub.url, RemoteOptions { bearer_token: Some("s3cret".into()), ..fast() });
    assert!(ok.is_ok());
}

#[test]
fn malformed_payloads_are_protocol_errors() {
    let stub = Stub::start(builtin(), Faults::default());
    let remote = ProviderHandle::remote(&stub.url, fast()).unwrap();
    *stub.faults.garbage.lock().unwrap() = Some(r#"{"token_ids":[1,2],"logits":[0.5]}"#.into());
    assert!(matches!(remote.next_distribution(&[0], 2), Err(ProviderError::Protocol(_))));
    *stub.faults.garbage.lock().unwrap() = Some("not json".into());
    assert!(matches!(remote.next_distribution(&[0], 2), Err(ProviderError::Protocol(_))));
}

#[test]
fn bad_arguments_are_rejected_not_retried() {
    let stub = Stub::start(builtin(), Faults::default());
    let remote = ProviderHandle::remote(&stub.url, fast()).unwrap();
    let before = stub.seen.lock().unwrap().len();
    let vocab = remote.meta().vocab_size as u32;
    let err = remote.decode(&[vocab + 10]).unwrap_err();
    assert!(matches!(err, ProviderError::Rejected(_)), "{err}");
    assert_eq!(stub.seen.lock().unwrap().len(), before + 1);
}

#[test]
fn invalid_endpoints() {
    for e in ["ftp://host/", "not a url", "http://"] {
        assert!(matches!(ProviderHandle::remote(e, fast()), Err(ProviderError::InvalidArgument(_))), "{e}");
    }
}
