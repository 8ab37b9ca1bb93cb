//! End-to-end audits: generate, detect, score, scan, tag, report.
//!
//! Each expensive stage persists its artifact in the output directory and
//! is skipped on a rerun whose config digest matches.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clonedetect::{
    containment, detect_batch, read_segments_jsonl, write_segments_csv, write_segments_jsonl, CloneMatch, Containment,
    FingerprintIndex, MemorizedSegment, DEFAULT_SHARDS,
};
use crate::corpus::{load_corpus, Corpus, CorpusError, CorpusRole, LoadOptions, SourceFormat};
use crate::experiments::frequency_correlation;
use crate::generate::{
    extract_pcg_prompts, generate_batch, read_outputs_jsonl, select_tsg_prompt, start_prompt, write_outputs_jsonl,
    GenerateError, GenerationConfig, OutputRecord, Strategy, TemperatureSchedule, DEFAULT_MAX_TOKENS,
    DEFAULT_NUM_OUTPUTS,
};
use crate::metrics::{
    rank_outputs, read_scores_csv, score_batch, topk_memorization_rate, write_scores_csv, Metric, MetricScores,
    MetricsError, Scorers,
};
use crate::provider::{LanguageModel, ProviderError, ProviderHandle, RemoteOptions};
use crate::refmodel::{NGramModel, RefModelError, DEFAULT_BACKOFF_ALPHA};
use crate::scanners::{
    filter_trivial, mark_in_training, scan_secrets, tag_categories, write_findings_jsonl, CategoryCounts, SecretFinding,
    SecretKind,
};
use crate::testbed::{build_testbed, TestbedSpec};
use crate::TokenId;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PROVIDER: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

pub const STATE_FILE: &str = "audit-state.json";
pub const OUTPUTS_FILE: &str = "outputs.jsonl";
pub const SEGMENTS_FILE: &str = "segments.jsonl";
pub const SEGMENTS_CSV: &str = "segments.csv";
pub const MATCHES_FILE: &str = "matches.jsonl";
pub const SCORES_FILE: &str = "scores.csv";
pub const FINDINGS_FILE: &str = "findings.jsonl";
pub const CATEGORIES_FILE: &str = "categories.csv";
pub const TOPK_FILE: &str = "topk_rates.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

/// Ranked entries listed per metric in the report.
const REPORT_RANKED: usize = 10;
/// Segments listed in the report.
const REPORT_SEGMENTS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Load,
    Models,
    Generate,
    Detect,
    Metrics,
    Scan,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Load => "load",
            Stage::Models => "models",
            Stage::Generate => "generate",
            Stage::Detect => "detect",
            Stage::Metrics => "metrics",
            Stage::Scan => "scan",
            Stage::Report => "report",
        })
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] RefModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl StageError {
    fn is_provider(&self) -> bool {
        matches!(
            self,
            StageError::Provider(_)
                | StageError::Generate(GenerateError::Provider { .. })
                | StageError::Metrics(MetricsError::Provider(_))
        )
    }
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: StageError,
    },
}

impl AuditError {
    /// 2 for configuration problems, 3 for provider failures, 4 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            AuditError::Config(_) => EXIT_CONFIG,
            AuditError::Stage { source, .. } if source.is_provider() => EXIT_PROVIDER,
            AuditError::Stage { .. } => EXIT_INTERNAL,
        }
    }
}

fn stage<E: Into<StageError>>(stage: Stage) -> impl FnOnce(E) -> AuditError {
    move |e| AuditError::Stage { stage, source: e.into() }
}

fn default_alpha() -> f64 {
    DEFAULT_BACKOFF_ALPHA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    /// n-gram reference model trained on the training corpus.
    Builtin {
        order: usize,
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    /// n-gram model saved by `NGramModel::write_to`.
    File { path: PathBuf },
    /// A model served over the provider wire protocol.
    Remote {
        endpoint: String,
        #[serde(default)]
        timeout_ms: Option<u64>,
        #[serde(default)]
        server_sampling: bool,
    },
}

impl ModelSpec {
    pub fn builtin(order: usize) -> Self {
        ModelSpec::Builtin { order, alpha: DEFAULT_BACKOFF_ALPHA }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    pub audited: ModelSpec,
    pub large: ModelSpec,
    pub small: ModelSpec,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        Self { audited: ModelSpec::builtin(5), large: ModelSpec::builtin(5), small: ModelSpec::builtin(2) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(default)]
    pub training: Option<PathBuf>,
    #[serde(default)]
    pub heldout: Option<PathBuf>,
    #[serde(default = "default_format")]
    pub format: SourceFormat,
    /// Accepted file extensions for directory sources.
    #[serde(default)]
    pub extensions: Option<Vec<String>>,
    #[serde(default)]
    pub dedup: bool,
    /// Build the synthetic testbed instead of reading files.
    #[serde(default)]
    pub testbed: Option<TestbedSpec>,
}

fn default_format() -> SourceFormat {
    SourceFormat::Jsonl
}

/// Generation settings; an omitted schedule follows the strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSettings {
    pub strategy: Strategy,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "default_num_outputs")]
    pub num_outputs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: Option<TemperatureSchedule>,
}

fn default_top_k() -> usize {
    10
}
fn default_max_tokens() -> usize {
    DEFAULT_MAX_TOKENS
}
fn default_num_outputs() -> usize {
    DEFAULT_NUM_OUTPUTS
}

impl GenerationSettings {
    pub fn to_config(&self) -> GenerationConfig {
        let mut c = GenerationConfig::new(self.strategy);
        c.top_k = self.top_k;
        c.max_tokens = self.max_tokens;
        c.num_outputs = self.num_outputs;
        c.seed = self.seed;
        if let Some(s) = self.schedule {
            c.schedule = s;
        }
        c
    }
}

impl From<&GenerationConfig> for GenerationSettings {
    fn from(c: &GenerationConfig) -> Self {
        Self {
            strategy: c.strategy,
            top_k: c.top_k,
            max_tokens: c.max_tokens,
            num_outputs: c.num_outputs,
            seed: c.seed,
            schedule: Some(c.schedule),
        }
    }
}

fn default_window() -> usize {
    crate::clonedetect::DEFAULT_WINDOW_LINES
}
fn all_metrics() -> Vec<Metric> {
    Metric::ALL.to_vec()
}
fn default_report_k() -> usize {
    100
}
fn yes() -> bool {
    true
}
fn default_out() -> PathBuf {
    PathBuf::from("audit-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub models: ModelsConfig,
    pub generation: GenerationSettings,
    /// Clone threshold `L` in significant lines.
    #[serde(default = "default_window")]
    pub window_lines: usize,
    /// Metrics ranked in the report.
    #[serde(default = "all_metrics")]
    pub metrics: Vec<Metric>,
    /// `K` of the top-K memorization rates.
    #[serde(default = "default_report_k")]
    pub report_top_k: usize,
    #[serde(default = "yes")]
    pub redact: bool,
    /// Segments of an earlier audit, for two-step generation.
    #[serde(default)]
    pub tsg_segments: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

impl AuditConfig {
    /// Reads TOML (by `.toml` extension) or JSON.
    pub fn load(path: &Path) -> Result<Self, AuditError> {
        let text = fs::read_to_string(path).map_err(|e| AuditError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| AuditError::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| AuditError::Config(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), AuditError> {
        let bad = |m: String| Err(AuditError::Config(m));
        if self.window_lines < 2 {
            return bad(format!("window_lines must be at least 2, got {}", self.window_lines));
        }
        if self.report_top_k == 0 {
            return bad("report_top_k must be at least 1".into());
        }
        if self.metrics.is_empty() {
            return bad("no metrics selected".into());
        }
        match (&self.corpus.training, &self.corpus.testbed) {
            (Some(_), Some(_)) => return bad("give either corpus.training or corpus.testbed, not both".into()),
            (None, None) => return bad("corpus.training or corpus.testbed is required".into()),
            _ => {}
        }
        for (role, m) in [("audited", &self.models.audited), ("large", &self.models.large), ("small", &self.models.small)]
        {
            if let ModelSpec::Builtin { order, alpha } = m {
                if *order == 0 || !(*alpha > 0.0 && *alpha <= 1.0) {
                    return bad(format!("models.{role}: order must be >= 1 and alpha in (0, 1]"));
                }
            }
        }
        self.generation.to_config().validate().map_err(|e| AuditError::Config(e.to_string()))?;
        if self.generation.strategy == Strategy::Tsg && self.tsg_segments.is_none() {
            return bad("two-step generation needs tsg_segments from an earlier audit".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, output directory excluded.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        digest_value(&c)
    }

    /// Digest of the settings that shape stage artifacts; report-only
    /// settings (metric selection, `K`, redaction) are left out.
    pub fn artifact_digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.metrics = Vec::new();
        c.report_top_k = 0;
        c.redact = true;
        digest_value(&c)
    }
}

fn digest_value<T: Serialize>(v: &T) -> String {
    let v = canonical(serde_json::to_value(v).expect("config serializes"));
    crate::corpus::hex(&Sha256::digest(v.to_string().as_bytes()))
}

/// Recursively sorts object keys.
pub fn canonical(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let sorted: BTreeMap<String, Value> = map.into_iter().map(|(k, v)| (k, canonical(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(xs) => Value::Array(xs.into_iter().map(canonical).collect()),
        other => other,
    }
}

pub struct AuditInputs {
    pub training: Corpus,
    pub heldout: Option<Corpus>,
}

pub fn load_inputs(cfg: &CorpusConfig) -> Result<AuditInputs, AuditError> {
    if let Some(spec) = &cfg.testbed {
        let tb = build_testbed(spec).map_err(|e| AuditError::Config(format!("testbed: {e}")))?;
        return Ok(AuditInputs { training: tb.training, heldout: Some(tb.heldout) });
    }
    let load = |path: &Path, role| {
        let mut opts = LoadOptions::new(cfg.format, role);
        opts.dedup = cfg.dedup;
        if let Some(ext) = &cfg.extensions {
            opts.extensions = ext.clone();
        }
        load_corpus(path, &opts).map(|l| l.corpus).map_err(|e| AuditError::Config(format!("{}: {e}", path.display())))
    };
    let training = load(cfg.training.as_deref().expect("validated"), CorpusRole::Training)?;
    if training.is_empty() {
        return Err(AuditError::Config("training corpus is empty".into()));
    }
    let heldout = cfg.heldout.as_deref().map(|p| load(p, CorpusRole::Heldout)).transpose()?;
    Ok(AuditInputs { training, heldout })
}

pub struct AuditModels {
    pub audited: ProviderHandle,
    pub large: ProviderHandle,
    pub small: ProviderHandle,
}

/// Trains each distinct builtin spec once and connects remote ones.
pub fn build_models(cfg: &ModelsConfig, training: &Corpus) -> Result<AuditModels, AuditError> {
    let mut trained: HashMap<(usize, u64), Arc<NGramModel>> = HashMap::new();
    let mut make = |spec: &ModelSpec| -> Result<ProviderHandle, AuditError> {
        match spec {
            ModelSpec::Builtin { order, alpha } => {
                let key = (*order, alpha.to_bits());
                let model = match trained.get(&key) {
                    Some(m) => Arc::clone(m),
                    None => {
                        let m = Arc::new(NGramModel::train(training, *order, *alpha).map_err(stage(Stage::Models))?);
                        trained.insert(key, Arc::clone(&m));
                        m
                    }
                };
                Ok(ProviderHandle::builtin(model, format!("ngram-{order}")))
            }
            ModelSpec::File { path } => {
                let f = fs::File::open(path).map_err(|e| AuditError::Config(format!("{}: {e}", path.display())))?;
                let m = NGramModel::read_from(BufReader::new(f))
                    .map_err(|e| AuditError::Config(format!("{}: {e}", path.display())))?;
                let label = format!("ngram-{}", m.order());
                Ok(ProviderHandle::builtin(Arc::new(m), label))
            }
            ModelSpec::Remote { endpoint, timeout_ms, server_sampling } => {
                let mut opts = RemoteOptions::from_env();
                if let Some(t) = timeout_ms {
                    opts.timeout_ms = *t;
                }
                opts.server_sampling = *server_sampling;
                ProviderHandle::remote(endpoint, opts).map_err(|e| match e {
                    ProviderError::InvalidArgument(m) => AuditError::Config(format!("remote endpoint {endpoint}: {m}")),
                    e => stage::<ProviderError>(Stage::Models)(e),
                })
            }
        }
    };
    Ok(AuditModels { audited: make(&cfg.audited)?, large: make(&cfg.large)?, small: make(&cfg.small)? })
}

/// Prompt token sequences for the configured strategy.
fn prompts(cfg: &AuditConfig, model: &dyn LanguageModel, heldout: Option<&Corpus>) -> Result<Vec<Vec<TokenId>>, AuditError> {
    let encode = |text: &str| model.encode(&format!("{text}\n")).map_err(stage(Stage::Generate));
    match cfg.generation.strategy {
        Strategy::Npg | Strategy::Tdg => Ok(start_prompt(model)),
        Strategy::Pcg => {
            let heldout = heldout.ok_or_else(|| AuditError::Config("prompt-conditioned generation needs corpus.heldout".into()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.generation.seed);
            let defs = extract_pcg_prompts(heldout, cfg.generation.num_outputs, &mut rng)
                .map_err(|e| AuditError::Config(e.to_string()))?;
            if defs.is_empty() {
                return Err(AuditError::Config("the held-out corpus has no function definitions to prompt with".into()));
            }
            defs.iter().map(|d| encode(&d.text)).collect()
        }
        Strategy::Tsg => {
            let path = cfg.tsg_segments.as_deref().expect("validated");
            let f = fs::File::open(path).map_err(|e| AuditError::Config(format!("{}: {e}", path.display())))?;
            let prior = read_segments_jsonl(BufReader::new(f)).map_err(|e| AuditError::Config(format!("{}: {e}", path.display())))?;
            let seg = select_tsg_prompt(&prior).map_err(|e| AuditError::Config(e.to_string()))?;
            Ok(vec![encode(&seg.text)?])
        }
    }
}

fn write_atomic<F>(path: &Path, fill: F) -> Result<(), StageError>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> Result<(), StageError>,
{
    let tmp = path.with_extension("partial");
    let mut w = BufWriter::new(fs::File::create(&tmp)?);
    fill(&mut w)?;
    w.flush()?;
    drop(w);
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, StageError> {
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct AuditState {
    config_digest: String,
}

/// Clears artifacts left by a run with a different config.
fn prepare_dir(dir: &Path, digest: &str) -> Result<(), StageError> {
    fs::create_dir_all(dir)?;
    let state_path = dir.join(STATE_FILE);
    let same = fs::read_to_string(&state_path)
        .ok()
        .and_then(|s| serde_json::from_str::<AuditState>(&s).ok())
        .is_some_and(|s| s.config_digest == digest);
    if !same {
        for name in [OUTPUTS_FILE, SEGMENTS_FILE, SEGMENTS_CSV, MATCHES_FILE, SCORES_FILE] {
            let p = dir.join(name);
            if p.exists() {
                log::warn!("removing stale {}", p.display());
                fs::remove_file(p)?;
            }
        }
        fs::write(&state_path, serde_json::to_string(&AuditState { config_digest: digest.to_owned() })? + "\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelLabels {
    pub audited: String,
    pub large: String,
    pub small: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub strategy: Strategy,
    pub num_outputs: usize,
    pub max_tokens: usize,
    pub top_k: usize,
    pub seed: u64,
    pub generated_tokens: usize,
    pub stopped_at_eos: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub segment_id: String,
    pub line_count: usize,
    pub training_count: usize,
    pub output_occurrences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationSummary {
    pub window_lines: usize,
    pub unique_segments: usize,
    pub total_matches: usize,
    pub memorized_outputs: usize,
    /// Memorized outputs over all outputs.
    pub memorized_output_ratio: f64,
    /// Most frequent segments; the full list is in `segments.jsonl`.
    pub top_segments: Vec<SegmentSummary>,
    pub containment: Vec<Containment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub output_index: usize,
    pub score: f64,
    pub memorized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: Metric,
    pub k: usize,
    pub topk_memorization_rate: f64,
    pub top: Vec<RankedEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    /// How tags were assigned.
    pub tagger: String,
    /// Memorized outputs tagged.
    pub outputs: usize,
    pub rows: Vec<CategoryRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecretSummary {
    pub redacted: bool,
    pub suppressed: usize,
    pub counts: BTreeMap<SecretKind, usize>,
    pub findings: Vec<SecretFinding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub config_digest: String,
    pub corpus_digest: String,
    pub models: ModelLabels,
    pub batch: BatchSummary,
    pub memorization: MemorizationSummary,
    pub metrics: Vec<MetricSummary>,
    pub categories: CategorySummary,
    pub secrets: SecretSummary,
    /// `{rho, r, p_spearman, p_pearson, n}` between training and output
    /// occurrences of the segments, or `{error}` when undefined.
    pub frequency_correlation: Value,
}

impl AuditReport {
    /// Pretty JSON with sorted keys and a trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let v = canonical(serde_json::to_value(self).expect("report serializes"));
        let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
        s.push('\n');
        s
    }

    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        let m = &self.memorization;
        s += &format!("config {}\ncorpus {}\n", self.config_digest, self.corpus_digest);
        s += &format!("models: audited {}, large {}, small {}\n", self.models.audited, self.models.large, self.models.small);
        let b = &self.batch;
        s += &format!(
            "batch: {} outputs, strategy {}, top-k {}, up to {} tokens, seed {} ({} tokens generated, {} ended at end-of-sequence)\n",
            b.num_outputs, b.strategy, b.top_k, b.max_tokens, b.seed, b.generated_tokens, b.stopped_at_eos
        );
        s += &format!(
            "memorization (L = {}): {} unique segments, {} matches, {} of {} outputs memorized ({:.2}%)\n",
            m.window_lines,
            m.unique_segments,
            m.total_matches,
            m.memorized_outputs,
            b.num_outputs,
            100.0 * m.memorized_output_ratio
        );
        s += "top-K memorization rate by metric:\n";
        for r in &self.metrics {
            s += &format!("  {:<12} top-{:<5} {:.3}\n", r.metric.as_str(), r.k, r.topk_memorization_rate);
        }
        match self.frequency_correlation.get("rho") {
            Some(_) => {
                let f = |k: &str| self.frequency_correlation[k].as_f64().unwrap_or(f64::NAN);
                s += &format!(
                    "training vs output occurrences: spearman {:.3} (p {:.3e}), pearson {:.3} (p {:.3e}), n = {}\n",
                    f("rho"),
                    f("p_spearman"),
                    f("r"),
                    f("p_pearson"),
                    self.frequency_correlation["n"]
                );
            }
            None => s += &format!("training vs output occurrences: {}\n", self.frequency_correlation["error"]),
        }
        s += &format!("categories ({}, {} memorized outputs):\n", self.categories.tagger, self.categories.outputs);
        for r in &self.categories.rows {
            s += &format!("  {:<26} {}\n", r.category, r.count);
        }
        let sec = &self.secrets;
        s += &format!(
            "secrets ({}): {} reported, {} suppressed as trivial\n",
            if sec.redacted { "masked" } else { "UNMASKED" },
            sec.findings.len(),
            sec.suppressed
        );
        for f in &sec.findings {
            s += &format!("  output {:>6} {:<5} {}\n", f.output_index, f.kind, f.matched_text);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReportFormat {
    Json,
    Csv,
    Txt,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "txt" => Ok(ReportFormat::Txt),
            other => Err(format!("unknown report format {other:?} (json, csv, txt)")),
        }
    }
}

/// Writes the report in each format; returns the files written.
/// JSON goes to `report.json`, text to `report.txt`, and CSV to
/// `topk_rates.csv` plus `categories.csv`.
pub fn emit_report(report: &AuditReport, formats: &[ReportFormat], dir: &Path) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut seen = HashSet::new();
    for &f in formats {
        if !seen.insert(f) {
            continue;
        }
        match f {
            ReportFormat::Json => {
                let p = dir.join(REPORT_JSON);
                fs::write(&p, report.to_canonical_json())?;
                written.push(p);
            }
            ReportFormat::Txt => {
                let p = dir.join(REPORT_TXT);
                fs::write(&p, report.summary_text())?;
                written.push(p);
            }
            ReportFormat::Csv => {
                let p = dir.join(TOPK_FILE);
                let mut s = String::from("metric,k,rate\n");
                for r in &report.metrics {
                    s += &format!("{},{},{}\n", r.metric, r.k, r.topk_memorization_rate);
                }
                fs::write(&p, s)?;
                written.push(p);
                let p = dir.join(CATEGORIES_FILE);
                let mut s = String::from("category,count\n");
                for r in &report.categories.rows {
                    s += &format!("{},{}\n", r.category, r.count);
                }
                fs::write(&p, s)?;
                written.push(p);
            }
        }
    }
    Ok(written)
}

/// Reads a `report.json` written by [`emit_report`].
pub fn read_report(path: &Path) -> io::Result<AuditReport> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(io::Error::from)
}

/// Runs the whole pipeline and writes every artifact plus the report in
/// all formats to `cfg.out_dir`.
pub fn run_audit(cfg: &AuditConfig) -> Result<AuditReport, AuditError> {
    cfg.validate()?;
    let inputs = load_inputs(&cfg.corpus)?;
    check_inputs(cfg, &inputs)?;
    let models = build_models(&cfg.models, &inputs.training)?;
    run_audit_with(cfg, &inputs, &models)
}

/// Strategy requirements that can be checked before any model is built.
pub fn check_inputs(cfg: &AuditConfig, inputs: &AuditInputs) -> Result<(), AuditError> {
    if cfg.generation.strategy == Strategy::Pcg && inputs.heldout.as_ref().is_none_or(Corpus::is_empty) {
        return Err(AuditError::Config("prompt-conditioned generation needs a non-empty held-out corpus".into()));
    }
    Ok(())
}

/// [`run_audit`] with corpora and models supplied by the caller.
pub fn run_audit_with(cfg: &AuditConfig, inputs: &AuditInputs, models: &AuditModels) -> Result<AuditReport, AuditError> {
    let run = AuditRun::new(cfg, inputs)?;
    let outputs = run.outputs(&models.audited)?;
    let (matches, segments) = run.detection(&outputs)?;
    let scores = run.scores(models, &outputs)?;
    let findings = run.findings(&outputs)?;
    let report = run.assemble(models, &outputs, &matches, &segments, &scores, &findings)?;
    emit_report(&report, &[ReportFormat::Json, ReportFormat::Csv, ReportFormat::Txt], &cfg.out_dir)
        .map_err(stage(Stage::Report))?;
    Ok(report)
}

/// One audit's stages over a prepared output directory. Each stage reuses
/// its artifact when present.
pub struct AuditRun<'a> {
    cfg: &'a AuditConfig,
    inputs: &'a AuditInputs,
    gen: GenerationConfig,
}

impl<'a> AuditRun<'a> {
    /// Validates `cfg` and clears artifacts written under another config.
    pub fn new(cfg: &'a AuditConfig, inputs: &'a AuditInputs) -> Result<Self, AuditError> {
        cfg.validate()?;
        check_inputs(cfg, inputs)?;
        prepare_dir(&cfg.out_dir, &cfg.artifact_digest()).map_err(stage(Stage::Load))?;
        Ok(Self { cfg, inputs, gen: cfg.generation.to_config() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    /// The persisted batch, if it is complete and matches the config.
    pub fn load_outputs(&self) -> Result<Option<Vec<OutputRecord>>, AuditError> {
        let path = self.path(OUTPUTS_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let f = fs::File::open(&path).map_err(stage(Stage::Generate))?;
        let recs = read_outputs_jsonl(BufReader::new(f)).map_err(stage(Stage::Generate))?;
        let digest = self.gen.digest();
        Ok((recs.len() == self.gen.num_outputs && recs.iter().all(|r| r.config_digest == digest)).then_some(recs))
    }

    pub fn outputs(&self, audited: &dyn LanguageModel) -> Result<Vec<OutputRecord>, AuditError> {
        let path = self.path(OUTPUTS_FILE);
        if let Some(recs) = self.load_outputs()? {
            log::info!("reusing {}", path.display());
            return Ok(recs);
        }
        let prompt_set = prompts(self.cfg, audited, self.inputs.heldout.as_ref())?;
        log::info!("generating {} outputs", self.gen.num_outputs);
        let recs = generate_batch(audited, &prompt_set, &self.gen).map_err(stage(Stage::Generate))?;
        write_atomic(&path, |w| Ok(write_outputs_jsonl(&recs, w)?)).map_err(stage(Stage::Generate))?;
        Ok(recs)
    }

    pub fn detection(&self, outputs: &[OutputRecord]) -> Result<(Vec<CloneMatch>, Vec<MemorizedSegment>), AuditError> {
        let seg_path = self.path(SEGMENTS_FILE);
        let match_path = self.path(MATCHES_FILE);
        if seg_path.exists() && match_path.exists() {
            log::info!("reusing {}", seg_path.display());
            let matches = read_jsonl(&match_path).map_err(stage(Stage::Detect))?;
            let segments = read_jsonl(&seg_path).map_err(stage(Stage::Detect))?;
            return Ok((matches, segments));
        }
        let training = &self.inputs.training;
        let index = FingerprintIndex::build(training, self.cfg.window_lines, DEFAULT_SHARDS);
        let det = detect_batch(&index, training, outputs);
        write_atomic(&match_path, |w| {
            for m in &det.matches {
                serde_json::to_writer(&mut *w, m)?;
                w.write_all(b"\n")?;
            }
            Ok(())
        })
        .map_err(stage(Stage::Detect))?;
        write_atomic(&self.path(SEGMENTS_CSV), |w| Ok(write_segments_csv(&det.segments, w)?))
            .map_err(stage(Stage::Detect))?;
        write_atomic(&seg_path, |w| Ok(write_segments_jsonl(&det.segments, w)?)).map_err(stage(Stage::Detect))?;
        Ok((det.matches, det.segments))
    }

    pub fn scores(&self, models: &AuditModels, outputs: &[OutputRecord]) -> Result<Vec<MetricScores<f64>>, AuditError> {
        let path = self.path(SCORES_FILE);
        if path.exists() {
            log::info!("reusing {}", path.display());
            let f = fs::File::open(&path).map_err(stage(Stage::Metrics))?;
            return read_scores_csv(BufReader::new(f)).map_err(stage(Stage::Metrics));
        }
        let scorers = Scorers {
            audited: &models.audited,
            large: &models.large,
            small: &models.small,
            window_lines: crate::metrics::DEFAULT_WINDOW_LINES,
        };
        let s = score_batch(&scorers, outputs).map_err(stage(Stage::Metrics))?;
        write_atomic(&path, |w| Ok(write_scores_csv(&s, w)?)).map_err(stage(Stage::Metrics))?;
        Ok(s)
    }

    /// All findings, suppressed ones included; `findings.jsonl` receives
    /// the unsuppressed ones, masked when redaction is on.
    pub fn findings(&self, outputs: &[OutputRecord]) -> Result<Vec<SecretFinding>, AuditError> {
        let mut findings: Vec<SecretFinding> =
            outputs.iter().flat_map(|o| filter_trivial(scan_secrets(&o.text, o.index))).collect();
        mark_in_training(&mut findings, &self.inputs.training);
        write_atomic(&self.path(FINDINGS_FILE), |w| Ok(write_findings_jsonl(&findings, self.cfg.redact, w)?))
            .map_err(stage(Stage::Scan))?;
        Ok(findings)
    }

    pub fn assemble(
        &self,
        models: &AuditModels,
        outputs: &[OutputRecord],
        matches: &[CloneMatch],
        segments: &[MemorizedSegment],
        scores: &[MetricScores<f64>],
        findings: &[SecretFinding],
    ) -> Result<AuditReport, AuditError> {
        let cfg = self.cfg;
        let memorized: HashSet<usize> = matches.iter().map(|m| m.output_index).collect();
        let metric_rows = cfg
            .metrics
            .iter()
            .map(|&m| {
                let ranked = rank_outputs(scores, m);
                MetricSummary {
                    metric: m,
                    k: cfg.report_top_k,
                    topk_memorization_rate: topk_memorization_rate(&ranked, &memorized, cfg.report_top_k),
                    top: ranked
                        .entries
                        .iter()
                        .take(REPORT_RANKED)
                        .map(|&(i, score)| RankedEntry { output_index: i, score, memorized: memorized.contains(&i) })
                        .collect(),
                }
            })
            .collect();

        let suppressed = findings.iter().filter(|f| f.suppressed).count();
        let reported: Vec<SecretFinding> = findings
            .iter()
            .filter(|f| !f.suppressed)
            .map(|f| if cfg.redact { f.redacted() } else { f.clone() })
            .collect();
        let mut counts = BTreeMap::new();
        for f in &reported {
            *counts.entry(f.kind).or_insert(0) += 1;
        }

        // Categories of the memorized content of each memorized output.
        let by_id: HashMap<&str, &MemorizedSegment> = segments.iter().map(|s| (s.segment_id.as_str(), s)).collect();
        let mut per_output: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
        for m in matches {
            if let Some(s) = by_id.get(m.segment_id.as_str()) {
                per_output.entry(m.output_index).or_default().push(s.text.as_str());
            }
        }
        let tags: Vec<_> = per_output.iter().flat_map(|(&i, texts)| tag_categories(&texts.join("\n"), i)).collect();
        let cat_counts = CategoryCounts::from_tags(&tags);
        write_atomic(&self.path(CATEGORIES_FILE), |w| Ok(cat_counts.write_csv(w)?)).map_err(stage(Stage::Report))?;

        let correlation = match frequency_correlation(segments) {
            Ok(c) => c.to_json(),
            Err(e) => serde_json::json!({ "error": e.to_string() }),
        };
        let gen = &self.gen;
        Ok(AuditReport {
            config_digest: cfg.digest(),
            corpus_digest: self.inputs.training.digest(),
            models: ModelLabels {
                audited: models.audited.meta().model_label.clone(),
                large: models.large.meta().model_label.clone(),
                small: models.small.meta().model_label.clone(),
            },
            batch: BatchSummary {
                strategy: gen.strategy,
                num_outputs: outputs.len(),
                max_tokens: gen.max_tokens,
                top_k: gen.top_k,
                seed: gen.seed,
                generated_tokens: outputs.iter().map(|o| o.generated_tokens.len()).sum(),
                stopped_at_eos: outputs.iter().filter(|o| o.stopped_at_eos).count(),
            },
            memorization: MemorizationSummary {
                window_lines: cfg.window_lines,
                unique_segments: segments.len(),
                total_matches: matches.len(),
                memorized_outputs: memorized.len(),
                memorized_output_ratio: if outputs.is_empty() {
                    0.0
                } else {
                    memorized.len() as f64 / outputs.len() as f64
                },
                top_segments: segments
                    .iter()
                    .take(REPORT_SEGMENTS)
                    .map(|s| SegmentSummary {
                        segment_id: s.segment_id.clone(),
                        line_count: s.line_count,
                        training_count: s.training_count(),
                        output_occurrences: s.output_occurrences,
                    })
                    .collect(),
                containment: containment(segments, cfg.window_lines),
            },
            metrics: metric_rows,
            categories: CategorySummary {
                tagger: "rule-based heuristic (proxy for manual card sorting)".into(),
                outputs: per_output.len(),
                rows: cat_counts.rows().into_iter().map(|(c, n)| CategoryRow { category: c.to_owned(), count: n }).collect(),
            },
            secrets: SecretSummary { redacted: cfg.redact, suppressed, counts, findings: reported },
            frequency_correlation: correlation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn testbed_config(dir: &Path) -> AuditConfig {
        let toml = format!(
            r#"
out_dir = "{}"
[corpus.testbed]
documents = 120
snippets_per_frequency = 2
probes = 4
heldout_documents = 10
filler_lines = [20, 40]

[generation]
strategy = "NPG"
num_outputs = 60
max_tokens = 128
"#,
            dir.display()
        );
        toml::from_str(&toml).unwrap()
    }

    #[test]
    fn toml_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = testbed_config(dir.path());
        assert_eq!(cfg.models, ModelsConfig::default());
        assert_eq!(cfg.window_lines, 6);
        assert!(cfg.redact);
        assert_eq!(cfg.metrics, Metric::ALL.to_vec());
        assert_eq!(cfg.generation.to_config().top_k, 10);
        cfg.validate().unwrap();
    }

    #[test]
    fn tdg_gets_the_decaying_schedule() {
        let s: GenerationSettings = toml::from_str("strategy = \"TDG\"").unwrap();
        assert_eq!(s.to_config().schedule, TemperatureSchedule::decaying());
        let s: GenerationSettings = toml::from_str("strategy = \"NPG\"\n[schedule]\ninitial = 5.0\ndecrement = 1.0\nfloor = 1.0").unwrap();
        assert!(s.to_config().validate().is_err());
    }

    #[test]
    fn invalid_configs() {
        let dir = tempfile::tempdir().unwrap();
        let base = testbed_config(dir.path());
        let mut c = base.clone();
        c.window_lines = 1;
        assert!(matches!(c.validate(), Err(AuditError::Config(_))));
        let mut c = base.clone();
        c.corpus.training = Some("x.jsonl".into());
        assert!(matches!(c.validate(), Err(AuditError::Config(_))));
        let mut c = base.clone();
        c.generation.strategy = Strategy::Tsg;
        assert!(matches!(c.validate(), Err(AuditError::Config(_))));
        let mut c = base;
        c.models.small = ModelSpec::Builtin { order: 0, alpha: 0.4 };
        assert_eq!(c.validate().unwrap_err().exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn digest_ignores_output_directory() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        assert_eq!(testbed_config(a.path()).digest(), testbed_config(b.path()).digest());
        let mut c = testbed_config(a.path());
        c.generation.seed = 1;
        assert_ne!(c.digest(), testbed_config(a.path()).digest());
    }

    #[test]
    fn canonical_sorts_nested_keys() {
        let v = serde_json::json!({"b": 1, "a": {"d": [{"z": 0, "y": 1}], "c": 2}});
        assert_eq!(canonical(v).to_string(), r#"{"a":{"c":2,"d":[{"y":1,"z":0}]},"b":1}"#);
    }

    #[test]
    fn exit_codes() {
        let p = AuditError::Stage { stage: Stage::Generate, source: ProviderError::Protocol("x".into()).into() };
        assert_eq!(p.exit_code(), EXIT_PROVIDER);
        let io = AuditError::Stage { stage: Stage::Report, source: io::Error::other("disk").into() };
        assert_eq!(io.exit_code(), EXIT_INTERNAL);
        assert!(io.to_string().contains("report"));
    }

    #[test]
    fn report_formats() {
        assert_eq!("json".parse::<ReportFormat>().unwrap(), ReportFormat::Json);
        assert!("xml".parse::<ReportFormat>().is_err());
    }
}
