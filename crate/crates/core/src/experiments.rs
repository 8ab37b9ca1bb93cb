//! Correlation statistics and factor sweeps.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::clonedetect::{detect_batch, FingerprintIndex, MemorizedSegment};
use crate::corpus::Corpus;
use crate::generate::{generate_batch, GenerateError, GenerationConfig, OutputRecord};
use crate::provider::LanguageModel;
use crate::{Real, TokenId};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("need at least 3 paired observations, got {0}")]
    TooFewSamples(usize),
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("correlation undefined: zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error(transparent)]
    Generate(#[from] GenerateError),
}

fn check_pair<T>(xs: &[T], ys: &[T]) -> Result<(), ExperimentError> {
    if xs.len() != ys.len() {
        return Err(ExperimentError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 3 {
        return Err(ExperimentError::TooFewSamples(xs.len()));
    }
    Ok(())
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks<T: Real>(xs: &[T]) -> Vec<T> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![T::zero(); xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = T::of((i + j) as f64 / 2.0 + 1.0);
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Sample Pearson correlation coefficient.
pub fn pearson<T: Real>(xs: &[T], ys: &[T]) -> Result<T, ExperimentError> {
    check_pair(xs, ys)?;
    let n = T::of(xs.len() as f64);
    let mx = xs.iter().fold(T::zero(), |a, &x| a + x) / n;
    let my = ys.iter().fold(T::zero(), |a, &y| a + y) / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy = sxy + dx * dy;
        sxx = sxx + dx * dx;
        syy = syy + dy * dy;
    }
    if sxx == T::zero() {
        return Err(ExperimentError::ZeroVariance("xs"));
    }
    if syy == T::zero() {
        return Err(ExperimentError::ZeroVariance("ys"));
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    Ok(r.max(-T::one()).min(T::one()))
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman<T: Real>(xs: &[T], ys: &[T]) -> Result<T, ExperimentError> {
    check_pair(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Two-sided p-value of `r` from `t = r·√((n−2)/(1−r²))` with `n−2` degrees
/// of freedom.
pub fn correlation_p_value<T: Real>(r: T, n: usize) -> T {
    let r = r.as_f64();
    if n < 3 {
        return T::one();
    }
    let df = (n - 2) as f64;
    if r.abs() >= 1.0 {
        return T::zero();
    }
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    T::of((2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult<T> {
    pub spearman_rho: T,
    pub pearson_r: T,
    /// `(spearman, pearson)`.
    pub p_values: (T, T),
    pub n: usize,
}

#[derive(Serialize)]
struct CorrelationJson {
    rho: f64,
    r: f64,
    p_spearman: f64,
    p_pearson: f64,
    n: usize,
}

impl<T: Real> CorrelationResult<T> {
    pub fn compute(xs: &[T], ys: &[T]) -> Result<Self, ExperimentError> {
        let rho = spearman(xs, ys)?;
        let r = pearson(xs, ys)?;
        let n = xs.len();
        Ok(Self { spearman_rho: rho, pearson_r: r, p_values: (correlation_p_value(rho, n), correlation_p_value(r, n)), n })
    }

    /// `{"rho", "r", "p_spearman", "p_pearson", "n"}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(CorrelationJson {
            rho: self.spearman_rho.as_f64(),
            r: self.pearson_r.as_f64(),
            p_spearman: self.p_values.0.as_f64(),
            p_pearson: self.p_values.1.as_f64(),
            n: self.n,
        })
        .expect("plain numbers serialize")
    }
}

/// Correlates training occurrences with output occurrences across segments.
pub fn frequency_correlation(segments: &[MemorizedSegment]) -> Result<CorrelationResult<f64>, ExperimentError> {
    let xs: Vec<f64> = segments.iter().map(|s| s.training_count() as f64).collect();
    let ys: Vec<f64> = segments.iter().map(|s| s.output_occurrences as f64).collect();
    CorrelationResult::compute(&xs, &ys)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    ModelOrder,
    TopK,
    MaxTokens,
    NumOutputs,
}

impl Factor {
    pub fn as_str(self) -> &'static str {
        match self {
            Factor::ModelOrder => "model_order",
            Factor::TopK => "top_k",
            Factor::MaxTokens => "max_tokens",
            Factor::NumOutputs => "num_outputs",
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Factor {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Factor::ModelOrder, Factor::TopK, Factor::MaxTokens, Factor::NumOutputs]
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| ExperimentError::InvalidSweep(format!("unknown factor {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub factor: Factor,
    pub values: Vec<usize>,
    pub fixed: GenerationConfig,
    /// Digest of the training corpus.
    pub corpus_ref: String,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.values.is_empty() {
            return Err(ExperimentError::InvalidSweep("no values".into()));
        }
        if self.values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ExperimentError::InvalidSweep("values must be strictly increasing".into()));
        }
        if self.values[0] == 0 {
            return Err(ExperimentError::InvalidSweep("values must be positive".into()));
        }
        self.fixed.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub factor: Factor,
    pub value: usize,
    pub unique_segments: usize,
    pub total_matches: usize,
    pub wall_ms: u64,
}

/// What a sweep point needs: the corpus and index, models by n-gram order
/// (a single entry for non-builtin models) and the prompt set.
pub struct SweepContext<'a> {
    pub corpus: &'a Corpus,
    pub index: &'a FingerprintIndex,
    pub models: BTreeMap<usize, &'a dyn LanguageModel>,
    pub base_order: usize,
    pub prompts: Vec<Vec<TokenId>>,
    cache: Mutex<HashMap<String, Vec<OutputRecord>>>,
}

impl<'a> SweepContext<'a> {
    pub fn new(
        corpus: &'a Corpus,
        index: &'a FingerprintIndex,
        models: BTreeMap<usize, &'a dyn LanguageModel>,
        base_order: usize,
        prompts: Vec<Vec<TokenId>>,
    ) -> Self {
        Self { corpus, index, models, base_order, prompts, cache: Mutex::new(HashMap::new()) }
    }

    /// Outputs for `config` under the model of `order`. Batches are cached
    /// per model and config (ignoring the output count), so a smaller batch
    /// is served as a prefix of a larger one.
    pub fn outputs(&self, order: usize, config: &GenerationConfig) -> Result<Vec<OutputRecord>, ExperimentError> {
        let model = *self
            .models
            .get(&order)
            .ok_or_else(|| ExperimentError::InvalidSweep(format!("no model of order {order}")))?;
        let key = format!("{order}:{}", GenerationConfig { num_outputs: 0, ..config.clone() }.digest());
        let digest = config.digest();
        if let Some(cached) = self.cache.lock().expect("cache lock").get(&key) {
            if cached.len() >= config.num_outputs {
                return Ok(cached[..config.num_outputs]
                    .iter()
                    .map(|r| OutputRecord { config_digest: digest.clone(), ..r.clone() })
                    .collect());
            }
        }
        let batch = generate_batch(model, &self.prompts, config)?;
        self.cache.lock().expect("cache lock").insert(key, batch.clone());
        Ok(batch)
    }
}

/// Generates and detects at each factor value, all else at baseline.
/// Points run one after another.
pub fn run_sweep(spec: &SweepSpec, ctx: &SweepContext<'_>) -> Result<Vec<SweepRow>, ExperimentError> {
    spec.validate()?;
    if spec.corpus_ref != ctx.corpus.digest() {
        return Err(ExperimentError::InvalidSweep("sweep refers to a different corpus".into()));
    }
    let mut rows = Vec::with_capacity(spec.values.len());
    for &value in &spec.values {
        let started = Instant::now();
        let mut config = spec.fixed.clone();
        let mut order = ctx.base_order;
        match spec.factor {
            Factor::ModelOrder => order = value,
            Factor::TopK => config.top_k = value,
            Factor::MaxTokens => config.max_tokens = value,
            Factor::NumOutputs => config.num_outputs = value,
        }
        let outputs = ctx.outputs(order, &config)?;
        let det = detect_batch(ctx.index, ctx.corpus, &outputs);
        let row = SweepRow {
            factor: spec.factor,
            value,
            unique_segments: det.unique_segments(),
            total_matches: det.matches.len(),
            wall_ms: started.elapsed().as_millis() as u64,
        };
        log::info!("sweep {}={}: {} unique segments", spec.factor, value, row.unique_segments);
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> io::Result<()> {
    writeln!(out, "factor,value,unique_segments,total_matches,wall_ms")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.factor, r.value, r.unique_segments, r.total_matches, r.wall_ms)?;
    }
    out.flush()
}
