//! Output extraction: temperature-scaled top-k sampling and the four
//! prompting strategies (non-prompt, temperature-decaying, prompt-conditioned
//! and two-step generation).

mod prompts;
mod sampling;

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use prompts::{extract_pcg_prompts, find_definitions, select_tsg_prompt, DefinitionPrompt};
pub use sampling::{sample_index, softmax_with_temperature, top_k_sample};

use crate::provider::{LanguageModel, ProviderError};
use crate::TokenId;

pub const TOP_K_PRESETS: [usize; 4] = [5, 10, 20, 40];
pub const MAX_TOKENS_PRESETS: [usize; 4] = [256, 512, 768, 1024];
pub const DEFAULT_MAX_TOKENS: usize = 512;
pub const DEFAULT_NUM_OUTPUTS: usize = 20_000;

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid generation config: {0}")]
    InvalidConfig(String),
    #[error("provider failed while generating output {index} after {} tokens: {source}", partial.generated_tokens.len())]
    Provider {
        index: usize,
        partial: Box<OutputRecord>,
        #[source]
        source: ProviderError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed output record at line {line}: {reason}")]
    Format { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    /// Non-prompt generation: start from the start-of-sequence token only.
    #[serde(rename = "NPG")]
    Npg,
    /// Non-prompt generation with a decaying temperature.
    #[serde(rename = "TDG")]
    Tdg,
    /// Prompt-conditioned generation from held-out function definitions.
    #[serde(rename = "PCG")]
    Pcg,
    /// Two-step generation seeded with the most frequent prior memorization.
    #[serde(rename = "TSG")]
    Tsg,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Npg => "NPG",
            Strategy::Tdg => "TDG",
            Strategy::Pcg => "PCG",
            Strategy::Tsg => "TSG",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = GenerateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "NPG" => Ok(Strategy::Npg),
            "TDG" => Ok(Strategy::Tdg),
            "PCG" => Ok(Strategy::Pcg),
            "TSG" => Ok(Strategy::Tsg),
            _ => Err(GenerateError::InvalidConfig(format!("unknown strategy {s:?}"))),
        }
    }
}

/// `τ(t) = max(floor, initial − decrement·t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub initial: f64,
    pub decrement: f64,
    pub floor: f64,
}

impl TemperatureSchedule {
    pub const fn constant(t: f64) -> Self {
        Self { initial: t, decrement: 0.0, floor: t }
    }

    /// Starts at 20 and drops by 1 per generated token down to 1.
    pub const fn decaying() -> Self {
        Self { initial: 20.0, decrement: 1.0, floor: 1.0 }
    }

    pub fn at(&self, step: usize) -> f64 {
        (self.initial - self.decrement * step as f64).max(self.floor)
    }

    pub fn validate(&self) -> Result<(), GenerateError> {
        let ok = self.initial.is_finite()
            && self.initial > 0.0
            && self.decrement.is_finite()
            && self.decrement >= 0.0
            && self.floor.is_finite()
            && self.floor >= 0.0
            && self.floor <= self.initial;
        if ok {
            Ok(())
        } else {
            Err(GenerateError::InvalidConfig(format!("bad temperature schedule {self:?}")))
        }
    }
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self::constant(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub strategy: Strategy,
    pub top_k: usize,
    pub schedule: TemperatureSchedule,
    pub max_tokens: usize,
    pub num_outputs: usize,
    pub seed: u64,
}

impl GenerationConfig {
    /// Defaults for `strategy`: k = 10, 512 tokens, 20,000 outputs, seed 0.
    pub fn new(strategy: Strategy) -> Self {
        let schedule = match strategy {
            Strategy::Tdg => TemperatureSchedule::decaying(),
            _ => TemperatureSchedule::constant(1.0),
        };
        Self { strategy, top_k: 10, schedule, max_tokens: DEFAULT_MAX_TOKENS, num_outputs: DEFAULT_NUM_OUTPUTS, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), GenerateError> {
        if self.top_k == 0 {
            return Err(GenerateError::InvalidConfig("top_k must be at least 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(GenerateError::InvalidConfig("max_tokens must be at least 1".into()));
        }
        if self.num_outputs == 0 {
            return Err(GenerateError::InvalidConfig("num_outputs must be at least 1".into()));
        }
        self.schedule.validate()?;
        if self.strategy != Strategy::Tdg && self.schedule != TemperatureSchedule::constant(1.0) {
            return Err(GenerateError::InvalidConfig(format!(
                "{} uses a constant temperature of 1.0; only TDG takes a schedule",
                self.strategy
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the config's JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::corpus::hex(&Sha256::digest(json))
    }
}

/// One generated output `f(p)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub index: usize,
    pub strategy: Strategy,
    pub prompt_text: String,
    pub text: String,
    pub config_digest: String,
    pub prompt: Vec<TokenId>,
    pub generated_tokens: Vec<TokenId>,
    /// Whether generation ended on the end-of-sequence token rather than the length limit.
    #[serde(default)]
    pub stopped_at_eos: bool,
}

/// RNG for output `index`: the ChaCha stream selected by `index` under key
/// `seed`. Step `t` of the output uses word position `2t`, so draws are
/// keyed by `(seed, index, step)`.
pub fn output_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn step_token(dist: &crate::provider::TokenDistribution<f64>, temperature: f64, rng: &mut ChaCha8Rng) -> TokenId {
    if temperature <= 0.0 {
        return dist.argmax().expect("distributions are non-empty");
    }
    let probs = softmax_with_temperature(dist.logits(), temperature).expect("finite logits and positive temperature");
    dist.token_ids()[sample_index(&probs, rng)]
}

/// Generates output `index` autoregressively from `prompt`.
///
/// Each step requests the `top_k` best tokens and applies the step's
/// temperature to their logits. Because scaling by `1/τ` keeps the order of
/// logits, this is the same as scaling the whole vocabulary and truncating
/// afterwards. Generation stops at `max_tokens` or end-of-sequence.
pub fn generate_one<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    config: &GenerationConfig,
    index: usize,
) -> Result<OutputRecord, GenerateError> {
    config.validate()?;
    if prompt.is_empty() {
        return Err(GenerateError::Argument("prompt must contain at least one token".into()));
    }
    let meta = model.meta();
    let eos = meta.eos_id;
    let k = config.top_k.min(meta.vocab_size);
    let digest = config.digest();
    let prompt_text = model.decode(prompt).map_err(|e| provider_failure(index, config, &digest, prompt, "", &[], e))?;

    let mut rng = output_rng(config.seed, index);
    let mut context = prompt.to_vec();
    let mut generated = Vec::with_capacity(config.max_tokens.min(4096));
    let mut stopped_at_eos = false;
    for step in 0..config.max_tokens {
        rng.set_word_pos(2 * step as u128);
        let temperature = config.schedule.at(step);
        let tok = if model.samples_remotely() {
            let (k, t) = if temperature <= 0.0 { (1, 1.0) } else { (k, temperature) };
            model.sample(&context, k, t, rng.next_u64())
        } else {
            model.next_distribution(&context, k).map(|dist| step_token(&dist, temperature, &mut rng))
        }
        .map_err(|e| provider_failure(index, config, &digest, prompt, &prompt_text, &generated, e))?;
        if tok == eos {
            stopped_at_eos = true;
            break;
        }
        generated.push(tok);
        context.push(tok);
    }
    let text = model
        .decode(&generated)
        .map_err(|e| provider_failure(index, config, &digest, prompt, &prompt_text, &generated, e))?;
    Ok(OutputRecord {
        index,
        strategy: config.strategy,
        prompt_text,
        text,
        config_digest: digest,
        prompt: prompt.to_vec(),
        generated_tokens: generated,
        stopped_at_eos,
    })
}

fn provider_failure(
    index: usize,
    config: &GenerationConfig,
    digest: &str,
    prompt: &[TokenId],
    prompt_text: &str,
    generated: &[TokenId],
    source: ProviderError,
) -> GenerateError {
    GenerateError::Provider {
        index,
        partial: Box::new(OutputRecord {
            index,
            strategy: config.strategy,
            prompt_text: prompt_text.to_owned(),
            text: String::new(),
            config_digest: digest.to_owned(),
            prompt: prompt.to_vec(),
            generated_tokens: generated.to_vec(),
            stopped_at_eos: false,
        }),
        source,
    }
}

/// Generates `config.num_outputs` outputs in parallel; output `i` uses
/// `prompts[i % prompts.len()]`. Results are in index order; on failure the
/// error of the lowest failing index is returned.
pub fn generate_batch<M: LanguageModel + ?Sized>(
    model: &M,
    prompts: &[Vec<TokenId>],
    config: &GenerationConfig,
) -> Result<Vec<OutputRecord>, GenerateError> {
    config.validate()?;
    if prompts.is_empty() {
        return Err(GenerateError::InvalidConfig("no prompts to generate from".into()));
    }
    let results: Vec<Result<OutputRecord, GenerateError>> = (0..config.num_outputs)
        .into_par_iter()
        .map(|i| generate_one(model, &prompts[i % prompts.len()], config, i))
        .collect();
    results.into_iter().collect()
}

/// Prompt list for the non-prompt strategies: the start token alone.
pub fn start_prompt<M: LanguageModel + ?Sized>(model: &M) -> Vec<Vec<TokenId>> {
    vec![vec![model.meta().bos_id]]
}

pub fn write_outputs_jsonl<W: Write>(records: &[OutputRecord], mut out: W) -> Result<(), GenerateError> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_outputs_jsonl<R: BufRead>(input: R) -> Result<Vec<OutputRecord>, GenerateError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: OutputRecord =
            serde_json::from_str(&line).map_err(|e| GenerateError::Format { line: i + 1, reason: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Corpus, CorpusRole, Document};
    use crate::provider::ProviderHandle;
    use crate::refmodel::NGramModel;
    use std::sync::Arc;

    fn handle(texts: &[&str], order: usize) -> ProviderHandle {
        let docs = texts.iter().enumerate().map(|(i, t)| Document::new(format!("{i}"), t, "t")).collect();
        let c = Corpus::from_documents(docs, CorpusRole::Training).unwrap();
        ProviderHandle::builtin(Arc::new(NGramModel::train(&c, order, 0.4).unwrap()), "t")
    }

    fn cfg(strategy: Strategy, k: usize, max_tokens: usize) -> GenerationConfig {
        GenerationConfig { top_k: k, max_tokens, num_outputs: 8, ..GenerationConfig::new(strategy) }
    }

    #[test]
    fn tdg_schedule_reaches_floor() {
        let s = TemperatureSchedule::decaying();
        let temps: Vec<f64> = (0..23).map(|t| s.at(t)).collect();
        let mut want: Vec<f64> = (1..=20).rev().map(f64::from).collect();
        want.extend([1.0, 1.0, 1.0]);
        assert_eq!(temps, want);
    }

    #[test]
    fn schedule_validation() {
        assert!(TemperatureSchedule { initial: 0.0, decrement: 0.0, floor: 0.0 }.validate().is_err());
        assert!(TemperatureSchedule { initial: 1.0, decrement: -1.0, floor: 0.5 }.validate().is_err());
        assert!(TemperatureSchedule { initial: 1.0, decrement: 0.0, floor: 2.0 }.validate().is_err());
        let mut c = GenerationConfig::new(Strategy::Npg);
        c.schedule = TemperatureSchedule::decaying();
        assert!(c.validate().is_err());
        assert!(GenerationConfig::new(Strategy::Tdg).validate().is_ok());
    }

    #[test]
    fn deterministic_chain_greedy() {
        let h = handle(&["p q r s t\n"], 3);
        let prompt = vec![0];
        let rec = generate_one(&h, &prompt, &cfg(Strategy::Npg, 1, 3), 0).unwrap();
        assert_eq!(rec.text, "p q");
        assert_eq!(rec.generated_tokens.len(), 3);
        assert_eq!(rec.prompt_text, "");
    }

    #[test]
    fn stops_at_eos() {
        let h = handle(&["a b\n"], 3);
        let rec = generate_one(&h, &[0], &cfg(Strategy::Npg, 1, 50), 0).unwrap();
        assert_eq!(rec.text, "a b\n");
        assert!(rec.stopped_at_eos);
        assert!(!rec.generated_tokens.contains(&h.meta().eos_id));
    }

    #[test]
    fn same_seed_and_index_reproduce() {
        let h = handle(&["a b c\n", "a c b\n", "b a c\n", "c c a\n"], 2);
        let c = cfg(Strategy::Npg, 4, 40);
        let a = generate_one(&h, &[0], &c, 3).unwrap();
        let b = generate_one(&h, &[0], &c, 3).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let other = generate_one(&h, &[0], &c, 4).unwrap();
        assert_eq!(other.index, 4);
    }

    #[test]
    fn shorter_outputs_are_prefixes() {
        let h = handle(&["a b c\n", "a c b\n", "b a c\n", "c c a\n"], 2);
        for i in 0..10 {
            let long = generate_one(&h, &[0], &cfg(Strategy::Npg, 4, 64), i).unwrap();
            let short = generate_one(&h, &[0], &cfg(Strategy::Npg, 4, 16), i).unwrap();
            assert!(long.generated_tokens.starts_with(&short.generated_tokens));
        }
    }

    #[test]
    fn batch_matches_individual_generation() {
        let h = handle(&["a b c\n", "a c b\n", "b a c\n"], 2);
        let c = cfg(Strategy::Npg, 3, 20);
        let batch = generate_batch(&h, &start_prompt(&h), &c).unwrap();
        assert_eq!(batch.len(), 8);
        for (i, r) in batch.iter().enumerate() {
            assert_eq!(r.index, i);
            assert_eq!(r, &generate_one(&h, &[0], &c, i).unwrap());
            assert!(!r.text.contains("<s>"));
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let h = handle(&["a b c\n"], 2);
        let batch = generate_batch(&h, &start_prompt(&h), &cfg(Strategy::Npg, 2, 10)).unwrap();
        let mut buf = Vec::new();
        write_outputs_jsonl(&batch, &mut buf).unwrap();
        let first: serde_json::Value = serde_json::from_slice(buf.split(|&b| b == b'\n').next().unwrap()).unwrap();
        for key in ["index", "strategy", "prompt_text", "text", "config_digest"] {
            assert!(first.get(key).is_some(), "{key}");
        }
        assert_eq!(read_outputs_jsonl(&buf[..]).unwrap(), batch);
    }

    #[test]
    fn strategy_names() {
        for s in [Strategy::Npg, Strategy::Tdg, Strategy::Pcg, Strategy::Tsg] {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
        }
    }

    #[test]
    fn digest_tracks_config() {
        let a = GenerationConfig::new(Strategy::Npg);
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
